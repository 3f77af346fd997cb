#!/usr/bin/env python3
"""Regenerate the committed trace datasets under data/.

Two datasets:
  data/golden/  - small mixed-app trace for golden-report, determinism,
                  and firewall differential tests
  data/snitch/  - synthetic third-party accounting workload: 372 flows
                  (341 TCP / 31 UDP, 10 of them QUIC-shaped), 151
                  organizations, five with more than 10 requests

Both are deterministic: fixed local ISN, fixed timings, no randomness.
"""

from __future__ import annotations

import sys
from pathlib import Path

from mbz import dnswire
from mbz.packet import (
    ACK, FIN, PSH, SYN, make_tcp_packet, make_udp_packet, mss_option,
    serialize_packet,
)
from mbz.trace import APP_TO_NET, TraceEvent, write_trace

REPO = Path(__file__).resolve().parent.parent
LOCAL_ISN = 5000
APP_ISN = 1000
SRC_IP = "10.0.0.2"
RESOLVER = ("8.8.8.8", 53)
STEP_US = 2_000  # spacing between a flow's events


class TraceBuilder:
    def __init__(self):
        self.events: list[TraceEvent] = []
        self._next_port = 30000

    def port(self) -> int:
        self._next_port += 1
        return self._next_port

    def add(self, ts_us: int, pkt, app: str) -> None:
        self.events.append(TraceEvent(
            ts_us=ts_us, direction=APP_TO_NET, app_label=app,
            packet=serialize_packet(pkt)))

    def dns_query(self, ts_us: int, qid: int, qname: str, app: str) -> None:
        src = (SRC_IP, self.port())
        self.add(ts_us, make_udp_packet(src, RESOLVER,
                                        payload=dnswire.build_query(qid, qname)), app)

    def udp_datagram(self, ts_us: int, dst, payload: bytes, app: str) -> None:
        src = (SRC_IP, self.port())
        self.add(ts_us, make_udp_packet(src, dst, payload=payload), app)

    def tcp_flow(self, t0_us: int, dst, app: str, payload: bytes = b"",
                 echoed_len: int | None = None) -> None:
        """Scripted full lifecycle against an echo endpoint with zero
        delay: SYN, ACK of the engine's SYN/ACK, optional data, FIN, and
        the final ACK covering the engine's echoed data plus its FIN."""
        src = (SRC_IP, self.port())
        s = APP_ISN
        n = len(payload)
        back = n if echoed_len is None else echoed_len
        self.add(t0_us, make_tcp_packet(
            src, dst, seq=s, ack=0, flags=SYN, options=mss_option(1460)), app)
        self.add(t0_us + STEP_US, make_tcp_packet(
            src, dst, seq=s + 1, ack=LOCAL_ISN + 1, flags=ACK), app)
        if payload:
            self.add(t0_us + 2 * STEP_US, make_tcp_packet(
                src, dst, seq=s + 1, ack=LOCAL_ISN + 1, flags=PSH | ACK,
                payload=payload), app)
        self.add(t0_us + 3 * STEP_US, make_tcp_packet(
            src, dst, seq=s + 1 + n, ack=LOCAL_ISN + 1, flags=FIN | ACK), app)
        self.add(t0_us + 4 * STEP_US, make_tcp_packet(
            src, dst, seq=s + 2 + n, ack=LOCAL_ISN + 2 + back, flags=ACK), app)


def quic_initial(body: bytes = b"client-initial") -> bytes:
    return bytes([0xC3, 0x00, 0x00, 0x00, 0x01]) + body


# --------------------------------------------------------------- golden

GOLDEN_DOMAINS = {
    "ads.blocked.example": "10.200.1.1",
    "cdn.good.example": "10.200.2.1",
}
IMEI = "356938035643809"


def gen_golden(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    tb = TraceBuilder()
    tb.dns_query(100_000, 1, "ads.blocked.example", "browser")
    tb.dns_query(200_000, 2, "cdn.good.example", "browser")

    blocked = ("10.200.1.1", 80)
    good = ("10.200.2.1", 80)
    tb.tcp_flow(1_000_000, blocked, "browser", b"GET /ad-1")
    tb.tcp_flow(1_200_000, blocked, "browser", b"GET /ad-2")
    tb.tcp_flow(1_400_000, good, "browser", b"GET /index")
    # static endpoint: its 4-byte reply does not depend on the request,
    # so a payload rewrite changes exactly one captured packet
    tb.tcp_flow(1_600_000, ("10.200.2.1", 8080), "leakyapp",
                b"POST /t id=" + IMEI.encode() + b" end", echoed_len=4)
    tb.udp_datagram(1_800_000, ("10.200.2.1", 9999), b"udp-ping", "browser")
    tb.events.sort(key=lambda e: e.ts_us)
    write_trace(out_dir / "trace.jsonl", tb.events)

    (out_dir / "scripts.yaml").write_text(
        "- {cidr: 8.8.8.8/32, ports: [53], behavior: dns, answers: {"
        + ", ".join(f"{name}: [{ip}]" for name, ip in GOLDEN_DOMAINS.items())
        + "}}\n"
        "- {cidr: 9.9.9.9/32, ports: [53], behavior: dns, answers: {"
        + ", ".join(f"{name}: [{ip}]" for name, ip in GOLDEN_DOMAINS.items())
        + "}}\n"
        "- {cidr: 10.200.0.0/16, ports: [80, 9999], behavior: echo}\n"
        "- {cidr: 10.200.0.0/16, ports: [8080], behavior: static,"
        " response: 'ack!'}\n")

    (out_dir / "orgs.csv").write_text(
        ".blocked.example,blocked-org\n"
        ".good.example,good-org\n"
        "8.8.8.8/32,resolver\n")

    (out_dir / "rules_deny.yaml").write_text(
        "- match: {dst: .blocked.example}\n  action: {deny: reset}\n")
    (out_dir / "rules_rewrite.yaml").write_text(
        "- match: {app: 'leaky*'}\n"
        f"  action: {{rewrite: {{pattern: '{IMEI}', replacement: '{'0' * 15}'}}}}\n")

    base_plugins = (
        "  - {id: snitch, kind: snitch, org_map: orgs.csv,"
        " first_party_orgs: [resolver]}\n"
        "  - {id: whatif, kind: dns-whatif, resolvers: ['9.9.9.9:53'],"
        " probability: 1.0}\n"
        "  - {id: advisor, kind: protocol-advisor}\n")
    common = (
        "engine: {local_isn: 5000}\n"
        "seed: 0\n"
        "io: {trace: trace.jsonl, scripts: scripts.yaml}\n"
    )
    (out_dir / "config.yaml").write_text(common + "plugins:\n" + base_plugins)
    (out_dir / "config_deny.yaml").write_text(
        common + "plugins:\n"
        "  - {id: fw, kind: firewall, rules: rules_deny.yaml}\n" + base_plugins)
    (out_dir / "config_rewrite.yaml").write_text(
        common + "plugins:\n"
        "  - {id: fw, kind: firewall, rules: rules_rewrite.yaml}\n" + base_plugins)


# --------------------------------------------------------------- snitch

TOP_ORGS = [
    ("doubleclick", "doubleclick.net", 50),
    ("facebook", "graph.facebook.com", 30),
    ("google-analytics", "google-analytics.com", 20),
    ("crashlytics", "crashlytics.com", 15),
    ("adjust", "adjust.com", 12),
]
MID_COUNTS = [10, 10, 10, 9, 9, 8, 8, 7, 7, 6, 6, 5, 5, 4, 4, 3, 3, 2, 2]
# UDP flows per org index (org 0 gets QUIC-shaped ones)
UDP_PLAN = {0: 10, 1: 5, 2: 4, 3: 3, 4: 2, 5: 1, 6: 1, 7: 1, 8: 1, 9: 1,
            10: 1, 11: 1}


def snitch_orgs() -> list[tuple[str, str, int]]:
    orgs = list(TOP_ORGS)
    for i, count in enumerate(MID_COUNTS):
        orgs.append((f"org{i + 6:03d}", f"cdn{i + 6:03d}.example", count))
    total = sum(c for _o, _d, c in orgs)
    singles = 372 - total
    for i in range(singles):
        n = len(orgs) + 1
        orgs.append((f"org{n:03d}", f"cdn{n:03d}.example", 1))
    assert sum(c for _o, _d, c in orgs) == 372
    assert len(orgs) == 151
    return orgs


def gen_snitch(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    orgs = snitch_orgs()
    tb = TraceBuilder()

    answers = {}
    for i, (_org, domain, _count) in enumerate(orgs):
        ip = f"10.100.{i + 1}.1"
        answers[domain] = ip
        tb.dns_query(100_000 + i * 10_000, i + 1, domain, "snapchat")

    t = 3_000_000
    total_udp = 0
    for i, (_org, domain, count) in enumerate(orgs):
        ip = answers[domain]
        udp_count = UDP_PLAN.get(i, 0)
        total_udp += udp_count
        for k in range(count):
            if k < udp_count:
                if i == 0:  # QUIC-shaped
                    tb.udp_datagram(t, (ip, 443), quic_initial(), "snapchat")
                else:
                    tb.udp_datagram(t, (ip, 3478), b"binding-request", "snapchat")
            else:
                tb.tcp_flow(t, (ip, 443), "snapchat", b"hello")
            t += 40_000
    assert total_udp == 31
    tb.events.sort(key=lambda e: e.ts_us)
    write_trace(out_dir / "trace.jsonl", tb.events)

    answer_yaml = ", ".join(f"{name}: [{ip}]" for name, ip in sorted(answers.items()))
    (out_dir / "scripts.yaml").write_text(
        f"- {{cidr: 8.8.8.8/32, ports: [53], behavior: dns, answers: {{{answer_yaml}}}}}\n"
        "- {cidr: 10.100.0.0/16, behavior: echo}\n")

    with open(out_dir / "orgs.csv", "w") as fh:
        for org, domain, _count in orgs:
            fh.write(f".{domain},{org}\n")
        fh.write("8.8.8.8/32,resolver\n")

    (out_dir / "config.yaml").write_text(
        "engine: {local_isn: 5000}\n"
        "seed: 0\n"
        "io: {trace: trace.jsonl, scripts: scripts.yaml}\n"
        "plugins:\n"
        "  - {id: snitch, kind: snitch, org_map: orgs.csv,"
        " first_party_orgs: [resolver]}\n")


def verify_snitch(out_dir: Path) -> None:
    from mbz.config import load_config
    from mbz.runner import ReplayRun

    run = ReplayRun(load_config(out_dir / "config.yaml"))
    report = run.execute()
    third = report["snitch"]["snitch"]["third_party"]
    expected = {
        "total_flows": 372, "tcp_flows": 341, "udp_flows": 31, "quic_flows": 10,
        "tcp_share_pct": 91.7, "udp_share_pct": 8.3,
        "organization_count": 151, "orgs_over_10_requests": 5,
    }
    for key, value in expected.items():
        assert third[key] == value, (key, third[key], value)
    print("snitch dataset verified:", {k: third[k] for k in expected})


def main() -> int:
    gen_golden(REPO / "data" / "golden")
    gen_snitch(REPO / "data" / "snitch")
    verify_snitch(REPO / "data" / "snitch")
    print("traces written under", REPO / "data")
    return 0


if __name__ == "__main__":
    sys.exit(main())
