"""Network-side upstream abstraction and the scripted simulator.

The engine talks to the upstream world through stream/datagram handles
whose completion events arrive on the shared scheduler, one at a time.
SimUpstream implements the contract against per-destination scripts
(echo, static response, DNS responder, blackhole, reset-on-connect) so
the whole middlebox runs unprivileged and deterministically.
"""

from __future__ import annotations

import ipaddress
import random
from dataclasses import dataclass, field

from . import dnswire
from .clock import Scheduler

Addr = tuple[str, int]

# stream events delivered to the engine callback
EV_CONNECTED = "connected"
EV_REFUSED = "refused"
EV_READABLE = "readable"
EV_WRITABLE = "writable"
EV_EOF = "eof"
EV_RESET = "reset"

BEHAVIOR_ECHO = "echo"
BEHAVIOR_STATIC = "static"
BEHAVIOR_DNS = "dns"
BEHAVIOR_BLACKHOLE = "blackhole"
BEHAVIOR_RESET = "reset"

_BEHAVIORS = (BEHAVIOR_ECHO, BEHAVIOR_STATIC, BEHAVIOR_DNS,
              BEHAVIOR_BLACKHOLE, BEHAVIOR_RESET)


class OverlappingScripts(Exception):
    pass


class ScriptError(Exception):
    pass


@dataclass
class SimEndpointScript:
    """One scripted endpoint: an address match plus a behavior.

    `ports` of None matches any port. `delay_us` is the one-way
    propagation delay; `jitter_us` adds a seeded random extra.
    `recv_window` caps how many bytes the endpoint will buffer before
    the sender must wait (None = unlimited), used to exercise
    backpressure. `tamper` optionally rewrites DNS answers:
    {"override": {name: [ips]}, "nxdomain_to": [ips], "drop": [names]}.
    """

    network: ipaddress.IPv4Network
    ports: frozenset[int] | None
    behavior: str
    delay_us: int = 0
    jitter_us: int = 0
    response: bytes = b""
    answers: dict[str, list[str]] = field(default_factory=dict)
    tamper: dict = field(default_factory=dict)
    recv_window: int | None = None

    def __post_init__(self):
        if self.behavior not in _BEHAVIORS:
            raise ScriptError(f"unknown behavior {self.behavior!r}")

    def matches(self, addr: Addr) -> bool:
        ip, port = addr
        if self.ports is not None and port not in self.ports:
            return False
        return ipaddress.IPv4Address(ip) in self.network

    def overlaps(self, other: "SimEndpointScript") -> bool:
        if not self.network.overlaps(other.network):
            return False
        if self.ports is None or other.ports is None:
            return True
        return bool(self.ports & other.ports)

    @classmethod
    def from_dict(cls, obj: dict) -> "SimEndpointScript":
        known = {"cidr", "ports", "behavior", "delay_us", "jitter_us",
                 "response", "response_hex", "answers", "tamper", "recv_window"}
        unknown = set(obj) - known
        if unknown:
            raise ScriptError(f"unknown script keys {sorted(unknown)}")
        try:
            network = ipaddress.IPv4Network(obj["cidr"])
        except (KeyError, ValueError) as exc:
            raise ScriptError(f"bad script cidr: {exc}") from exc
        ports_val = obj.get("ports", "any")
        ports = None if ports_val in ("any", None) else frozenset(int(p) for p in ports_val)
        response = obj.get("response", "")
        if isinstance(response, str):
            response = response.encode("utf-8")
        if "response_hex" in obj:
            response = bytes.fromhex(obj["response_hex"])
        return cls(
            network=network,
            ports=ports,
            behavior=obj.get("behavior", BEHAVIOR_BLACKHOLE),
            delay_us=int(obj.get("delay_us", 0)),
            jitter_us=int(obj.get("jitter_us", 0)),
            response=response,
            answers={str(k): list(v) for k, v in (obj.get("answers") or {}).items()},
            tamper=obj.get("tamper") or {},
            recv_window=obj.get("recv_window"),
        )


@dataclass
class StreamTranscript:
    """Byte-level record of one simulated stream, for test oracles."""
    dst: Addr
    received: bytearray = field(default_factory=bytearray)  # endpoint got these
    sent: bytearray = field(default_factory=bytearray)      # endpoint emitted these
    connected: bool = False
    refused: bool = False
    saw_eof: bool = False
    closed: bool = False


class UpstreamNetwork:
    """Contract: open handles toward remote endpoints; all completion
    and data events are delivered serially via the scheduler."""

    def open_stream(self, dst: Addr) -> "StreamHandle":
        raise NotImplementedError

    def open_datagram(self) -> "DatagramHandle":
        raise NotImplementedError

    def active_handle_count(self) -> int:
        raise NotImplementedError


class StreamHandle:
    def set_callback(self, cb) -> None:
        raise NotImplementedError

    def send(self, data: bytes) -> int:
        raise NotImplementedError

    def recv(self, max_bytes: int) -> bytes:
        raise NotImplementedError

    def readable_bytes(self) -> int:
        raise NotImplementedError

    def at_eof(self) -> bool:
        raise NotImplementedError

    def half_close(self) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class DatagramHandle:
    def set_callback(self, cb) -> None:
        raise NotImplementedError

    def send_to(self, addr: Addr, data: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class _SimStream(StreamHandle):
    def __init__(self, net: "SimUpstream", dst: Addr, script: SimEndpointScript | None):
        self._net = net
        self._dst = dst
        self._script = script
        self._cb = None
        self._to_engine = bytearray()
        self._eof_pending = False
        self._eof_delivered = False
        self._engine_half_closed = False
        self._endpoint_closed_write = False
        self._static_responded = False
        self._capacity = script.recv_window if script else None
        self.closed = False
        self.transcript = StreamTranscript(dst=dst)
        net.transcripts.append(self.transcript)
        net.connections.append(dst)
        self._start()

    # -- engine-facing ----------------------------------------------------

    def set_callback(self, cb) -> None:
        self._cb = cb

    def send(self, data: bytes) -> int:
        if self.closed or self._engine_half_closed:
            return 0
        behavior = self._script.behavior if self._script else BEHAVIOR_BLACKHOLE
        if behavior == BEHAVIOR_BLACKHOLE:
            return len(data)  # swallowed
        n = len(data)
        if self._capacity is not None:
            n = min(n, self._capacity)
            self._capacity -= n
        if n > 0:
            chunk = bytes(data[:n])
            self._net._later(self._script, lambda: self._endpoint_on_data(chunk))
        return n

    def recv(self, max_bytes: int) -> bytes:
        out = bytes(self._to_engine[:max_bytes])
        del self._to_engine[:len(out)]
        return out

    def readable_bytes(self) -> int:
        return len(self._to_engine)

    def at_eof(self) -> bool:
        return self._eof_pending and not self._to_engine

    def half_close(self) -> None:
        if self.closed or self._engine_half_closed:
            return
        self._engine_half_closed = True
        if self._script is not None and self._script.behavior != BEHAVIOR_BLACKHOLE:
            self._net._later(self._script, self._endpoint_on_eof)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.transcript.closed = True
            self._net._release()

    # -- simulated endpoint side ------------------------------------------

    def _start(self) -> None:
        script = self._script
        if script is None or script.behavior == BEHAVIOR_BLACKHOLE:
            return  # connect never completes
        if script.behavior == BEHAVIOR_RESET:
            self._net._later(script, lambda: self._emit(EV_REFUSED, refused=True))
        elif script.behavior == BEHAVIOR_DNS:
            # DNS endpoints speak UDP only
            self._net._later(script, lambda: self._emit(EV_REFUSED, refused=True))
        else:
            self._net._later(script, lambda: self._emit(EV_CONNECTED, connected=True))

    def _emit(self, event: str, connected: bool = False, refused: bool = False) -> None:
        if self.closed:
            return
        if connected:
            self.transcript.connected = True
        if refused:
            self.transcript.refused = True
        if self._cb is not None:
            self._cb(event)

    def _endpoint_on_data(self, data: bytes) -> None:
        self.transcript.received.extend(data)
        freed = False
        if self._capacity is not None:
            self._capacity += len(data)  # endpoint consumed it
            freed = True
        if self._script.behavior == BEHAVIOR_ECHO:
            self._endpoint_send(bytes(data))
        elif self._script.behavior == BEHAVIOR_STATIC and not self._static_responded:
            self._static_responded = True
            self._endpoint_send(bytes(self._script.response))
            self._endpoint_close_write()
        if freed and not self.closed:
            self._emit(EV_WRITABLE)

    def _endpoint_on_eof(self) -> None:
        self.transcript.saw_eof = True
        if self._script.behavior == BEHAVIOR_ECHO:
            self._endpoint_close_write()
        elif self._script.behavior == BEHAVIOR_STATIC and not self._static_responded:
            self._static_responded = True
            self._endpoint_send(bytes(self._script.response))
            self._endpoint_close_write()

    def _endpoint_send(self, data: bytes) -> None:
        self.transcript.sent.extend(data)
        if data:
            self._net._later(self._script, lambda: self._deliver(data))

    def _endpoint_close_write(self) -> None:
        if not self._endpoint_closed_write:
            self._endpoint_closed_write = True
            self._net._later(self._script, self._deliver_eof)

    def _deliver(self, data: bytes) -> None:
        if self.closed:
            return
        self._to_engine.extend(data)
        self._emit(EV_READABLE)

    def _deliver_eof(self) -> None:
        if self.closed or self._eof_delivered:
            return
        self._eof_pending = True
        self._eof_delivered = True
        self._emit(EV_EOF)


class _SimDatagram(DatagramHandle):
    def __init__(self, net: "SimUpstream"):
        self._net = net
        self._cb = None
        self.closed = False

    def set_callback(self, cb) -> None:
        self._cb = cb

    def send_to(self, addr: Addr, data: bytes) -> None:
        if self.closed:
            return
        self._net.datagram_log.append((addr, bytes(data)))
        script = self._net.find_script(addr)
        if script is None:
            return  # blackhole
        if script.behavior == BEHAVIOR_ECHO:
            self._reply_later(script, addr, bytes(data))
        elif script.behavior == BEHAVIOR_STATIC:
            self._reply_later(script, addr, bytes(script.response))
        elif script.behavior == BEHAVIOR_DNS:
            reply = self._dns_reply(script, data)
            if reply is not None:
                self._reply_later(script, addr, reply)
        # blackhole / reset: swallowed

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._net._release()

    def _reply_later(self, script: SimEndpointScript, from_addr: Addr, data: bytes) -> None:
        def deliver():
            if not self.closed and self._cb is not None:
                self._cb(from_addr, data)
        self._net._later(script, deliver)

    @staticmethod
    def _dns_reply(script: SimEndpointScript, query: bytes) -> bytes | None:
        msg = dnswire.parse_message(query)
        if msg is None or msg.is_response:
            return None
        tamper = script.tamper
        if msg.qname in tamper.get("drop", ()):
            return None
        override = tamper.get("override", {})
        if msg.qname in override:
            ips = list(override[msg.qname])
        elif msg.qname in script.answers:
            ips = list(script.answers[msg.qname])
        elif tamper.get("nxdomain_to"):
            ips = list(tamper["nxdomain_to"])
        else:
            return dnswire.build_response(msg.qid, msg.qname, msg.qtype, [],
                                          rcode=dnswire.RCODE_NXDOMAIN)
        return dnswire.build_response(msg.qid, msg.qname, msg.qtype, ips)


class SimUpstream(UpstreamNetwork):
    """Deterministic scripted upstream; unmatched destinations blackhole."""

    def __init__(self, scripts: list[SimEndpointScript], scheduler: Scheduler,
                 rng_seed: int = 0):
        for i, a in enumerate(scripts):
            for b in scripts[i + 1:]:
                if a.overlaps(b):
                    raise OverlappingScripts(f"{a.network} and {b.network} overlap")
        self.scripts = scripts
        self._scheduler = scheduler
        self._rng = random.Random(rng_seed)
        self._active = 0
        self.transcripts: list[StreamTranscript] = []
        self.connections: list[Addr] = []
        self.datagram_log: list[tuple[Addr, bytes]] = []

    def find_script(self, addr: Addr) -> SimEndpointScript | None:
        for script in self.scripts:
            if script.matches(addr):
                return script
        return None

    def open_stream(self, dst: Addr) -> StreamHandle:
        self._active += 1
        return _SimStream(self, dst, self.find_script(dst))

    def open_datagram(self) -> DatagramHandle:
        self._active += 1
        return _SimDatagram(self)

    def active_handle_count(self) -> int:
        return self._active

    def _release(self) -> None:
        self._active -= 1

    def _later(self, script: SimEndpointScript, fn) -> None:
        delay = script.delay_us
        if script.jitter_us:
            delay += self._rng.randint(0, script.jitter_us)
        self._scheduler.call_later(delay, fn)
