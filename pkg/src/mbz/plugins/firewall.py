"""User-defined firewall: ordered first-match rules over five-tuples,
apps, and attributed domains.

Actions: Allow, Deny (silent / reset / inject a notice), Switch to
another destination, and length-preserving payload Rewrite. Rules
match on app glob, destination (domain suffix, CIDR, or any), ports,
and protocol. Domain matching uses the same on-path attribution the
snitch uses (DNS answers and SNI), so a rule by domain also catches
flows opened after the name was resolved.
"""

from __future__ import annotations

import fnmatch
import ipaddress
from dataclasses import dataclass

from ..host import (
    Block, BlockMode, Modify, PluginContext, PluginEvent, Redirect,
    TrafficPlugin, Verdict,
)
from ..packet import PROTO_TCP, PROTO_UDP
from .domains import DomainTracker, TLS_PORT

_PROTO_BY_NAME = {"tcp": PROTO_TCP, "udp": PROTO_UDP, "any": None}


class FirewallRuleError(Exception):
    pass


@dataclass
class FirewallRule:
    app: str = "*"
    dst_suffix: str | None = None
    dst_network: ipaddress.IPv4Network | None = None
    ports: frozenset[int] | None = None
    protocol: int | None = None
    action: str = "allow"  # allow | deny | switch | rewrite
    deny_mode: str = "silent"  # silent | reset | inject
    notice: bytes = b""
    switch_to: tuple[str, int] | None = None
    pattern: bytes = b""
    replacement: bytes = b""

    @classmethod
    def from_dict(cls, obj: dict) -> "FirewallRule":
        known = {"match", "action"}
        unknown = set(obj) - known
        if unknown:
            raise FirewallRuleError(f"unknown rule keys {sorted(unknown)}")
        match = obj.get("match") or {}
        mknown = {"app", "dst", "ports", "protocol"}
        munknown = set(match) - mknown
        if munknown:
            raise FirewallRuleError(f"unknown match keys {sorted(munknown)}")

        dst = match.get("dst", "any")
        dst_suffix = dst_network = None
        if dst not in ("any", None):
            if "/" in dst:
                try:
                    dst_network = ipaddress.IPv4Network(dst)
                except ValueError as exc:
                    raise FirewallRuleError(f"bad dst CIDR {dst!r}") from exc
            else:
                dst_suffix = (dst if dst.startswith(".") else "." + dst).lower()

        ports_val = match.get("ports", "any")
        ports = None if ports_val in ("any", None) \
            else frozenset(int(p) for p in ports_val)

        proto_name = str(match.get("protocol", "any")).lower()
        if proto_name not in _PROTO_BY_NAME:
            raise FirewallRuleError(f"bad protocol {proto_name!r}")

        rule = cls(app=match.get("app", "*"), dst_suffix=dst_suffix,
                   dst_network=dst_network, ports=ports,
                   protocol=_PROTO_BY_NAME[proto_name])
        rule._parse_action(obj.get("action", "allow"))
        return rule

    def _parse_action(self, action) -> None:
        if action == "allow":
            self.action = "allow"
            return
        if not isinstance(action, dict) or len(action) > 2:
            raise FirewallRuleError(f"bad action {action!r}")
        if "deny" in action:
            mode = action["deny"]
            if mode not in ("silent", "reset", "inject"):
                raise FirewallRuleError(f"bad deny mode {mode!r}")
            self.action = "deny"
            self.deny_mode = mode
            notice = action.get("notice", "blocked by firewall policy\n")
            self.notice = notice.encode("utf-8") if isinstance(notice, str) else notice
        elif "switch" in action:
            target = action["switch"]
            try:
                host_part, port_part = target.rsplit(":", 1)
                self.switch_to = (host_part, int(port_part))
            except (ValueError, AttributeError) as exc:
                raise FirewallRuleError(f"bad switch target {target!r}") from exc
            self.action = "switch"
        elif "rewrite" in action:
            spec = action["rewrite"]
            if "pattern_hex" in spec:
                self.pattern = bytes.fromhex(spec["pattern_hex"])
                self.replacement = bytes.fromhex(spec["replacement_hex"])
            else:
                self.pattern = spec["pattern"].encode("utf-8")
                self.replacement = spec["replacement"].encode("utf-8")
            if not self.pattern:
                raise FirewallRuleError("empty rewrite pattern")
            if len(self.pattern) != len(self.replacement):
                raise FirewallRuleError(
                    "rewrite must be length-preserving: "
                    f"{len(self.pattern)} != {len(self.replacement)}")
            self.action = "rewrite"
        else:
            raise FirewallRuleError(f"bad action {action!r}")

    def matches(self, ctx: PluginContext, domain: str) -> bool:
        key = ctx.key
        if key is None:
            return False
        if self.protocol is not None and key.protocol != self.protocol:
            return False
        if self.ports is not None and key.dst[1] not in self.ports:
            return False
        if not fnmatch.fnmatchcase(ctx.app_label, self.app):
            return False
        if self.dst_suffix is not None:
            domain = domain.lower().rstrip(".")
            if not domain:
                return False
            if domain != self.dst_suffix[1:] and not domain.endswith(self.dst_suffix):
                return False
        if self.dst_network is not None:
            try:
                if ipaddress.IPv4Address(key.dst[0]) not in self.dst_network:
                    return False
            except ValueError:
                return False
        return True


def rules_from_list(objs: list[dict]) -> list[FirewallRule]:
    return [FirewallRule.from_dict(o) for o in objs]


class FirewallPlugin(TrafficPlugin):
    def __init__(self, rules: list[FirewallRule], default_allow: bool = True):
        self.rules = rules
        self.default_allow = default_allow
        self.tracker = DomainTracker()

    def on_flow_open(self, event, ctx):
        self.tracker.observe_out(event, ctx)
        return self._evaluate(event, ctx, outbound=True)

    def on_packet_out(self, event, ctx):
        self.tracker.observe_out(event, ctx)
        return self._evaluate(event, ctx, outbound=True)

    def on_packet_in(self, event, ctx):
        self.tracker.observe_in(event, ctx)
        return self._evaluate(event, ctx, outbound=False)

    def _evaluate(self, event: PluginEvent, ctx: PluginContext,
                  outbound: bool) -> Verdict | None:
        domain = self.tracker.domain_for(ctx.key) if ctx.key else ""
        for rule in self.rules:
            if not rule.matches(ctx, domain):
                continue
            return self._apply(rule, event, ctx, outbound)
        if self.default_allow:
            return None
        return Block(BlockMode.DROP_SILENT)

    def _apply(self, rule: FirewallRule, event: PluginEvent, ctx: PluginContext,
               outbound: bool) -> Verdict | None:
        if rule.action == "allow":
            return None
        if rule.action == "deny":
            if rule.deny_mode == "silent":
                return Block(BlockMode.DROP_SILENT)
            if rule.deny_mode == "reset":
                return Block(BlockMode.RESET_APP)
            # a notice cannot be injected into an encrypted flow
            if ctx.key is not None and (ctx.key.dst[1] == TLS_PORT or not outbound):
                return Block(BlockMode.RESET_APP)
            return Block(BlockMode.INJECT_RESPONSE, rule.notice)
        if rule.action == "switch":
            return Redirect(rule.switch_to)
        # rewrite: outbound payloads only
        if outbound and rule.pattern in event.payload:
            return Modify(event.payload.replace(rule.pattern, rule.replacement))
        return None
