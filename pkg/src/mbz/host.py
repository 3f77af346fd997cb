"""Plugin host: registration, permissioned verdict chain, resource governor.

Plugins are in-process callback objects invoked synchronously on the
engine's event context, in registration order. The host enforces the
declared permission set (a verdict beyond a plugin's grant is downgraded
to Pass and logged), meters CPU per callback plus self-reported memory
and emitted bytes, and disables plugins that overrun their budgets.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

from .clock import Scheduler
from .packet import FlowKey, Packet
from .upstream import UpstreamNetwork


class Permission(enum.Flag):
    OBSERVE = enum.auto()
    MODIFY_PAYLOAD = enum.auto()
    BLOCK_FLOW = enum.auto()
    REDIRECT_FLOW = enum.auto()
    INJECT_PACKETS = enum.auto()
    EXPORT_OFF_DEVICE = enum.auto()


PERMISSION_NAMES = {
    "observe": Permission.OBSERVE,
    "modify_payload": Permission.MODIFY_PAYLOAD,
    "block_flow": Permission.BLOCK_FLOW,
    "redirect_flow": Permission.REDIRECT_FLOW,
    "inject_packets": Permission.INJECT_PACKETS,
    "export_off_device": Permission.EXPORT_OFF_DEVICE,
}


def permissions_from_names(names: list[str]) -> Permission:
    perms = Permission(0)
    for name in names:
        try:
            perms |= PERMISSION_NAMES[name]
        except KeyError:
            raise MalformedPermissions(f"unknown permission {name!r}") from None
    return perms


@dataclass
class ResourceBudget:
    max_cpu_us_per_packet: int = 500
    max_mem_bytes: int = 16 * 1024 * 1024
    max_emitted_bytes_per_min: int = 65536
    violation_grace: int = 3

    def validate(self) -> None:
        for name in ("max_cpu_us_per_packet", "max_mem_bytes",
                     "max_emitted_bytes_per_min", "violation_grace"):
            if getattr(self, name) <= 0:
                raise ValueError(f"budget {name} must be positive")


@dataclass
class PluginDescriptor:
    id: str
    name: str
    requested: Permission
    budget: ResourceBudget = field(default_factory=ResourceBudget)
    wifi_only_export: bool = False


class HostError(Exception):
    pass


class DuplicateId(HostError):
    pass


class MalformedPermissions(HostError):
    pass


# --- verdicts ---------------------------------------------------------------

class BlockMode(enum.Enum):
    DROP_SILENT = "drop_silent"
    RESET_APP = "reset_app"
    INJECT_RESPONSE = "inject_response"


@dataclass(frozen=True)
class Pass:
    pass


@dataclass(frozen=True)
class Modify:
    payload: bytes


@dataclass(frozen=True)
class Block:
    mode: BlockMode
    response: bytes = b""


@dataclass(frozen=True)
class Redirect:
    dst: tuple[str, int]


Verdict = Pass | Modify | Block | Redirect
PASS = Pass()


class Connectivity(enum.Enum):
    WIFI = "wifi"
    CELLULAR = "cellular"
    NONE = "none"


@dataclass(frozen=True)
class DeviceContext:
    connectivity: Connectivity = Connectivity.WIFI
    battery_percent: int = 100

    def __post_init__(self):
        if not 0 <= self.battery_percent <= 100:
            raise ValueError(f"battery {self.battery_percent} out of range")


class EventKind(enum.Enum):
    FLOW_OPEN = "flow_open"
    PACKET_OUT = "packet_out"
    PACKET_IN = "packet_in"
    FLOW_CLOSE = "flow_close"


DIR_OUT = "out"
DIR_IN = "in"


@dataclass(frozen=True)
class PluginContext:
    """Immutable per-invocation snapshot."""
    key: FlowKey | None
    app_label: str
    direction: str
    kind: EventKind
    device: DeviceContext
    now_us: int
    throttle: bool = False


@dataclass
class PluginEvent:
    """The traffic event under consideration. `payload` reflects prior
    plugins' Modify verdicts as the chain advances. `packet` is the
    parsed app packet where one exists (None for upstream byte chunks
    and engine-synthesized control packets)."""
    kind: EventKind
    payload: bytes = b""
    packet: Packet | None = None
    tcp_flags: int | None = None
    tcp_seq: int | None = None


@dataclass
class EffectiveAction:
    """Outcome of a chain pass: the final short-circuiting verdict plus
    the payload after all composed Modify verdicts."""
    verdict: Verdict
    payload: bytes
    modified: bool = False
    decided_by: str | None = None

    @property
    def is_pass(self) -> bool:
        return isinstance(self.verdict, Pass)

    @property
    def block(self) -> Block | None:
        return self.verdict if isinstance(self.verdict, Block) else None

    @property
    def redirect(self) -> Redirect | None:
        return self.verdict if isinstance(self.verdict, Redirect) else None


class TrafficPlugin:
    """Base class for plugins; override the callbacks you need.

    Callbacks return a Verdict or None (None means Pass). They must be
    bounded-time and must not block on I/O; asynchronous work goes
    through the host services and re-enters as events.
    """

    def on_flow_open(self, event: PluginEvent, ctx: PluginContext) -> Verdict | None:
        return None

    def on_packet_out(self, event: PluginEvent, ctx: PluginContext) -> Verdict | None:
        return None

    def on_packet_in(self, event: PluginEvent, ctx: PluginContext) -> Verdict | None:
        return None

    def on_flow_close(self, event: PluginEvent, ctx: PluginContext) -> Verdict | None:
        return None

    def memory_estimate(self) -> int | None:
        return None

    def finalize(self, ctx: PluginContext) -> None:
        pass


_CALLBACKS = {
    EventKind.FLOW_OPEN: "on_flow_open",
    EventKind.PACKET_OUT: "on_packet_out",
    EventKind.PACKET_IN: "on_packet_in",
    EventKind.FLOW_CLOSE: "on_flow_close",
}

_VERDICT_PERMISSION = {
    Modify: Permission.MODIFY_PAYLOAD,
    Block: Permission.BLOCK_FLOW,
    Redirect: Permission.REDIRECT_FLOW,
}


@dataclass
class _PluginSlot:
    descriptor: PluginDescriptor
    plugin: TrafficPlugin
    enabled: bool = True
    disabled_reason: str | None = None
    invocations: int = 0
    cpu_overruns: int = 0
    mem_overruns: int = 0
    emit_overruns: int = 0
    emitted_window: list[tuple[int, int]] = field(default_factory=list)  # (ts_us, n)


class PluginHost:
    def __init__(
        self,
        scheduler: Scheduler,
        upstream: UpstreamNetwork | None = None,
        cpu_clock=None,
        low_battery_threshold: int | None = None,
        probe_timeout_us: int = 2_000_000,
    ):
        self._scheduler = scheduler
        self._upstream = upstream
        self._cpu_clock = cpu_clock or time.perf_counter_ns
        self._low_battery_threshold = low_battery_threshold
        self._probe_timeout_us = probe_timeout_us
        self._slots: list[_PluginSlot] = []
        self._by_id: dict[str, _PluginSlot] = {}
        self.device = DeviceContext()
        self.violations: list[dict] = []
        self.governor_events: list[dict] = []

    # -- registration ------------------------------------------------------

    def register(self, descriptor: PluginDescriptor, plugin: TrafficPlugin) -> str:
        if descriptor.id in self._by_id:
            raise DuplicateId(f"plugin id {descriptor.id!r} already registered")
        req = descriptor.requested
        if req & ~Permission.OBSERVE and not (req & Permission.OBSERVE):
            raise MalformedPermissions(
                f"plugin {descriptor.id!r}: any permission implies observe")
        descriptor.budget.validate()
        slot = _PluginSlot(descriptor=descriptor, plugin=plugin)
        self._slots.append(slot)
        self._by_id[descriptor.id] = slot
        return descriptor.id

    def chain_order(self) -> list[str]:
        return [s.descriptor.id for s in self._slots]

    def invocation_count(self, plugin_id: str) -> int:
        return self._by_id[plugin_id].invocations

    def is_enabled(self, plugin_id: str) -> bool:
        return self._by_id[plugin_id].enabled

    def set_enabled(self, plugin_id: str, enabled: bool) -> None:
        slot = self._by_id[plugin_id]
        slot.enabled = enabled
        if enabled:
            slot.disabled_reason = None
            slot.cpu_overruns = slot.mem_overruns = slot.emit_overruns = 0

    # -- device context ------------------------------------------------------

    def update_context(self, device: DeviceContext) -> None:
        self.device = device

    def _throttled(self) -> bool:
        return (self._low_battery_threshold is not None
                and self.device.battery_percent < self._low_battery_threshold)

    def make_context(self, key: FlowKey | None, app_label: str, direction: str,
                     kind: EventKind) -> PluginContext:
        return PluginContext(
            key=key, app_label=app_label, direction=direction, kind=kind,
            device=self.device, now_us=self._scheduler.now_us(),
            throttle=self._throttled(),
        )

    # -- the chain -----------------------------------------------------------

    def chain_apply(self, event: PluginEvent, ctx: PluginContext) -> EffectiveAction:
        """Invoke plugins in registration order. Modify verdicts compose;
        the first permitted Block or Redirect short-circuits. Verdicts a
        plugin lacks permission for, malformed verdicts, and callbacks
        that raise all downgrade to Pass with a violation record."""
        payload = event.payload
        modified = False
        for slot in self._slots:
            if not slot.enabled:
                continue
            granted = slot.descriptor.requested
            if not granted & Permission.OBSERVE:
                continue
            event.payload = payload
            verdict = self._invoke(slot, event, ctx)
            if verdict is None or isinstance(verdict, Pass):
                continue
            needed = _VERDICT_PERMISSION.get(type(verdict))
            if needed is None or not granted & needed:
                self._violation(slot, "permission-denied", ctx, verdict)
                continue
            if isinstance(verdict, Block) and verdict.mode is BlockMode.INJECT_RESPONSE \
                    and ctx.direction != DIR_OUT:
                self._violation(slot, "inject-on-inbound", ctx, verdict)
                continue
            if isinstance(verdict, Modify):
                payload = verdict.payload
                modified = True
                continue
            return EffectiveAction(verdict=verdict, payload=payload,
                                   modified=modified, decided_by=slot.descriptor.id)
        return EffectiveAction(verdict=PASS, payload=payload, modified=modified)

    def dispatch(self, kind: EventKind, key: FlowKey | None, app_label: str,
                 direction: str, event: PluginEvent) -> EffectiveAction:
        return self.chain_apply(event, self.make_context(key, app_label, direction, kind))

    def _invoke(self, slot: _PluginSlot, event: PluginEvent,
                ctx: PluginContext) -> Verdict | None:
        slot.invocations += 1
        cb = getattr(slot.plugin, _CALLBACKS[event.kind])
        start = self._cpu_clock()
        try:
            verdict = cb(event, ctx)
        except Exception as exc:  # plugin failure must not hurt the packet path
            self._violation(slot, "callback-error", ctx, detail=repr(exc))
            verdict = None
        elapsed_us = (self._cpu_clock() - start) // 1000
        self.account(slot.descriptor.id, cpu_us=elapsed_us)
        return verdict

    def _violation(self, slot: _PluginSlot, kind: str, ctx: PluginContext,
                   verdict: Verdict | None = None, detail: str = "") -> None:
        self.violations.append({
            "ts_us": ctx.now_us,
            "plugin": slot.descriptor.id,
            "kind": kind,
            "detail": detail or (type(verdict).__name__ if verdict else ""),
        })

    # -- resource governor -----------------------------------------------------

    def account(self, plugin_id: str, cpu_us: int | None = None,
                emitted_bytes: int | None = None) -> None:
        """Record a usage sample; disables the plugin once a budget
        dimension is overrun for more than violation_grace consecutive
        samples (emitted bytes on cellular for wifi-only plugins disable
        immediately)."""
        slot = self._by_id[plugin_id]
        if not slot.enabled:
            return
        budget = slot.descriptor.budget
        if cpu_us is not None:
            if cpu_us > budget.max_cpu_us_per_packet:
                slot.cpu_overruns += 1
                if slot.cpu_overruns > budget.violation_grace:
                    self._disable(slot, "CpuOverrun",
                                  f"{cpu_us}us > {budget.max_cpu_us_per_packet}us "
                                  f"for {slot.cpu_overruns} consecutive packets")
            else:
                slot.cpu_overruns = 0
        if emitted_bytes is not None:
            now = self._scheduler.now_us()
            slot.emitted_window.append((now, emitted_bytes))
            rate = self._emitted_in_window(slot, now)
            if rate > budget.max_emitted_bytes_per_min:
                on_cellular = self.device.connectivity is Connectivity.CELLULAR
                if slot.descriptor.wifi_only_export and on_cellular:
                    self._disable(slot, "EmittedOverrunOnCellular",
                                  f"{rate}B/min > {budget.max_emitted_bytes_per_min}B/min")
                else:
                    slot.emit_overruns += 1
                    if slot.emit_overruns > budget.violation_grace:
                        self._disable(slot, "EmittedOverrun",
                                      f"{rate}B/min > {budget.max_emitted_bytes_per_min}B/min")
            else:
                slot.emit_overruns = 0

    def _emitted_in_window(self, slot: _PluginSlot, now_us: int) -> int:
        cutoff = now_us - 60_000_000
        slot.emitted_window = [(t, n) for t, n in slot.emitted_window if t >= cutoff]
        return sum(n for _, n in slot.emitted_window)

    def governor_tick(self, now_us: int | None = None) -> list[str]:
        """Periodic sampling of self-reported memory; returns ids of
        plugins disabled during this tick."""
        now = self._scheduler.now_us() if now_us is None else now_us
        disabled: list[str] = []
        for slot in self._slots:
            if not slot.enabled:
                continue
            budget = slot.descriptor.budget
            try:
                mem = slot.plugin.memory_estimate()
            except Exception:
                mem = None
            if mem is not None:
                if mem > budget.max_mem_bytes:
                    slot.mem_overruns += 1
                    if slot.mem_overruns > budget.violation_grace:
                        self._disable(slot, "MemOverrun",
                                      f"{mem}B > {budget.max_mem_bytes}B")
                        disabled.append(slot.descriptor.id)
                else:
                    slot.mem_overruns = 0
        return disabled

    def _disable(self, slot: _PluginSlot, reason: str, detail: str) -> None:
        if not slot.enabled:
            return
        slot.enabled = False
        slot.disabled_reason = reason
        now = self._scheduler.now_us()
        self.governor_events.append({
            "ts_us": now,
            "plugin": slot.descriptor.id,
            "kind": "disabled",
            "detail": f"{reason}: {detail}",
        })
        ctx = self.make_context(None, "", DIR_OUT, EventKind.FLOW_CLOSE)
        try:
            slot.plugin.finalize(ctx)
        except Exception:
            pass

    # -- host-mediated services -------------------------------------------------

    def probe_datagram(self, plugin_id: str, dst: tuple[str, int], payload: bytes,
                       on_reply, timeout_us: int | None = None) -> bool:
        """Send a plugin-originated datagram probe and deliver the reply
        (or None on timeout) back as an event. Requires InjectPackets."""
        slot = self._by_id[plugin_id]
        if not slot.enabled:
            return False
        if not slot.descriptor.requested & Permission.INJECT_PACKETS:
            self._violation(slot, "permission-denied",
                            self.make_context(None, "", DIR_OUT, EventKind.PACKET_OUT),
                            detail="probe_datagram")
            return False
        if self._upstream is None:
            return False
        self.account(plugin_id, emitted_bytes=len(payload))
        if not slot.enabled:
            return False
        handle = self._upstream.open_datagram()
        done = {"fired": False}

        def finish(reply: bytes | None):
            if done["fired"]:
                return
            done["fired"] = True
            handle.close()
            on_reply(reply)

        handle.set_callback(lambda _addr, data: finish(data))
        handle.send_to(dst, payload)
        self._scheduler.call_later(
            timeout_us if timeout_us is not None else self._probe_timeout_us,
            lambda: finish(None))
        return True

    def export_off_device(self, plugin_id: str, n_bytes: int) -> bool:
        """Gate a plugin's off-device export against its permission and
        the connectivity policy. Returns True when allowed."""
        slot = self._by_id[plugin_id]
        if not slot.enabled:
            return False
        ctx = self.make_context(None, "", DIR_OUT, EventKind.PACKET_OUT)
        if not slot.descriptor.requested & Permission.EXPORT_OFF_DEVICE:
            self._violation(slot, "permission-denied", ctx, detail="export_off_device")
            return False
        if (slot.descriptor.wifi_only_export
                and self.device.connectivity is Connectivity.CELLULAR):
            self._violation(slot, "export-suspended-on-cellular", ctx,
                            detail=f"{n_bytes}B")
            return False
        self.account(plugin_id, emitted_bytes=n_bytes)
        return slot.enabled

    # -- reporting ----------------------------------------------------------------

    def plugin_states(self) -> list[dict]:
        return [
            {
                "id": s.descriptor.id,
                "enabled": s.enabled,
                "disabled_reason": s.disabled_reason,
                "invocations": s.invocations,
            }
            for s in self._slots
        ]
