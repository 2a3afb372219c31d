"""Per-device MAC behaviour: TDMA state machine and contention baselines."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

from .superframe import DeviceSchedule, is_active_frame
from .timesync import ClockModel, local_time


class MacPolicy(str, Enum):
    PURE_ALOHA = "aloha"
    SLOTTED_ALOHA = "slotted_aloha"
    CSMA = "csma"
    TDMA = "tdma"


class State(str, Enum):
    INIT = "INIT"
    REQ = "REQ"
    SYNC = "SYNC"
    WAIT = "WAIT"
    SEND = "SEND"
    SLEEP = "SLEEP"


class Action(str, Enum):
    TRANSMIT_ACCESS = "transmit_access"  # join or allocation request on the reserved cell
    RETUNE_SYNC = "retune_sync"
    RETUNE_UPLINK = "retune_uplink"
    SCHEDULE_WAKEUP = "schedule_wakeup"
    SCHEDULE_SYNC = "schedule_sync"
    SCHEDULE_SYNC_RETRY = "schedule_sync_retry"
    TRANSMIT = "transmit"
    DROP_STALE = "drop_stale"
    SUSPEND = "suspend"


EVENTS = frozenset({
    "power_on", "join_granted", "alloc_granted", "sync_done", "sync_timeout",
    "slot_boundary", "tx_done", "data_ready", "sync_age_expired", "access_timeout",
})


class ProtocolViolation(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceFsmState:
    state: State = State.INIT
    joined: bool = False
    allocated: bool = False
    synced: bool = False
    pending: bool = False
    sync_due: bool = False
    resume: Optional[State] = None
    sync_failures: int = 0
    suspended: bool = False
    wakeup_local_ms: Optional[float] = None


@dataclass(frozen=True)
class TdmaPlan:
    """Slot geometry of a granted device: where and how long it may transmit."""

    schedule: DeviceSchedule
    slot_ms: float = 200.0
    slots_per_frame: int = 20
    guard_ms: float = 55.0
    toa_ms: float = 144.384
    n_slots: int = 1
    frame_len_ms: Optional[float] = None  # defaults to slot_ms * slots_per_frame

    def __post_init__(self) -> None:
        if self.frame_len_ms is not None and self.frame_len_ms < self.slot_ms * self.slots_per_frame - 1e-9:
            raise ConfigurationError("frame shorter than its slots")
        if self.toa_ms > self.n_slots * self.slot_ms - self.guard_ms + 1e-9:
            raise ConfigurationError(
                f"airtime {self.toa_ms:.3f} ms does not fit {self.n_slots} slot(s) of "
                f"{self.slot_ms:g} ms with {self.guard_ms:g} ms guard"
            )

    @property
    def frame_ms(self) -> float:
        if self.frame_len_ms is not None:
            return self.frame_len_ms
        return self.slot_ms * self.slots_per_frame

    @property
    def emit_offset_ms(self) -> float:
        # centre the protected interval: half the guard on either side
        return self.guard_ms / 2.0


def tdma_tx_window(
    plan: TdmaPlan, clock: ClockModel, frame_origin_true_ms: float
) -> Optional[tuple[float, float]]:
    """Local-time window ``[start, deadline)`` of the device's slot in a frame.

    Returns None when the frame is not one of the device's active frames.
    The frame origin is a network-time instant; an ideal clock reads it unchanged.
    """
    frame = round(frame_origin_true_ms / plan.frame_ms)
    if not is_active_frame(plan.schedule, frame):
        return None
    start = frame_origin_true_ms + plan.schedule.slot * plan.slot_ms
    return start, start + plan.n_slots * plan.slot_ms


def next_slot_emission_local(plan: TdmaPlan, local_now_ms: float, allow_late: bool = False) -> float:
    """Earliest local emission instant in an active frame that is not in the past.

    With ``allow_late`` a device that missed its nominal emission instant may
    still start now, provided the frame ends inside the slot it is currently
    in. This is only meant for a device that has just synchronised: its own
    error is then the fresh sync residual, so the trailing guard still covers
    its neighbour's worst-case early start.
    """
    frame_ms = plan.frame_ms
    slot_start = plan.schedule.slot * plan.slot_ms
    offset = slot_start + plan.emit_offset_ms
    p, g = plan.schedule.period_frames, plan.schedule.g
    if allow_late:
        cur = max(0, math.floor(local_now_ms / frame_ms))
        base = cur * frame_ms
        latest = base + slot_start + plan.n_slots * plan.slot_ms - plan.toa_ms
        if cur % p == g and base + offset <= local_now_ms <= latest:
            return local_now_ms
    f = max(0, math.ceil((local_now_ms - offset) / frame_ms - 1e-12))
    f += (g - f) % p
    return f * frame_ms + offset


def fsm_step(
    fsm: DeviceFsmState,
    event: str,
    clock: Optional[ClockModel] = None,
    plan: Optional[TdmaPlan] = None,
    now_ms: float = 0.0,
    max_sync_failures: int = 3,
) -> tuple[DeviceFsmState, list[Action]]:
    """Advance the TDMA device state machine by one event."""
    if event not in EVENTS:
        raise ProtocolViolation(f"unknown event {event!r}")
    s = fsm.state

    def wakeup(f: DeviceFsmState, late: bool = False) -> tuple[DeviceFsmState, list[Action]]:
        local = local_time(clock, now_ms) if clock is not None else now_ms
        t = next_slot_emission_local(plan, local, late) if plan is not None else None
        return replace(f, state=State.WAIT, pending=False, wakeup_local_ms=t), [Action.SCHEDULE_WAKEUP]

    if event == "data_ready":
        if not fsm.synced or fsm.suspended:
            return fsm, [Action.DROP_STALE]
        if s == State.SLEEP:
            return wakeup(fsm)
        if s == State.WAIT or fsm.pending:
            # newest packet supersedes the queued one
            return fsm, [Action.DROP_STALE]
        if s in (State.SEND, State.SYNC):
            return replace(fsm, pending=True), []
        return fsm, [Action.DROP_STALE]

    if s == State.INIT:
        if event == "power_on" and not fsm.joined:
            return fsm, [Action.TRANSMIT_ACCESS]
        if event == "access_timeout":
            return fsm, [Action.TRANSMIT_ACCESS]
        if event == "join_granted":
            return replace(fsm, state=State.REQ, joined=True), [Action.TRANSMIT_ACCESS]
    elif s == State.REQ:
        if event == "access_timeout":
            return fsm, [Action.TRANSMIT_ACCESS]
        if event == "alloc_granted":
            return replace(fsm, state=State.SYNC, allocated=True), [Action.RETUNE_SYNC]
    elif s == State.SYNC:
        if event == "sync_done":
            f = replace(fsm, synced=True, sync_failures=0, suspended=False, sync_due=False)
            acts = [Action.RETUNE_UPLINK, Action.SCHEDULE_SYNC]
            if fsm.resume == State.WAIT or fsm.pending:
                # the beacon may have ended inside the device's own slot; use what is left of it
                f, more = wakeup(replace(f, resume=None), late=True)
                return f, acts + more
            return replace(f, state=State.SLEEP, resume=None), acts
        if event == "sync_timeout":
            failures = fsm.sync_failures + 1
            if not fsm.synced:
                return replace(fsm, sync_failures=failures), [Action.SCHEDULE_SYNC_RETRY]
            # holdover: keep the local clock running until too many misses
            suspended = failures >= max_sync_failures
            back = fsm.resume or State.SLEEP
            acts = [Action.RETUNE_UPLINK, Action.SCHEDULE_SYNC_RETRY]
            if suspended:
                acts.append(Action.SUSPEND)
                return replace(fsm, state=State.SLEEP, resume=None, pending=False,
                               sync_failures=failures, suspended=True), acts
            if back == State.WAIT or fsm.pending:
                f, more = wakeup(replace(fsm, resume=None, sync_failures=failures))
                return f, acts + more
            return replace(fsm, state=back, resume=None, sync_failures=failures), acts
    elif s == State.SLEEP:
        if event == "sync_age_expired":
            return replace(fsm, state=State.SYNC, resume=State.SLEEP), [Action.RETUNE_SYNC]
    elif s == State.WAIT:
        if event == "slot_boundary":
            return replace(fsm, state=State.SEND, wakeup_local_ms=None), [Action.TRANSMIT]
        if event == "sync_age_expired":
            return replace(fsm, state=State.SYNC, resume=State.WAIT, pending=True), [Action.RETUNE_SYNC]
    elif s == State.SEND:
        if event == "tx_done":
            if fsm.sync_due:
                return replace(fsm, state=State.SYNC, sync_due=False,
                               resume=State.WAIT if fsm.pending else State.SLEEP), [Action.RETUNE_SYNC]
            if fsm.pending:
                return wakeup(fsm)
            return replace(fsm, state=State.SLEEP), []
        if event == "sync_age_expired":
            return replace(fsm, sync_due=True), []
    raise ProtocolViolation(f"event {event!r} not allowed in state {s.value}")


def next_tx_time_pure_aloha(t_ready_ms: float) -> float:
    return t_ready_ms


def next_tx_time_slotted_aloha(
    t_ready_ms: float, slot_len_ms: float, clock: Optional[ClockModel] = None
) -> float:
    """Next slot boundary at or after ``t_ready_ms``, in the device's local time."""
    local = local_time(clock, t_ready_ms) if clock is not None else t_ready_ms
    k = math.ceil(local / slot_len_ms - 1e-9)
    return k * slot_len_ms


def pick_channel(rng: random.Random, n_channels: int) -> int:
    return rng.randrange(n_channels)


@dataclass(frozen=True)
class CsmaConfig:
    cca_threshold_dbm: float = -110.0
    cad_ms: dict[int, float] = field(default_factory=lambda: {7: 2.0, 9: 8.0})
    backoff_slot_ms: float = 30.0
    window: int = 8
    max_stages: int = 8

    def __post_init__(self) -> None:
        if self.window < 1 or self.max_stages < 1:
            raise ValueError("contention window and backoff stages must be >= 1")

    def cad_for(self, sf: int) -> float:
        try:
            return self.cad_ms[sf]
        except KeyError:
            raise KeyError(f"no CAD duration configured for SF{sf}") from None

    def max_listen_ms(self, sf: int) -> float:
        return self.max_stages * (self.cad_for(sf) + (self.window - 1) * self.backoff_slot_ms)


@dataclass(frozen=True)
class CsmaResult:
    t_tx_ms: Optional[float]
    gave_up: bool
    energy_listen_ms: float
    stages: int


def csma_step(
    t_ms: float, stage: int, sensed_dbm: float, cfg: CsmaConfig, sf: int, rng: random.Random
) -> tuple[str, float]:
    """One CAD. Returns ("tx", t) , ("retry", t_next_cad) or ("give_up", t)."""
    t_end = t_ms + cfg.cad_for(sf)
    if sensed_dbm < cfg.cca_threshold_dbm:
        return "tx", t_end
    if stage + 1 >= cfg.max_stages:
        return "give_up", t_end
    return "retry", t_end + rng.randint(0, cfg.window - 1) * cfg.backoff_slot_ms


def csma_attempt(
    t_ready_ms: float,
    cfg: CsmaConfig,
    sense: Callable[[float], float],
    sf: int = 9,
    rng: Optional[random.Random] = None,
) -> CsmaResult:
    """Listen-before-talk against a sensing oracle ``sense(t) -> dBm``."""
    rng = rng or random.Random()
    t, listen = t_ready_ms, 0.0
    for stage in range(cfg.max_stages):
        listen += cfg.cad_for(sf)
        verdict, t_next = csma_step(t, stage, sense(t), cfg, sf, rng)
        if verdict == "tx":
            return CsmaResult(t_next, False, listen, stage + 1)
        if verdict == "give_up":
            return CsmaResult(None, True, listen, stage + 1)
        t = t_next
    return CsmaResult(None, True, listen, cfg.max_stages)
