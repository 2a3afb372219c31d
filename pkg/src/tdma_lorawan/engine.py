"""Discrete-event simulator for the four MAC policies over a single gateway."""

from __future__ import annotations

import csv
import heapq
import math
import os
import random
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

from .config import ScenarioConfig
from .mac import (
    Action,
    CsmaConfig,
    DeviceFsmState,
    MacPolicy,
    State,
    TdmaPlan,
    csma_step,
    fsm_step,
    next_tx_time_slotted_aloha,
    pick_channel,
)
from .phy import (
    LinkModel,
    Outcome,
    Transmission,
    captures,
    dbm_to_mw,
    mw_to_dbm,
    path_loss_db,
    resolve_reception,
    time_on_air,
)
from .scheduler import AllocationRejected, AllocationRequest, ResourceGrid, Scheduler, _release
from .superframe import DeviceSchedule, validate_period
from .timesync import BeaconSchedule, ClockModel, run_sync_attempt, truncated_gauss

WORKERS_ENV = "TDMA_LORAWAN_WORKERS"
# back-to-back frames whose boundaries differ only by float round-off do not overlap
OVERLAP_EPS_MS = 1e-6

EVENT_KINDS = frozenset({
    "tx_start", "tx_end", "beacon_tx", "sync_wakeup", "data_ready",
    "backoff_expire", "frame_boundary", "sim_end",
})

# internal dispatch codes; each maps onto one of the public kinds above
_TX_END = 0
_DATA = 1
_SLOT = 2          # frame_boundary: TDMA slot alarm or S-ALOHA slot alarm
_CAD_DONE = 3      # backoff_expire: end of a CSMA channel-activity detection
_SYNC_WAKE = 4     # sync_wakeup: periodic re-sync, S-ALOHA re-sync, sync retry
_FSM = 5           # delayed FSM event (grant/timeout replies, sync completion)
_ACCESS = 6        # tx_start of a join/allocation request on the access cell
_SIM_END = 7
_KIND_NAMES = {
    _TX_END: "tx_end", _DATA: "data_ready", _SLOT: "frame_boundary", _CAD_DONE: "backoff_expire",
    _SYNC_WAKE: "sync_wakeup", _FSM: "frame_boundary", _ACCESS: "tx_start", _SIM_END: "sim_end",
}


@dataclass(frozen=True, order=True)
class SimEvent:
    time_ms: float
    sequence_no: int
    kind: str = field(compare=False)
    node_id: int = field(compare=False, default=-1)


# ---------------------------------------------------------------------------
# energy and metrics


@dataclass
class EnergyLedger:
    n_nodes: int
    e_tx: list = field(default_factory=list)
    e_rx: list = field(default_factory=list)
    e_sync: list = field(default_factory=list)
    e_sleep: list = field(default_factory=list)
    n_sync: list = field(default_factory=list)
    awake_ms: list = field(default_factory=list)

    def __post_init__(self) -> None:
        for name in ("e_tx", "e_rx", "e_sync", "e_sleep", "awake_ms"):
            if not getattr(self, name):
                setattr(self, name, [0.0] * self.n_nodes)
        if not self.n_sync:
            self.n_sync = [0] * self.n_nodes

    def node_total(self, node: int) -> float:
        return self.e_tx[node] + self.e_rx[node] + self.e_sync[node] + self.e_sleep[node]

    def total(self) -> float:
        return sum(self.e_tx) + sum(self.e_rx) + sum(self.e_sync) + sum(self.e_sleep)


_MODE_FIELD = {"tx": "e_tx", "rx": "e_rx", "sync_listen": "e_sync", "sleep": "e_sleep"}


def account_energy(
    ledger: EnergyLedger, node: int, interval_ms: float, mode: str, power_mw: float
) -> EnergyLedger:
    """Add ``power_mw * interval_ms`` (in mJ) to the node's ``mode`` bucket."""
    if mode not in _MODE_FIELD:
        raise ValueError(f"unknown energy mode {mode!r}")
    if interval_ms < 0:
        raise ValueError("interval cannot be negative")
    if interval_ms == 0:
        return ledger
    getattr(ledger, _MODE_FIELD[mode])[node] += power_mw * interval_ms / 1000.0
    if mode == "sync_listen":
        ledger.n_sync[node] += 1
    if mode != "sleep":
        ledger.awake_ms[node] += interval_ms
    return ledger


@dataclass
class MetricsAccumulator:
    n_nodes: int
    segments: int
    segment_ms: float
    sent: list = field(default_factory=list)
    delivered: list = field(default_factory=list)
    lost_collision: list = field(default_factory=list)
    lost_below_sensitivity: list = field(default_factory=list)
    dropped_stale: list = field(default_factory=list)
    gave_up: list = field(default_factory=list)
    seg_sent: list = field(default_factory=list)
    seg_received: list = field(default_factory=list)
    delivered_toa_ms: float = 0.0
    payload_bits: int = 80

    def __post_init__(self) -> None:
        for name in ("sent", "delivered", "lost_collision", "lost_below_sensitivity", "dropped_stale", "gave_up"):
            if not getattr(self, name):
                setattr(self, name, [0] * self.n_nodes)
        if not self.seg_sent:
            self.seg_sent = [0] * self.segments
            self.seg_received = [0] * self.segments

    def _seg(self, t_gen: float) -> int:
        return min(self.segments - 1, max(0, int(t_gen // self.segment_ms)))

    def record_sent(self, node: int, t_gen: float) -> None:
        self.sent[node] += 1
        self.seg_sent[self._seg(t_gen)] += 1

    def censor(self, node: int, t_gen: float) -> None:
        """Withdraw a packet that was generated but never transmitted before the run ended."""
        self.sent[node] -= 1
        self.seg_sent[self._seg(t_gen)] -= 1

    def record(self, node: int, t_gen: float, outcome: str, toa_ms: float = 0.0) -> None:
        if outcome == "delivered":
            self.delivered[node] += 1
            self.seg_received[self._seg(t_gen)] += 1
            self.delivered_toa_ms += toa_ms
        elif outcome == "lost_collision":
            self.lost_collision[node] += 1
        elif outcome == "lost_below_sensitivity":
            self.lost_below_sensitivity[node] += 1
        elif outcome == "dropped_stale":
            self.dropped_stale[node] += 1
        elif outcome == "gave_up":
            self.gave_up[node] += 1
        else:
            raise ValueError(f"unknown outcome {outcome!r}")

    def conserved(self) -> bool:
        return all(
            self.sent[i] == self.delivered[i] + self.lost_collision[i] + self.lost_below_sensitivity[i]
            + self.dropped_stale[i] + self.gave_up[i]
            for i in range(self.n_nodes)
        )


def pdr_confidence(seg_sent: Sequence[int], seg_received: Sequence[int]) -> tuple[float, float]:
    """Mean of per-segment PDRs and the 95% half-width 1.96*s/sqrt(m)."""
    samples = [r / s for s, r in zip(seg_sent, seg_received) if s > 0]
    if not samples:
        return 0.0, 0.0
    mean = statistics.fmean(samples)
    if len(samples) < 2:
        return mean, 0.0
    return mean, 1.96 * statistics.stdev(samples) / math.sqrt(len(samples))


def compute_metrics(
    acc: MetricsAccumulator,
    duration_s: float,
    channels: int = 8,
    energy_total_mj: float = 0.0,
) -> dict[str, float]:
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    sent, received = sum(acc.sent), sum(acc.delivered)
    _, ci = pdr_confidence(acc.seg_sent, acc.seg_received)
    return {
        "pdr": received / sent if sent else 0.0,
        "pdr_ci95": ci,
        "throughput_kbps": received * acc.payload_bits / duration_s / 1000.0,
        "utilization": min(1.0, acc.delivered_toa_ms / (channels * duration_s * 1000.0)),
        "energy_mj_per_success": energy_total_mj / received if received else math.inf,
    }


# ---------------------------------------------------------------------------
# report

REPORT_FIELDS = [
    "protocol", "n", "sf", "interval_s", "seed", "sent", "received", "pdr", "pdr_ci95",
    "throughput_kbps", "utilization", "energy_mj_per_success", "sync_events", "collisions",
    "below_sensitivity", "dropped_stale", "gave_up", "energy_tx_mj", "energy_rx_mj",
    "energy_sync_mj", "energy_sleep_mj", "access_tx", "mean_join_s", "infeasible", "notes",
]
REPORT_SCHEMA_VERSION = 1


@dataclass
class SimulationReport:
    protocol: str
    n: int
    sf: int
    interval_s: float
    seed: int
    sent: int = 0
    received: int = 0
    pdr: float = 0.0
    pdr_ci95: float = 0.0
    throughput_kbps: float = 0.0
    utilization: float = 0.0
    energy_mj_per_success: float = math.inf
    sync_events: int = 0
    collisions: int = 0
    below_sensitivity: int = 0
    dropped_stale: int = 0
    gave_up: int = 0
    energy_tx_mj: float = 0.0
    energy_rx_mj: float = 0.0
    energy_sync_mj: float = 0.0
    energy_sleep_mj: float = 0.0
    access_tx: int = 0
    mean_join_s: float = 0.0
    infeasible: int = 0
    notes: str = ""
    per_node: list = field(default_factory=list, repr=False)
    trace: list = field(default_factory=list, repr=False)
    sched_log: list = field(default_factory=list, repr=False)

    def row(self) -> list[str]:
        return [_fmt(getattr(self, k)) for k in REPORT_FIELDS]


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return f"{v:.6g}"
    return str(v)


def write_reports(path: str | Path, reports: Iterable[SimulationReport], aggregate: bool = False) -> None:
    reports = list(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in reports:
            w.writerow(r.row())
        if aggregate and reports:
            w.writerow(aggregate_row(reports))


def aggregate_row(reports: Sequence[SimulationReport]) -> list[str]:
    """Mean over seeds; the seed column reads ``mean``."""
    out = []
    for k in REPORT_FIELDS:
        vals = [getattr(r, k) for r in reports]
        if k == "seed":
            out.append("mean")
        elif k in ("protocol", "notes"):
            out.append(str(vals[0]) if k == "protocol" else "")
        elif all(isinstance(v, (int, float)) for v in vals):
            finite = [v for v in vals if not (isinstance(v, float) and math.isinf(v))]
            out.append(_fmt(statistics.fmean(finite)) if len(finite) == len(vals) else "inf")
        else:
            out.append("")
    return out


TRACE_FIELDS = ["node", "kind", "channel", "sf", "start_ms", "end_ms", "rx_dbm", "outcome"]


def write_trace(path: str | Path, report: SimulationReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        w.writerows(report.trace)


# ---------------------------------------------------------------------------
# simulation state


class _Air:
    """One transmission in flight at the gateway."""

    __slots__ = ("node", "channel", "sf", "start", "end", "toa", "rx_dbm", "pkt", "access", "interferers")

    def __init__(self, node, channel, sf, start, toa, rx_dbm, pkt, access):
        self.node = node
        self.channel = channel
        self.sf = sf
        self.start = start
        self.toa = toa
        self.end = start + toa
        self.rx_dbm = rx_dbm
        self.pkt = pkt
        self.access = access
        self.interferers: list[_Air] = []

    def as_transmission(self, tx_dbm: float, distance: float) -> Transmission:
        return Transmission(self.node, self.channel, self.sf, self.start, self.toa, tx_dbm, distance, self.rx_dbm)


@dataclass
class GatewayState:
    x: float
    y: float
    channels: int
    inflight: list = field(default_factory=list)
    recent: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self.inflight = [[] for _ in range(self.channels)]
        self.recent = [[] for _ in range(self.channels)]


class NodeState:
    __slots__ = (
        "id", "x", "y", "dist", "pkt", "on_air", "waiting", "csma_stage", "channel", "clock",
        "fsm", "plan", "wake_token", "sync_token", "pending_clock", "access_attempts", "grant",
        "infeasible", "joined_at", "shadow", "app_on",
    )

    def __init__(self, nid: int, x: float, y: float, dist: float):
        self.id = nid
        self.x, self.y, self.dist = x, y, dist
        self.pkt: Optional[float] = None  # generation time of the queued packet
        self.on_air = False
        self.waiting = False
        self.csma_stage = 0
        self.channel = 0
        self.clock = ClockModel()
        self.fsm = DeviceFsmState()
        self.plan: Optional[TdmaPlan] = None
        self.wake_token = 0
        self.sync_token = 0
        self.pending_clock: Optional[ClockModel] = None
        self.access_attempts = 0
        self.grant = None
        self.infeasible = False
        self.joined_at: Optional[float] = None
        self.shadow = 0.0
        self.app_on = True  # False while a TDMA device has not yet joined the network


def resolve_epoch(group: Sequence[Transmission], link: LinkModel, capture: bool = True,
                  capture_requires_first: bool = False) -> list[Outcome]:
    """Outcomes for a closed overlap group; thin wrapper over the PHY rule."""
    return resolve_reception(group, link, capture, capture_requires_first)


class Simulation:
    """One (config, seed) run. Construct, then call :meth:`run`."""

    def __init__(self, cfg: ScenarioConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.policy = cfg.policy
        self.radio = cfg.radio()
        self.sf = cfg.phy.sf
        self.toa = cfg.toa_ms
        self.link = cfg.link_model()
        self.capture_db = cfg.link.capture_db.get(self.sf, math.inf)
        self.duration_ms = cfg.sim.duration_s * 1000.0
        self.interval_ms = cfg.traffic.interval_s * 1000.0
        self.channels = cfg.net.channels

        def stream(name: str) -> random.Random:
            return random.Random(f"{seed}:{name}")

        self.rng_place = stream("placement")
        self.rng_shadow = stream("shadowing")
        self.rng_traffic = stream("traffic")
        self.rng_backoff = stream("backoff")
        self.rng_sync = stream("sync")
        self.rng_hw = stream("hw_jitter")
        self.rng_channel = stream("channel")
        self.rng_access = stream("access")

        self.gw = GatewayState(cfg.area_m / 2.0, cfg.area_m / 2.0, self.channels)
        self.nodes: list[NodeState] = []
        for i in range(cfg.n_nodes):
            x = self.rng_place.uniform(0.0, cfg.area_m)
            y = self.rng_place.uniform(0.0, cfg.area_m)
            self.nodes.append(NodeState(i, x, y, math.hypot(x - self.gw.x, y - self.gw.y)))
        if cfg.link.shadowing == "per_link":
            for nd in self.nodes:
                nd.shadow = self.rng_shadow.gauss(0.0, cfg.link.sigma_db)
        self._pair_shadow: dict[tuple[int, int], float] = {}

        self.ledger = EnergyLedger(cfg.n_nodes)
        self.metrics = MetricsAccumulator(
            cfg.n_nodes, cfg.sim.segments, self.duration_ms / cfg.sim.segments,
            payload_bits=8 * cfg.phy.payload_bytes,
        )
        self.beacons = BeaconSchedule(
            interval_ms=cfg.sync.beacon_interval_s * 1000.0,
            toa_ms=cfg.sync.beacon_toa_ms,
            loss_prob=cfg.sync.beacon_loss,
        )
        self.retry_ms = cfg.sync.retry_ms if cfg.sync.retry_ms is not None else self.beacons.interval_ms / 4.0
        self.csma: Optional[CsmaConfig] = cfg.csma_config() if self.policy == MacPolicy.CSMA else None
        self.max_cad = max(cfg.csma.cad_ms.values()) if cfg.csma.cad_ms else 0.0

        self._heap: list = []
        self._seq = 0
        self.now = 0.0
        self.notes: list[str] = []
        self.access_tx = 0
        self.trace: list[list] = []
        self.events: list[SimEvent] = []
        self.scheduler: Optional[Scheduler] = None
        if self.policy == MacPolicy.TDMA:
            self._init_tdma()

    # -- helpers ------------------------------------------------------------
    def _push(self, t: float, kind: int, node: int, data: Any = None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, node, data))

    def _rx_power(self, nd: NodeState) -> float:
        if self.cfg.link.shadowing == "per_link":
            shadow = nd.shadow
        else:
            shadow = self.rng_shadow.gauss(0.0, self.cfg.link.sigma_db) if self.cfg.link.sigma_db > 0 else 0.0
        return self.cfg.phy.tx_dbm - path_loss_db(self.link, nd.dist, shadow)

    def _jitter(self) -> float:
        return truncated_gauss(self.rng_hw, self.cfg.sync.hw_sigma_ms)

    def _drop(self, nd: NodeState, t_gen: Optional[float]) -> None:
        if t_gen is not None:
            self.metrics.record(nd.id, t_gen, "dropped_stale")

    def _energy(self, nd: NodeState, ms: float, mode: str) -> None:
        e = self.cfg.energy
        power = {"tx": e.tx_mw, "rx": e.rx_mw, "sync_listen": e.rx_mw}[mode]
        account_energy(self.ledger, nd.id, ms, mode, power)

    # -- transmission path --------------------------------------------------
    def _start_tx(self, nd: NodeState, t: float, channel: int, pkt: Optional[float], access: bool = False,
                  toa: Optional[float] = None) -> None:
        toa = self.toa if toa is None else toa
        air = _Air(nd.id, channel, self.sf, t, toa, self._rx_power(nd), pkt, access)
        for other in self.gw.inflight[channel]:
            if other.end > t + OVERLAP_EPS_MS and other.sf == air.sf:
                other.interferers.append(air)
                air.interferers.append(other)
        self.gw.inflight[channel].append(air)
        nd.on_air = True
        self._energy(nd, toa, "tx")
        if access:
            self.access_tx += 1
        self._push(air.end, _TX_END, nd.id, air)

    def _outcome(self, air: _Air) -> Outcome:
        if air.rx_dbm < self.link.sensitivity_dbm:
            return Outcome.LOST_BELOW_SENSITIVITY
        if not air.interferers:
            return Outcome.DELIVERED
        # same rule as resolve_epoch() for the first member of [air] + interferers,
        # without building the whole group's outcomes
        if not self.cfg.link.capture:
            return Outcome.LOST_COLLISION
        if self.cfg.link.capture_first and any(o.start <= air.start for o in air.interferers):
            return Outcome.LOST_COLLISION
        if captures(air.rx_dbm, [o.rx_dbm for o in air.interferers], self.capture_db):
            return Outcome.DELIVERED
        return Outcome.LOST_COLLISION

    def _on_tx_end(self, nd: NodeState, air: _Air, t: float) -> None:
        flight = self.gw.inflight[air.channel]
        flight.remove(air)
        if self.policy == MacPolicy.CSMA:
            self.gw.recent[air.channel].append(air)
        nd.on_air = False
        outcome = self._outcome(air)
        if self.cfg.sim.trace:
            self.trace.append([air.node, "access" if air.access else "data", air.channel, air.sf,
                               f"{air.start:.3f}", f"{air.end:.3f}", f"{air.rx_dbm:.2f}", outcome.value])
        if air.access:
            self._access_done(nd, t, outcome == Outcome.DELIVERED)
            return
        self.metrics.record(nd.id, air.pkt, outcome.value, air.toa)
        if self.policy == MacPolicy.TDMA:
            if outcome == Outcome.DELIVERED:
                self._server_report(nd.id, t)
            self._fsm(nd, "tx_done", t)
        elif self.policy == MacPolicy.PURE_ALOHA:
            if nd.pkt is not None:
                self._aloha_send(nd, t)
        elif self.policy == MacPolicy.SLOTTED_ALOHA:
            if nd.pkt is not None and not nd.waiting:
                self._salo_arm(nd, t)
        elif self.policy == MacPolicy.CSMA:
            if nd.pkt is not None and not nd.waiting:
                self._csma_begin(nd, t)

    # -- traffic ------------------------------------------------------------
    def _next_arrival(self, t: float) -> float:
        if self.cfg.traffic.model == "poisson":
            return t + self.rng_traffic.expovariate(1.0 / self.interval_ms)
        return t + self.interval_ms

    def _on_data(self, nd: NodeState, t: float) -> None:
        nxt = self._next_arrival(t)
        if nxt < self.duration_ms:
            self._push(nxt, _DATA, nd.id)
        if not nd.app_on:
            return
        self.metrics.record_sent(nd.id, t)
        p = self.policy
        if p == MacPolicy.TDMA:
            self._tdma_data(nd, t)
            return
        if p == MacPolicy.PURE_ALOHA:
            busy = nd.on_air
        else:
            busy = nd.on_air or nd.waiting
        if busy:
            self._drop(nd, nd.pkt)
            nd.pkt = t
            return
        nd.pkt = t
        if p == MacPolicy.PURE_ALOHA:
            self._aloha_send(nd, t)
        elif p == MacPolicy.SLOTTED_ALOHA:
            self._salo_arm(nd, t)
        else:
            self._csma_begin(nd, t)

    # -- pure ALOHA ---------------------------------------------------------
    def _aloha_send(self, nd: NodeState, t: float) -> None:
        pkt, nd.pkt = nd.pkt, None
        self._start_tx(nd, t, pick_channel(self.rng_channel, self.channels), pkt)

    # -- slotted ALOHA ------------------------------------------------------
    def _salo_arm(self, nd: NodeState, t: float) -> None:
        local = next_tx_time_slotted_aloha(t, self.cfg.slot_ms, nd.clock)
        emit = max(t, nd.clock.true_time_of(local) + self._jitter())
        nd.waiting = True
        self._push(emit, _SLOT, nd.id, None)

    def _salo_slot(self, nd: NodeState, t: float) -> None:
        nd.waiting = False
        if nd.pkt is None:
            return
        if nd.on_air:
            self._salo_arm(nd, t + 1e-6)
            return
        pkt, nd.pkt = nd.pkt, None
        self._start_tx(nd, t, pick_channel(self.rng_channel, self.channels), pkt)

    def _salo_sync(self, nd: NodeState, t: float) -> None:
        s = self.cfg.sync
        self._energy(nd, self.cfg.energy.listen_ms, "sync_listen")
        beacon = self.beacons.next_beacon(t)
        if beacon is not None and not self.beacons.is_lost(beacon, self.rng_sync):
            nd.clock = nd.clock.resynced(t, truncated_gauss(self.rng_sync, s.sigma_ms))
            nxt = t + s.interval_s * 1000.0
        else:
            nxt = t + self.retry_ms
        if nxt < self.duration_ms:
            self._push(nxt, _SYNC_WAKE, nd.id, None)

    # -- CSMA ---------------------------------------------------------------
    def _csma_begin(self, nd: NodeState, t: float) -> None:
        nd.waiting = True
        nd.csma_stage = 0
        nd.channel = pick_channel(self.rng_channel, self.channels)
        self._push(t + self.csma.cad_for(self.sf), _CAD_DONE, nd.id, t)

    def _pair_shadow_db(self, a: int, b: int) -> float:
        sigma = self.cfg.link.sigma_db
        if sigma <= 0:
            return 0.0
        if self.cfg.link.shadowing == "per_packet":
            return self.rng_shadow.gauss(0.0, sigma)
        key = (a, b) if a < b else (b, a)
        if key not in self._pair_shadow:
            self._pair_shadow[key] = self.rng_shadow.gauss(0.0, sigma)
        return self._pair_shadow[key]

    def sensed_power_dbm(self, nd: NodeState, channel: int, t0: float, t1: float) -> float:
        """Total power on ``channel`` seen at ``nd`` from transmissions overlapping [t0, t1]."""
        recent = self.gw.recent[channel]
        horizon = t1 - 2.0 * self.max_cad
        if recent and recent[0].end < horizon:
            self.gw.recent[channel] = recent = [a for a in recent if a.end >= horizon]
        total = 0.0
        for a in self.gw.inflight[channel] + recent:
            if a.node == nd.id or a.end <= t0 or a.start >= t1:
                continue
            other = self.nodes[a.node]
            d = math.hypot(other.x - nd.x, other.y - nd.y)
            rx = self.cfg.phy.tx_dbm - path_loss_db(self.link, d, self._pair_shadow_db(nd.id, a.node))
            total += dbm_to_mw(rx)
        return mw_to_dbm(total)

    def _cad_done(self, nd: NodeState, t: float, t_cad_start: float) -> None:
        cad = self.csma.cad_for(self.sf)
        self._energy(nd, cad, "rx")
        sensed = self.sensed_power_dbm(nd, nd.channel, t_cad_start, t)
        verdict, t_next = csma_step(t_cad_start, nd.csma_stage, sensed, self.csma, self.sf, self.rng_backoff)
        if verdict == "tx":
            nd.waiting = False
            pkt, nd.pkt = nd.pkt, None
            self._start_tx(nd, t, nd.channel, pkt)
        elif verdict == "give_up":
            nd.waiting = False
            if nd.pkt is not None:
                self.metrics.record(nd.id, nd.pkt, "gave_up")
                nd.pkt = None
        else:
            nd.csma_stage += 1
            self._push(t_next + cad, _CAD_DONE, nd.id, t_next)

    # -- TDMA ---------------------------------------------------------------
    def _init_tdma(self) -> None:
        cfg = self.cfg
        self.k = validate_period(self.interval_ms, cfg.superframe.t0_ms, cfg.superframe.k_max)
        self.frame_ms = cfg.frame_ms
        self.S = cfg.slots_per_frame
        m = 2 ** self.k
        grid = ResourceGrid(self.channels, self.S * m, reserved=[(0, g * self.S) for g in range(m)])
        self.scheduler = Scheduler(
            grid,
            rho_max=cfg.sched.rho_max,
            slot_len_ms=cfg.slot_ms,
            t_release_ms=cfg.t_release_ms,
            radio=self.radio,
            reuse=cfg.sched.reuse,
            quota_mode=cfg.sched.quota_mode,
            strict_priority=cfg.sched.strict_priority,
        )
        s = cfg.sync
        for nd in self.nodes:
            drift = self.rng_sync.uniform(-s.drift_ppm, s.drift_ppm)
            nd.clock = ClockModel(0.0, drift, 0.0, s.hw_sigma_ms)

    def _request(self, nd: NodeState) -> AllocationRequest:
        return AllocationRequest(nd.id, "request", self.sf, self.cfg.phy.payload_bytes, False, self.cfg.tdma.priority)

    def _grant(self, nd: NodeState, t: float) -> bool:
        try:
            res = self.scheduler.handle(self._request(nd), t)
        except AllocationRejected as exc:
            nd.infeasible = True
            self.notes.append(f"node {nd.id}: {exc}")
            return False
        nd.grant = res
        # idle time starts once the device can have heard the grant and a beacon
        grace = self.frame_ms + self.beacons.interval_ms + self.beacons.toa_ms if t > 0 else 0.0
        self.scheduler.table[nd.id].t_last_ms = t + grace
        return True

    def _refresh_reports(self, t: float) -> None:
        """Set each holder's last report to its latest slot start at or before ``t``."""
        period = self.frame_ms * 2 ** self.k
        slot = self.cfg.slot_ms
        for rec in self.scheduler.table.values():
            v = rec.slot_indices[0]
            off = (v // self.S) * self.frame_ms + (v % self.S) * slot
            rec.t_last_ms = t - ((t - off) % period)

    def _make_plan(self, nd: NodeState) -> TdmaPlan:
        res = nd.grant
        v = res.first_slot
        sched = DeviceSchedule(nd.id, self.k, v // self.S, v % self.S, res.channel_index)
        nd.channel = res.channel_index
        return TdmaPlan(sched, slot_ms=self.cfg.slot_ms, slots_per_frame=self.S, guard_ms=self.cfg.guard_ms,
                        toa_ms=self.toa, n_slots=len(res.slot_indices), frame_len_ms=self.frame_ms)

    def _tdma_start(self) -> None:
        cfg = self.cfg
        if cfg.tdma.join == "provisioned":
            s = cfg.sync
            # Devices are taken to have joined one after another over the cycle
            # before t=0, each reporting in its own slot since; this keeps the
            # idle-time ranking of reuse victims meaningful at saturation.
            n = len(self.nodes)
            for i, nd in enumerate(self.nodes):
                t_join = -self.interval_ms + i * self.interval_ms / n
                self._refresh_reports(t_join)
                self._grant(nd, t_join)
            self._refresh_reports(0.0)
            for nd in self.nodes:
                if nd.grant is None:
                    continue
                nd.plan = self._make_plan(nd)
                # desynchronise the periodic re-sync phase across devices
                last = -self.rng_sync.uniform(0.0, s.interval_s * 1000.0)
                nd.clock = replace(nd.clock, offset_ms=truncated_gauss(self.rng_sync, s.sigma_ms),
                                   last_sync_true_time_ms=last)
                nd.fsm = DeviceFsmState(state=State.SLEEP, joined=True, allocated=True, synced=True)
                nd.joined_at = 0.0
                self._schedule_sync(nd, 0.0)
        else:
            for nd in self.nodes:
                nd.app_on = False
                self._fsm(nd, "power_on", 0.0)

    def _server_report(self, dev: int, t: float) -> None:
        sch = self.scheduler
        rec = sch.table.get(dev)
        if rec is None:
            return
        if t - rec.t_last_ms > sch.t_release_ms:
            # stale holder: reclaimed before its report is honoured
            _release(sch.grid, sch.table.pop(dev))
            sch.reclaimed += 1
            return
        rec.t_last_ms = t

    def _fsm(self, nd: NodeState, event: str, t: float) -> list[Action]:
        prev = nd.fsm
        fsm, actions = fsm_step(prev, event, nd.clock, nd.plan, t, self.cfg.sync.max_failures)
        nd.fsm = fsm
        for a in actions:
            self._tdma_action(nd, a, t, prev)
        return actions

    def _tdma_data(self, nd: NodeState, t: float) -> None:
        prev = nd.fsm
        fsm, actions = fsm_step(prev, "data_ready", nd.clock, nd.plan, t, self.cfg.sync.max_failures)
        nd.fsm = fsm
        if Action.DROP_STALE in actions:
            if prev.synced and not prev.suspended and nd.pkt is not None:
                self._drop(nd, nd.pkt)
                nd.pkt = t
            else:
                self._drop(nd, t)
        else:
            nd.pkt = t
        for a in actions:
            if a != Action.DROP_STALE:
                self._tdma_action(nd, a, t, prev)

    def _tdma_action(self, nd: NodeState, a: Action, t: float, prev: DeviceFsmState) -> None:
        if a == Action.TRANSMIT_ACCESS:
            self._schedule_access(nd, t)
        elif a == Action.RETUNE_SYNC:
            nd.wake_token += 1
            nd.sync_token += 1
            self._do_sync(nd, t)
        elif a == Action.SCHEDULE_SYNC:
            self._schedule_sync(nd, t)
        elif a == Action.SCHEDULE_SYNC_RETRY:
            if nd.fsm.synced:
                self._schedule_sync(nd, t + self.retry_ms, from_now=True)
            else:
                nd.sync_token += 1
                self._push(t + self.retry_ms, _SYNC_WAKE, nd.id, ("retry", nd.sync_token))
        elif a == Action.SCHEDULE_WAKEUP:
            nd.wake_token += 1
            emit = nd.clock.true_time_of(nd.fsm.wakeup_local_ms) + self._jitter()
            self._push(max(t, emit), _SLOT, nd.id, nd.wake_token)
        elif a == Action.TRANSMIT:
            if nd.pkt is None:
                # nothing queued any more; close the send cycle immediately
                self._fsm(nd, "tx_done", t)
                return
            pkt, nd.pkt = nd.pkt, None
            self._start_tx(nd, t, nd.channel, pkt)
        elif a == Action.DROP_STALE:
            self._drop(nd, nd.pkt)
            nd.pkt = None
        elif a == Action.SUSPEND:
            nd.wake_token += 1
            self._drop(nd, nd.pkt)
            nd.pkt = None
        # RETUNE_UPLINK needs no engine work: channel switches are instantaneous

    def _schedule_access(self, nd: NodeState, t: float) -> None:
        exp = min(nd.access_attempts + 1, self.cfg.tdma.access_backoff_max_exp)
        backoff = self.rng_access.randrange(2**exp) if exp > 0 else 0
        nd.access_attempts += 1
        frame = math.floor(t / self.frame_ms) + 1 + backoff
        emit = frame * self.frame_ms + self.cfg.guard_ms / 2.0 + self._jitter()
        if emit < self.duration_ms:
            self._push(emit, _ACCESS, nd.id, None)

    def _access_done(self, nd: NodeState, t: float, ok: bool) -> None:
        reply = t + self.frame_ms
        if not ok:
            self._push(reply, _FSM, nd.id, ("access_timeout", None))
        elif nd.fsm.state == State.INIT:
            self._push(reply, _FSM, nd.id, ("join_granted", None))
        elif nd.fsm.state == State.REQ:
            if self._grant(nd, t):
                self._push(reply, _FSM, nd.id, ("alloc_granted", None))

    def _do_sync(self, nd: NodeState, t: float) -> None:
        initial = not nd.fsm.synced
        s = self.cfg.sync
        listen = self.cfg.energy.listen_ms
        timeout = self.beacons.interval_ms + self.beacons.toa_ms if initial else listen
        res = run_sync_attempt(nd.clock, self.beacons, t, timeout, self.rng_sync, s.sigma_ms, self.retry_ms)
        self._energy(nd, res.wait_ms if initial else listen, "sync_listen")
        if res.synced:
            nd.pending_clock = res.clock
            self._push(t + res.wait_ms, _FSM, nd.id, ("sync_done", nd.sync_token))
        else:
            self._push(t + timeout, _FSM, nd.id, ("sync_timeout", nd.sync_token))

    def _schedule_sync(self, nd: NodeState, t: float, from_now: bool = False) -> None:
        """Arm the next re-sync listen window, centred on the target beacon."""
        nd.sync_token += 1
        anchor = t if from_now else nd.clock.last_sync_true_time_ms + self.cfg.sync.interval_s * 1000.0
        beacon = self.beacons.next_beacon(max(anchor, t))
        if beacon is None:
            return
        local = beacon.tx_true_time_ms + beacon.toa_ms / 2.0 - self.cfg.energy.listen_ms / 2.0
        wake = max(t, nd.clock.true_time_of(local))
        if wake < self.duration_ms:
            self._push(wake, _SYNC_WAKE, nd.id, ("age", nd.sync_token))

    # -- main loop ----------------------------------------------------------
    def run(self) -> SimulationReport:
        cfg = self.cfg
        for nd in self.nodes:
            self._push(self.rng_traffic.uniform(0.0, self.interval_ms), _DATA, nd.id)
        if self.policy == MacPolicy.TDMA:
            self._tdma_start()
        elif self.policy == MacPolicy.SLOTTED_ALOHA:
            for nd in self.nodes:
                nd.clock = ClockModel(truncated_gauss(self.rng_sync, cfg.sync.sigma_ms),
                                      self.rng_sync.uniform(-cfg.sync.drift_ppm, cfg.sync.drift_ppm),
                                      0.0, cfg.sync.hw_sigma_ms)
                self._push(self.rng_sync.uniform(0.0, cfg.sync.interval_s * 1000.0), _SYNC_WAKE, nd.id, None)
        self._push(self.duration_ms, _SIM_END, -1)

        heap = self._heap
        pop = heapq.heappop
        nodes = self.nodes
        record = cfg.sim.trace
        while heap:
            t, seq, kind, nid, data = pop(heap)
            self.now = t
            if record:
                self.events.append(SimEvent(t, seq, _KIND_NAMES[kind], nid))
            if kind == _SIM_END:
                continue
            nd = nodes[nid]
            if kind == _TX_END:
                self._on_tx_end(nd, data, t)
            elif kind == _DATA:
                self._on_data(nd, t)
            elif kind == _SLOT:
                if self.policy == MacPolicy.TDMA:
                    if data == nd.wake_token and nd.fsm.state == State.WAIT:
                        self._fsm(nd, "slot_boundary", t)
                else:
                    self._salo_slot(nd, t)
            elif kind == _CAD_DONE:
                self._cad_done(nd, t, data)
            elif kind == _SYNC_WAKE:
                self._on_sync_wake(nd, t, data)
            elif kind == _FSM:
                self._on_fsm_event(nd, t, data)
            elif kind == _ACCESS:
                if nd.fsm.state in (State.INIT, State.REQ):
                    self._start_tx(nd, t, 0, None, access=True,
                                   toa=time_on_air(self.radio, cfg.tdma.access_payload_bytes))
        for nd in nodes:
            if nd.pkt is not None:
                # still waiting for its turn when the horizon closed: never offered to the channel
                self.metrics.censor(nd.id, nd.pkt)
                nd.pkt = None
        return self._report()

    def _on_sync_wake(self, nd: NodeState, t: float, data: Any) -> None:
        if self.policy == MacPolicy.SLOTTED_ALOHA:
            self._salo_sync(nd, t)
            return
        tag, token = data
        if token != nd.sync_token:
            return
        if tag == "retry":
            if nd.fsm.state == State.SYNC and not nd.fsm.synced:
                self._do_sync(nd, t)
            return
        if nd.fsm.state in (State.SLEEP, State.WAIT, State.SEND):
            self._fsm(nd, "sync_age_expired", t)

    def _on_fsm_event(self, nd: NodeState, t: float, data: Any) -> None:
        event, token = data
        if event in ("sync_done", "sync_timeout"):
            if token != nd.sync_token or nd.fsm.state != State.SYNC:
                return
            if event == "sync_done":
                nd.clock = nd.pending_clock
                if nd.joined_at is None:
                    nd.joined_at = t
            self._fsm(nd, event, t)
            return
        if event == "alloc_granted":
            nd.plan = self._make_plan(nd)
        elif event == "join_granted":
            nd.app_on = True
        self._fsm(nd, event, t)

    def _report(self) -> SimulationReport:
        cfg = self.cfg
        ledger = self.ledger
        sleep_mw = cfg.energy.sleep_mw
        for i in range(cfg.n_nodes):
            idle = max(0.0, self.duration_ms - ledger.awake_ms[i])
            ledger.e_sleep[i] = sleep_mw * idle / 1000.0
        m = compute_metrics(self.metrics, cfg.sim.duration_s, self.channels, ledger.total())
        acc = self.metrics
        joins = [nd.joined_at for nd in self.nodes if nd.joined_at is not None]
        per_node = [
            {
                "node": nd.id, "distance_m": nd.dist, "sent": acc.sent[i], "delivered": acc.delivered[i],
                "lost_collision": acc.lost_collision[i], "lost_below_sensitivity": acc.lost_below_sensitivity[i],
                "dropped_stale": acc.dropped_stale[i], "gave_up": acc.gave_up[i],
                "energy_mj": ledger.node_total(i),
            }
            for i, nd in enumerate(self.nodes)
        ]
        return SimulationReport(
            protocol=cfg.protocol,
            n=cfg.n_nodes,
            sf=self.sf,
            interval_s=cfg.traffic.interval_s,
            seed=self.seed,
            sent=sum(acc.sent),
            received=sum(acc.delivered),
            pdr=m["pdr"],
            pdr_ci95=m["pdr_ci95"],
            throughput_kbps=m["throughput_kbps"],
            utilization=m["utilization"],
            energy_mj_per_success=m["energy_mj_per_success"],
            sync_events=sum(ledger.n_sync),
            collisions=sum(acc.lost_collision),
            below_sensitivity=sum(acc.lost_below_sensitivity),
            dropped_stale=sum(acc.dropped_stale),
            gave_up=sum(acc.gave_up),
            energy_tx_mj=sum(ledger.e_tx),
            energy_rx_mj=sum(ledger.e_rx),
            energy_sync_mj=sum(ledger.e_sync),
            energy_sleep_mj=sum(ledger.e_sleep),
            access_tx=self.access_tx,
            mean_join_s=statistics.fmean(joins) / 1000.0 if joins else 0.0,
            infeasible=sum(1 for nd in self.nodes if nd.infeasible),
            notes="; ".join(self.notes[:3]) + (f"; +{len(self.notes) - 3} more" if len(self.notes) > 3 else ""),
            per_node=per_node,
            trace=self.trace,
            sched_log=list(self.scheduler.log) if self.scheduler else [],
        )


def run_simulation(cfg: ScenarioConfig, seed: Optional[int] = None) -> SimulationReport:
    """Run one seed (default: the first configured seed)."""
    return Simulation(cfg, cfg.sim.seeds[0] if seed is None else seed).run()


# ---------------------------------------------------------------------------
# batches


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        return max(1, int(raw))
    return max(1, min(8, os.cpu_count() or 1))


def _run_pair(args: tuple[ScenarioConfig, int]) -> SimulationReport:
    cfg, seed = args
    return run_simulation(cfg, seed)


def run_batch(jobs: Sequence[tuple[ScenarioConfig, int]], workers: Optional[int] = None) -> list[SimulationReport]:
    """Run independent (config, seed) pairs, in order, optionally across processes."""
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [_run_pair(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_pair, jobs))


def run_seeds(cfg: ScenarioConfig, seeds: Optional[Sequence[int]] = None,
              workers: Optional[int] = None) -> list[SimulationReport]:
    seeds = cfg.sim.seeds if seeds is None else seeds
    return run_batch([(cfg, s) for s in seeds], workers)


def mean_pdr(reports: Sequence[SimulationReport]) -> float:
    return statistics.fmean(r.pdr for r in reports)


def capacity_search(
    base: ScenarioConfig,
    pdr_threshold: float = 0.8,
    n_max: int = 400,
    seeds: Optional[Sequence[int]] = None,
    workers: Optional[int] = None,
) -> int:
    """Largest N whose seed-averaged PDR meets the threshold, by bisection.

    Assumes PDR is non-increasing in N, which holds in expectation for every
    policy modelled here.
    """
    if pdr_threshold <= 0:
        return n_max

    def ok(n: int) -> bool:
        return mean_pdr(run_seeds(replace(base, n_nodes=n), seeds, workers)) >= pdr_threshold

    if ok(n_max):
        return n_max
    lo, hi = 0, n_max
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class SweepPoint:
    axis: str
    value: float
    pdr: float
    pdr_ci95: float
    pdr_per_seed: list


SWEEP_AXES = {"sync_sigma": "sync.sigma_ms", "guard_time": "tdma.guard_ms"}


def sensitivity_sweep(
    base: ScenarioConfig,
    axis: str,
    grid: Sequence[float],
    seeds: Optional[Sequence[int]] = None,
    workers: Optional[int] = None,
) -> list[SweepPoint]:
    """PDR at each grid value; every point reuses the same seeds."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    if not grid:
        raise ValueError("sweep grid is empty")
    seeds = base.sim.seeds if seeds is None else seeds
    key = SWEEP_AXES[axis]
    cfgs = [base.with_overrides([(key, float(v))]) for v in grid]
    reports = run_batch([(c, s) for c in cfgs for s in seeds], workers)
    out = []
    for i, v in enumerate(grid):
        chunk = reports[i * len(seeds):(i + 1) * len(seeds)]
        pdrs = [r.pdr for r in chunk]
        ci = 1.96 * statistics.stdev(pdrs) / math.sqrt(len(pdrs)) if len(pdrs) > 1 else 0.0
        out.append(SweepPoint(axis, float(v), statistics.fmean(pdrs), ci, pdrs))
    return out


def cliff_midpoint(points: Sequence[SweepPoint]) -> Optional[float]:
    """Axis value where PDR first crosses halfway between its extremes (linear interpolation)."""
    if len(points) < 2:
        return None
    pts = sorted(points, key=lambda p: p.value)
    lo, hi = min(p.pdr for p in pts), max(p.pdr for p in pts)
    if hi - lo < 1e-12:
        return None
    mid = (lo + hi) / 2.0
    for a, b in zip(pts, pts[1:]):
        if (a.pdr - mid) * (b.pdr - mid) <= 0 and a.pdr != b.pdr:
            return a.value + (mid - a.pdr) * (b.value - a.value) / (b.pdr - a.pdr)
    return None


SWEEP_FIELDS = ["axis", "value", "pdr", "pdr_ci95", "seeds"]


def write_sweep(path: str | Path, points: Sequence[SweepPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_FIELDS)
        for p in points:
            w.writerow([p.axis, _fmt(p.value), _fmt(p.pdr), _fmt(p.pdr_ci95), len(p.pdr_per_seed)])
