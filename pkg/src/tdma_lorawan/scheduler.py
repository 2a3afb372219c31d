"""Server-side slot/channel allocation over a channel x slot occupancy grid."""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

from .phy import RadioConfig, time_on_air

N_DOWNLINK_PER_SESSION = 2


class AllocationRejected(RuntimeError):
    """Raised when a request cannot be granted under the active policy."""


class ResourceGrid:
    """Occupancy table: ``cells[c][s]`` is a device id or None."""

    def __init__(self, channels: int, slots_per_frame: int, reserved: Iterable[tuple[int, int]] = ((0, 0),)):
        if channels < 1 or slots_per_frame < 1:
            raise ValueError("grid needs at least one channel and one slot")
        self.channels = channels
        self.slots_per_frame = slots_per_frame
        self.reserved = frozenset(reserved)
        for c, s in self.reserved:
            if not (0 <= c < channels and 0 <= s < slots_per_frame):
                raise ValueError(f"reserved cell {(c, s)} outside grid")
        self.cells: list[list[Optional[int]]] = [[None] * slots_per_frame for _ in range(channels)]
        self._occupied = [sum(1 for (c, _) in self.reserved if c == ch) for ch in range(channels)]
        # lazily-pruned min-heaps of free slot indices, per channel
        self._free = [
            [s for s in range(slots_per_frame) if (ch, s) not in self.reserved]
            for ch in range(channels)
        ]

    @property
    def capacity(self) -> int:
        return self.channels * self.slots_per_frame - len(self.reserved)

    @property
    def total_cells(self) -> int:
        return self.channels * self.slots_per_frame

    def is_free(self, c: int, s: int) -> bool:
        return (c, s) not in self.reserved and self.cells[c][s] is None

    def occupied(self, c: int) -> int:
        return self._occupied[c]

    def set(self, c: int, s: int, dev_id: int) -> None:
        if (c, s) in self.reserved:
            raise ValueError(f"cell {(c, s)} is reserved")
        if self.cells[c][s] is None:
            self._occupied[c] += 1
        self.cells[c][s] = dev_id

    def clear(self, c: int, s: int) -> None:
        if self.cells[c][s] is not None:
            self.cells[c][s] = None
            self._occupied[c] -= 1
            heapq.heappush(self._free[c], s)

    def first_free_run(self, c: int, n_slots: int) -> Optional[int]:
        """Lowest start index of ``n_slots`` consecutive free cells on channel ``c``."""
        if n_slots == 1:
            heap = self._free[c]
            while heap and not self.is_free(c, heap[0]):
                heapq.heappop(heap)
            return heap[0] if heap else None
        run = 0
        for s in range(self.slots_per_frame):
            run = run + 1 if self.is_free(c, s) else 0
            if run == n_slots:
                return s - n_slots + 1
        return None

    def holders(self) -> dict[int, list[tuple[int, int]]]:
        out: dict[int, list[tuple[int, int]]] = {}
        for c, row in enumerate(self.cells):
            for s, dev in enumerate(row):
                if dev is not None:
                    out.setdefault(dev, []).append((c, s))
        return out


@dataclass
class DeviceRecord:
    dev_id: int
    channel_index: int
    slot_indices: tuple[int, ...]
    t_last_ms: float
    n_slots: int
    priority: int = 0
    is_reuse: bool = False
    is_multi: bool = False
    degraded: bool = False

    def cells(self) -> list[tuple[int, int]]:
        return [(self.channel_index, s) for s in self.slot_indices]


@dataclass(frozen=True)
class AllocationRequest:
    dev_id: int
    type: str = "request"  # "request" or "report"
    sf: int = 9
    payload_len: int = 10
    is_multi: bool = False
    priority: int = 0


@dataclass(frozen=True)
class AllocationResult:
    channel_index: int
    slot_indices: tuple[int, ...]
    is_reuse: bool = False
    degraded: bool = False

    @property
    def first_slot(self) -> int:
        return self.slot_indices[0]


def channel_load(grid: ResourceGrid, channel_index: int) -> float:
    """Fraction of the channel's cells that are held or reserved."""
    return grid.occupied(channel_index) / grid.slots_per_frame


def required_slots(
    sf: int,
    payload_len: int,
    slot_len_ms: float,
    is_multi: bool,
    radio: Optional[RadioConfig] = None,
    toa_ms: Optional[float] = None,
) -> int:
    if slot_len_ms <= 0:
        raise ValueError("slot length must be positive")
    if not is_multi:
        return 1
    if toa_ms is None:
        cfg = RadioConfig(sf=sf) if radio is None else replace(radio, sf=sf)
        toa_ms = time_on_air(cfg, payload_len)
    return max(1, math.ceil(toa_ms / slot_len_ms))


def multislot_quota_ok(grid: ResourceGrid, n_multi_current: int, n_new: int, rho_max: float) -> bool:
    return (n_multi_current + n_new) / grid.total_cells <= rho_max


def multislot_in_use(table: dict[int, DeviceRecord]) -> int:
    return sum(r.n_slots for r in table.values() if r.is_multi and r.n_slots > 1)


def control_overhead_eta(t_up_s: float, t_session_s: float) -> float:
    """Downlink control messages per delivered uplink over one session."""
    if t_up_s <= 0 or t_session_s <= 0:
        raise ValueError("intervals must be positive")
    return N_DOWNLINK_PER_SESSION * t_up_s / t_session_s


def _release(grid: ResourceGrid, rec: DeviceRecord) -> None:
    # a reused cell now names the newcomer; leave it alone
    for c, s in rec.cells():
        if grid.cells[c][s] == rec.dev_id:
            grid.clear(c, s)


def reclaim_expired(
    grid: ResourceGrid, table: dict[int, DeviceRecord], t_now_ms: float, t_release_ms: float
) -> int:
    expired = [d for d, r in table.items() if t_now_ms - r.t_last_ms > t_release_ms]
    for dev in expired:
        _release(grid, table.pop(dev))
    return len(expired)


def _pick_victim(
    table: dict[int, DeviceRecord], t_now_ms: float, exclude: int
) -> Optional[DeviceRecord]:
    pool = [r for r in table.values() if r.dev_id != exclude and r.slot_indices]
    if not pool:
        return None
    return min(pool, key=lambda r: (r.priority, -(t_now_ms - r.t_last_ms), r.dev_id))


def allocate(
    grid: ResourceGrid,
    table: dict[int, DeviceRecord],
    req: AllocationRequest,
    t_now_ms: float,
    rho_max: float = 0.3,
    *,
    slot_len_ms: float = 200.0,
    radio: Optional[RadioConfig] = None,
    reuse: bool = True,
    quota_mode: str = "degrade",
    strict_priority: bool = False,
) -> AllocationResult:
    """Grant a block of consecutive cells to ``req.dev_id``.

    Free runs are chosen by (channel load, channel index, start slot). When no
    run fits, the device with the lowest (priority, -idle time, dev id) has its
    cells shared with the requester.
    """
    if req.type != "request":
        raise ValueError("allocate() handles request packets only")
    if req.dev_id in table:
        _release(grid, table.pop(req.dev_id))

    n_slots = required_slots(req.sf, req.payload_len, slot_len_ms, req.is_multi, radio)
    degraded = False
    if n_slots > 1 and not multislot_quota_ok(grid, multislot_in_use(table), n_slots, rho_max):
        if quota_mode == "reject":
            raise AllocationRejected(f"device {req.dev_id}: multi-slot quota exhausted")
        n_slots, degraded = 1, True

    best = None
    for c in range(grid.channels):
        start = grid.first_free_run(c, n_slots)
        if start is None:
            continue
        key = (channel_load(grid, c), c, start)
        if best is None or key < best:
            best = key

    if best is not None:
        _, c, start = best
        slots = tuple(range(start, start + n_slots))
        is_reuse = False
    else:
        if not reuse:
            raise AllocationRejected(f"device {req.dev_id}: grid saturated and reuse disabled")
        victim = _pick_victim(table, t_now_ms, req.dev_id)
        if victim is None:
            raise AllocationRejected(f"device {req.dev_id}: no allocatable cell")
        if strict_priority and not req.priority > victim.priority:
            raise AllocationRejected(
                f"device {req.dev_id}: priority {req.priority} does not exceed victim's {victim.priority}"
            )
        c = victim.channel_index
        if victim.n_slots >= n_slots:
            slots = victim.slot_indices[:n_slots]
        else:
            slots = victim.slot_indices[:1]
            degraded = degraded or n_slots > 1
        is_reuse = True

    for s in slots:
        grid.set(c, s, req.dev_id)
    table[req.dev_id] = DeviceRecord(
        dev_id=req.dev_id,
        channel_index=c,
        slot_indices=slots,
        t_last_ms=t_now_ms,
        n_slots=len(slots),
        priority=req.priority,
        is_reuse=is_reuse,
        is_multi=req.is_multi and len(slots) > 1,
        degraded=degraded,
    )
    return AllocationResult(c, slots, is_reuse, degraded)


LOG_HEADER = ["t_now", "dev_id", "type", "channel", "first_slot", "n_slots", "is_reuse", "load_vector"]


@dataclass
class Scheduler:
    """Single allocation authority: owns the grid, the device table and the audit log."""

    grid: ResourceGrid
    rho_max: float = 0.3
    slot_len_ms: float = 200.0
    t_release_ms: float = 12_000.0
    radio: Optional[RadioConfig] = None
    reuse: bool = True
    quota_mode: str = "degrade"
    strict_priority: bool = False
    table: dict[int, DeviceRecord] = field(default_factory=dict)
    log: list[list] = field(default_factory=list)
    reclaimed: int = 0

    def load_vector(self) -> list[float]:
        return [channel_load(self.grid, c) for c in range(self.grid.channels)]

    def handle(self, req: AllocationRequest, t_now_ms: float) -> Optional[AllocationResult]:
        """Process one uplink: reclaim idle devices, then refresh or allocate."""
        self.reclaimed += reclaim_expired(self.grid, self.table, t_now_ms, self.t_release_ms)
        if req.type == "report":
            rec = self.table.get(req.dev_id)
            if rec is not None:
                rec.t_last_ms = t_now_ms
            return None
        if req.type != "request":
            raise ValueError(f"unknown packet type {req.type!r}")
        result = allocate(
            self.grid,
            self.table,
            req,
            t_now_ms,
            self.rho_max,
            slot_len_ms=self.slot_len_ms,
            radio=self.radio,
            reuse=self.reuse,
            quota_mode=self.quota_mode,
            strict_priority=self.strict_priority,
        )
        self.log.append([
            f"{t_now_ms:.3f}",
            req.dev_id,
            req.type,
            result.channel_index,
            result.first_slot,
            len(result.slot_indices),
            int(result.is_reuse),
            " ".join(f"{x:.4f}" for x in self.load_vector()),
        ])
        return result

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            w.writerows(self.log)
