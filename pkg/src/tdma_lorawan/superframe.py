"""Dyadic superframes: devices with period 2^k base frames share a slot by residue."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence


class NonDyadicPeriod(ValueError):
    def __init__(self, t_ms: float, t0_ms: float, k_max: int):
        self.admissible = nearest_admissible(t_ms, t0_ms, k_max)
        alts = ", ".join(f"{a:g} ms" for a in self.admissible)
        super().__init__(f"period {t_ms:g} ms is not T0*2^k with T0={t0_ms:g} ms, k<={k_max}; nearest admissible: {alts}")


class SlotFull(RuntimeError):
    """No residue class is left on this (channel, slot) for the requested period."""


@dataclass(frozen=True)
class SuperframeConfig:
    k_max: int = 0
    t0_ms: float = 4000.0
    slots_per_frame: int = 20

    def __post_init__(self) -> None:
        if self.k_max < 0:
            raise ValueError("superframe depth must be >= 0")
        if self.t0_ms <= 0 or self.slots_per_frame < 1:
            raise ValueError("frame duration and slot count must be positive")

    @property
    def m_super(self) -> int:
        return 2**self.k_max

    @property
    def slot_ms(self) -> float:
        return self.t0_ms / self.slots_per_frame


@dataclass(frozen=True)
class DeviceSchedule:
    dev_id: int
    k: int
    g: int
    slot: int
    channel_index: int = 0

    def __post_init__(self) -> None:
        if self.k < 0 or not 0 <= self.g < 2**self.k:
            raise ValueError(f"offset {self.g} outside [0, {2**self.k})")
        if self.slot < 0:
            raise ValueError("slot index must be non-negative")

    @property
    def period_frames(self) -> int:
        return 2**self.k


def nearest_admissible(t_ms: float, t0_ms: float, k_max: int) -> list[float]:
    periods = [t0_ms * 2**k for k in range(k_max + 1)]
    lower = [p for p in periods if p <= t_ms]
    upper = [p for p in periods if p >= t_ms]
    out = []
    if lower:
        out.append(lower[-1])
    if upper and upper[0] not in out:
        out.append(upper[0])
    return out


def validate_period(t_ms: float, t0_ms: float, k_max: int) -> int:
    """Return k with t = t0 * 2^k, or raise :class:`NonDyadicPeriod`."""
    if t_ms <= 0 or t0_ms <= 0:
        raise ValueError("periods must be positive")
    ratio = t_ms / t0_ms
    k = round(math.log2(ratio)) if ratio >= 1 else -1
    if k < 0 or k > k_max or not math.isclose(ratio, 2**k, rel_tol=1e-9):
        raise NonDyadicPeriod(t_ms, t0_ms, k_max)
    return k


def is_active_frame(sched: DeviceSchedule, frame_index: int) -> bool:
    return frame_index % sched.period_frames == sched.g


def _clashes(k_a: int, g_a: int, k_b: int, g_b: int) -> bool:
    # residue classes mod 2^k_a and 2^k_b intersect iff they agree mod the smaller
    m = 2 ** min(k_a, k_b)
    return g_a % m == g_b % m


def frame_occupancy(existing: Iterable[DeviceSchedule], m_super: int) -> list[int]:
    occ = [0] * m_super
    for d in existing:
        for f in range(d.g, m_super, d.period_frames):
            occ[f] += 1
    return occ


def assign_group_offset(
    existing: Sequence[DeviceSchedule], k_new: int, m_super: Optional[int] = None
) -> int:
    """Pick a frame offset for a period-2^k_new device on an already-shared slot.

    Any offset whose residue class is disjoint from every occupant is valid;
    ties on the resulting peak occupancy go to the lowest offset.
    """
    if m_super is None:
        m_super = 2 ** max([k_new] + [d.k for d in existing])
    if 2**k_new > m_super:
        raise ValueError(f"period 2^{k_new} exceeds superframe of {m_super} frames")
    best = None
    for g in range(2**k_new):
        if any(_clashes(k_new, g, d.k, d.g) for d in existing):
            continue
        occ = frame_occupancy(existing, m_super)
        for f in range(g, m_super, 2**k_new):
            occ[f] += 1
        key = (max(occ), g)
        if best is None or key < best:
            best = key
    if best is None:
        raise SlotFull(f"no conflict-free offset for period 2^{k_new}")
    return best[1]


def build_schedule(devices: Iterable[DeviceSchedule], m_super: int) -> dict[int, list[DeviceSchedule]]:
    """Frame index -> devices transmitting in that frame, over one superframe."""
    plan: dict[int, list[DeviceSchedule]] = {f: [] for f in range(m_super)}
    for d in devices:
        for f in range(m_super):
            if is_active_frame(d, f):
                plan[f].append(d)
    return plan
