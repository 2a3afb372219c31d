"""Out-of-band beacon synchronisation and device clock modelling."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace
from typing import Callable, Optional

DEFAULT_ENCODE_MS = 0.2
DEFAULT_BEACON_TOA_MS = 36.0
DUTY_CYCLE_LIMIT = 0.01


def truncated_gauss(rng: random.Random, sigma: float, k: float = 3.0) -> float:
    """Zero-mean normal draw rejected outside +-k*sigma."""
    if sigma <= 0:
        return 0.0
    bound = k * sigma
    while True:
        x = rng.gauss(0.0, sigma)
        if -bound <= x <= bound:
            return x


@dataclass(frozen=True)
class ClockModel:
    """Local clock of an end device.

    ``offset_ms`` is the local-minus-true offset at ``last_sync_true_time_ms``;
    afterwards it grows linearly at ``drift_ppm``.
    """

    offset_ms: float = 0.0
    drift_ppm: float = 0.0
    last_sync_true_time_ms: float = 0.0
    hw_jitter_sigma_ms: float = 0.0

    def offset_at(self, true_time_ms: float) -> float:
        elapsed = true_time_ms - self.last_sync_true_time_ms
        return self.offset_ms + self.drift_ppm * 1e-6 * elapsed

    def true_time_of(self, local_ms: float) -> float:
        """Inverse of :func:`local_time`."""
        rate = self.drift_ppm * 1e-6
        return (local_ms - self.offset_ms + rate * self.last_sync_true_time_ms) / (1.0 + rate)

    def resynced(self, true_time_ms: float, residual_ms: float) -> ClockModel:
        return replace(self, offset_ms=residual_ms, last_sync_true_time_ms=true_time_ms)


def local_time(clock: ClockModel, true_time_ms: float) -> float:
    return true_time_ms + clock.offset_at(true_time_ms)


def reconstruct_timestamp(
    t1_ms: float, toa_ms: float, t_decode_ms: float, t_encode_ms: float = DEFAULT_ENCODE_MS
) -> float:
    """Receiver-side estimate of true time when a beacon stamped ``t1_ms`` is decoded.

    Propagation and interrupt latency are neglected.
    """
    if min(t1_ms, toa_ms, t_decode_ms, t_encode_ms) < 0:
        raise ValueError("timestamp components must be non-negative")
    return t1_ms + t_encode_ms + toa_ms + t_decode_ms


@dataclass(frozen=True)
class SyncBudget:
    sync_err_max_ms: float
    drift_max_ms: float
    hw_max_ms: float

    def __post_init__(self) -> None:
        if min(self.sync_err_max_ms, self.drift_max_ms, self.hw_max_ms) < 0:
            raise ValueError("budget terms must be non-negative")

    @classmethod
    def from_sigmas(
        cls,
        sync_sigma_ms: float,
        drift_ppm: float,
        resync_interval_s: float,
        hw_sigma_ms: float,
        k: float = 3.0,
    ) -> SyncBudget:
        """Worst case for errors truncated at ``k`` sigma and linear drift."""
        return cls(
            sync_err_max_ms=k * sync_sigma_ms,
            drift_max_ms=abs(drift_ppm) * 1e-6 * resync_interval_s * 1000.0,
            hw_max_ms=k * hw_sigma_ms,
        )


def min_guard_time(budget: SyncBudget) -> float:
    return 2.0 * (budget.sync_err_max_ms + budget.drift_max_ms + budget.hw_max_ms)


def beacon_duty_cycle(toa_ms: float, interval_ms: float) -> float:
    if interval_ms <= 0:
        raise ValueError("beacon interval must be positive")
    return toa_ms / interval_ms


def exceeds_duty_limit(ratio: float, limit: float = DUTY_CYCLE_LIMIT) -> bool:
    return ratio > limit


@dataclass(frozen=True)
class SyncBeacon:
    tx_true_time_ms: float
    toa_ms: float = DEFAULT_BEACON_TOA_MS
    channel: str = "oob"
    payload_bytes: int = 4

    @property
    def end_ms(self) -> float:
        return self.tx_true_time_ms + self.toa_ms


@dataclass
class BeaconSchedule:
    """Periodic beacons starting at ``first_ms``; ``interval_ms=None`` means silent.

    ``lost`` overrides the Bernoulli loss model when given: it is called with
    the beacon transmit time and returns True if that beacon is missed.
    """

    interval_ms: Optional[float] = 4000.0
    toa_ms: float = DEFAULT_BEACON_TOA_MS
    first_ms: float = 0.0
    loss_prob: float = 0.0
    lost: Optional[Callable[[float], bool]] = None

    def next_beacon(self, t_ms: float) -> Optional[SyncBeacon]:
        """First beacon transmitted at or after ``t_ms``."""
        if self.interval_ms is None:
            return None
        k = max(0, math.ceil((t_ms - self.first_ms) / self.interval_ms - 1e-9))
        return SyncBeacon(self.first_ms + k * self.interval_ms, self.toa_ms)

    def is_lost(self, beacon: SyncBeacon, rng: Optional[random.Random]) -> bool:
        if self.lost is not None:
            return self.lost(beacon.tx_true_time_ms)
        if self.loss_prob <= 0:
            return False
        if self.loss_prob >= 1:
            return True
        return (rng or random).random() < self.loss_prob


@dataclass(frozen=True)
class SyncResult:
    synced: bool
    clock: ClockModel
    wait_ms: float
    retry_after_ms: float = 0.0
    beacon: Optional[SyncBeacon] = None


def run_sync_attempt(
    clock: ClockModel,
    beacons: BeaconSchedule,
    t_start_ms: float,
    t_timeout_ms: float,
    rng: Optional[random.Random] = None,
    sync_sigma_ms: float = 2.0,
    retry_ms: Optional[float] = None,
) -> SyncResult:
    """Listen on the sync channel from ``t_start_ms`` for at most ``t_timeout_ms``.

    On success the clock offset is replaced by a truncated-normal residual and
    drift accumulation restarts at the beacon's decode time. On timeout the
    caller should retry after ``retry_after_ms`` (a quarter beacon period by
    default).
    """
    if retry_ms is None:
        retry_ms = (beacons.interval_ms or 4000.0) / 4.0
    deadline = t_start_ms + t_timeout_ms
    beacon = beacons.next_beacon(t_start_ms)
    while beacon is not None and beacon.end_ms <= deadline:
        if not beacons.is_lost(beacon, rng):
            residual = truncated_gauss(rng or random.Random(), sync_sigma_ms)
            return SyncResult(
                synced=True,
                clock=clock.resynced(beacon.end_ms, residual),
                wait_ms=beacon.end_ms - t_start_ms,
                beacon=beacon,
            )
        beacon = beacons.next_beacon(beacon.tx_true_time_ms + beacons.interval_ms)
    return SyncResult(synced=False, clock=clock, wait_ms=t_timeout_ms, retry_after_ms=retry_ms)
