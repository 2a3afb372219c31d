import random

import pytest

from tdma_lorawan.timesync import (
    BeaconSchedule,
    ClockModel,
    SyncBudget,
    beacon_duty_cycle,
    exceeds_duty_limit,
    local_time,
    min_guard_time,
    reconstruct_timestamp,
    run_sync_attempt,
    truncated_gauss,
)


def test_reconstruct_timestamp():
    assert reconstruct_timestamp(0, 36, 0.176, 0.2) == pytest.approx(36.376)
    assert reconstruct_timestamp(0, 0, 0, 0) == 0
    assert reconstruct_timestamp(10000, 144.384, 1.487, 0.2) == pytest.approx(10146.071)
    with pytest.raises(ValueError):
        reconstruct_timestamp(-1, 36, 0.1)


def test_drift_accumulates_linearly():
    assert local_time(ClockModel(drift_ppm=20), 600_000) - 600_000 == pytest.approx(12.0)
    assert local_time(ClockModel(), 1234.5) == 1234.5
    assert local_time(ClockModel(drift_ppm=-20), 3_600_000) - 3_600_000 == pytest.approx(-72.0)


def test_true_time_of_inverts_local_time():
    clock = ClockModel(offset_ms=3.5, drift_ppm=17, last_sync_true_time_ms=50_000)
    for t in (0.0, 50_000.0, 987_654.3):
        assert clock.true_time_of(local_time(clock, t)) == pytest.approx(t)


@pytest.mark.parametrize("terms, guard", [((4, 12, 0), 32), ((0, 0, 0), 0), ((2, 12, 3), 34)])
def test_min_guard_time(terms, guard):
    assert min_guard_time(SyncBudget(*terms)) == pytest.approx(guard)


def test_budget_from_sigmas():
    b = SyncBudget.from_sigmas(2, 20, 600, 3)
    assert (b.sync_err_max_ms, b.drift_max_ms, b.hw_max_ms) == pytest.approx((6, 12, 9))
    assert min_guard_time(b) == pytest.approx(54)


def test_beacon_duty_cycle():
    assert beacon_duty_cycle(36, 4000) == pytest.approx(0.009)
    assert beacon_duty_cycle(0, 1234) == 0
    sf7 = beacon_duty_cycle(41.216, 4000)
    assert sf7 == pytest.approx(0.0103, abs=1e-4)
    assert exceeds_duty_limit(sf7)
    assert not exceeds_duty_limit(0.009)


def test_sync_waits_for_next_beacon():
    res = run_sync_attempt(ClockModel(offset_ms=50), BeaconSchedule(4000), 100, 4100, random.Random(1), 0)
    assert res.synced
    assert res.wait_ms <= 4000 + 36
    assert res.beacon.end_ms == 4036
    assert res.clock.offset_ms == 0 and res.clock.last_sync_true_time_ms == 4036


def test_sync_fails_without_beacons():
    res = run_sync_attempt(ClockModel(), BeaconSchedule(None), 100, 4100)
    assert not res.synced and res.wait_ms == 4100


def test_lost_beacon_then_retry_succeeds():
    beacons = BeaconSchedule(4000, lost=lambda t: t < 5000)
    first = run_sync_attempt(ClockModel(), beacons, 100, 4100, retry_ms=1000)
    assert not first.synced and first.retry_after_ms == 1000
    second = run_sync_attempt(first.clock, beacons, 100 + 4100 + 1000, 4100, random.Random(0))
    assert second.synced and second.beacon.tx_true_time_ms == 8000


def test_truncated_gauss_respects_bound():
    rng = random.Random(7)
    draws = [truncated_gauss(rng, 2.0) for _ in range(5000)]
    assert max(abs(x) for x in draws) <= 6.0
    assert truncated_gauss(rng, 0.0) == 0.0
