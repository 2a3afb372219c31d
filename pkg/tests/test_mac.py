import random

import pytest

from tdma_lorawan.mac import (
    Action,
    ConfigurationError,
    CsmaConfig,
    DeviceFsmState,
    ProtocolViolation,
    State,
    TdmaPlan,
    csma_attempt,
    fsm_step,
    next_slot_emission_local,
    next_tx_time_pure_aloha,
    next_tx_time_slotted_aloha,
    tdma_tx_window,
)
from tdma_lorawan.superframe import DeviceSchedule
from tdma_lorawan.timesync import ClockModel, local_time


def plan(slot=3, k=0, g=0, **kw):
    return TdmaPlan(DeviceSchedule(1, k, g, slot), **kw)


def synced_sleep():
    return DeviceFsmState(state=State.SLEEP, joined=True, allocated=True, synced=True)


def test_aloha_timing():
    assert next_tx_time_pure_aloha(1000) == 1000
    assert next_tx_time_slotted_aloha(1010, 200) == 1200
    assert next_tx_time_slotted_aloha(1200, 200) == 1200


def test_slot_fits_with_spare():
    p = plan(guard_ms=55.0)
    assert p.slot_ms - p.guard_ms - p.toa_ms == pytest.approx(0.616, abs=1e-9)


def test_airtime_overflowing_slot_is_rejected():
    with pytest.raises(ConfigurationError):
        plan(guard_ms=60.0)


def test_tx_window_slot_zero():
    assert tdma_tx_window(plan(slot=0), ClockModel(), 0.0) == (0.0, 200.0)
    assert tdma_tx_window(plan(slot=0, k=1, g=1), ClockModel(), 0.0) is None


def test_emission_is_inside_guarded_slot():
    p = plan(slot=3)
    t = next_slot_emission_local(p, 0.0)
    assert t == 3 * 200 + 27.5
    assert next_slot_emission_local(p, t) == t
    assert next_slot_emission_local(p, t + 0.1) == t + 4000


def test_drifted_clock_stays_in_slot():
    p = plan(slot=3)
    clock = ClockModel(drift_ppm=20, last_sync_true_time_ms=-600_000)
    emit_local = next_slot_emission_local(p, local_time(clock, 0.0))
    emit_true = clock.true_time_of(emit_local)
    # a clock 12 ms ahead reaches the local instant 12 ms early in true time
    assert emit_true == pytest.approx((627.5 - 12.0) / (1 + 20e-6), abs=1e-6)
    assert 600.0 <= emit_true and emit_true + p.toa_ms <= 800.0


def test_emission_respects_group_offset():
    p = plan(slot=0, k=2, g=3)
    assert next_slot_emission_local(p, 0.0) == 3 * 4000 + 27.5


def test_data_ready_in_sleep_schedules_wakeup():
    f, acts = fsm_step(synced_sleep(), "data_ready", ClockModel(), plan(), 100.0)
    assert f.state == State.WAIT and acts == [Action.SCHEDULE_WAKEUP]
    assert f.wakeup_local_ms == 627.5


def test_send_then_sleep():
    f = DeviceFsmState(state=State.SEND, joined=True, allocated=True, synced=True)
    f, acts = fsm_step(f, "tx_done")
    assert f.state == State.SLEEP and acts == []


def test_sync_age_in_sleep():
    f, acts = fsm_step(synced_sleep(), "sync_age_expired")
    assert f.state == State.SYNC and acts == [Action.RETUNE_SYNC]


def test_join_sequence():
    f = DeviceFsmState()
    f, acts = fsm_step(f, "power_on")
    assert acts == [Action.TRANSMIT_ACCESS]
    f, acts = fsm_step(f, "join_granted")
    assert f.state == State.REQ
    f, acts = fsm_step(f, "alloc_granted")
    assert f.state == State.SYNC and acts == [Action.RETUNE_SYNC]
    f, acts = fsm_step(f, "sync_done")
    assert f.state == State.SLEEP and f.synced


def test_unsynced_data_is_dropped():
    _, acts = fsm_step(DeviceFsmState(), "data_ready")
    assert acts == [Action.DROP_STALE]


def test_holdover_then_suspend():
    f = DeviceFsmState(state=State.SYNC, joined=True, allocated=True, synced=True, resume=State.SLEEP)
    for n in range(1, 3):
        f, acts = fsm_step(f, "sync_timeout", max_sync_failures=3)
        assert not f.suspended and f.sync_failures == n
        f = DeviceFsmState(**{**f.__dict__, "state": State.SYNC})
    f, acts = fsm_step(f, "sync_timeout", max_sync_failures=3)
    assert f.suspended and Action.SUSPEND in acts


def test_illegal_transitions_raise():
    with pytest.raises(ProtocolViolation):
        fsm_step(synced_sleep(), "tx_done")
    with pytest.raises(ProtocolViolation):
        fsm_step(synced_sleep(), "no_such_event")


def test_csma_idle_channel():
    res = csma_attempt(0.0, CsmaConfig(), lambda t: -130.0, sf=7, rng=random.Random(1))
    assert res.t_tx_ms == 2.0 and not res.gave_up and res.energy_listen_ms == 2.0


def test_csma_busy_channel_gives_up():
    cfg = CsmaConfig()
    res = csma_attempt(0.0, cfg, lambda t: -80.0, sf=9, rng=random.Random(1))
    assert res.gave_up and res.stages == 8 and res.t_tx_ms is None
    assert res.energy_listen_ms == 8 * 8.0


def test_csma_hidden_interferer_is_not_sensed():
    # an interferer below the CCA threshold at the sensor is invisible to CAD
    res = csma_attempt(0.0, CsmaConfig(), lambda t: -115.0, sf=9, rng=random.Random(1))
    assert res.t_tx_ms == 8.0


def test_late_emission_only_when_frame_still_fits():
    p = plan(slot=0)
    assert next_slot_emission_local(p, 4036.0, allow_late=True) == 4036.0
    assert next_slot_emission_local(p, 4036.0) == 8027.5
    # too late: the frame would spill into the next slot
    assert next_slot_emission_local(p, 4060.0, allow_late=True) == 8027.5
    # never earlier than the nominal instant
    assert next_slot_emission_local(p, 4010.0, allow_late=True) == 4027.5


def test_resume_after_resync_uses_rest_of_slot():
    f = DeviceFsmState(state=State.SYNC, joined=True, allocated=True, synced=True, resume=State.WAIT, pending=True)
    f, acts = fsm_step(f, "sync_done", ClockModel(), plan(slot=0), 4036.0)
    assert f.state == State.WAIT and f.wakeup_local_ms == 4036.0
