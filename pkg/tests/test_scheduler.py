import pytest

from tdma_lorawan.scheduler import (
    AllocationRejected,
    AllocationRequest,
    DeviceRecord,
    ResourceGrid,
    Scheduler,
    allocate,
    channel_load,
    control_overhead_eta,
    multislot_quota_ok,
    reclaim_expired,
    required_slots,
)


def full_grid():
    return ResourceGrid(8, 20)


def test_capacity_excludes_access_cell():
    assert full_grid().capacity == 159


def test_channel_load_examples():
    assert channel_load(ResourceGrid(1, 20, reserved=()), 0) == 0
    assert channel_load(full_grid(), 0) == pytest.approx(0.05)
    g = ResourceGrid(2, 20, reserved=())
    for s in range(10):
        g.set(1, s, s)
    assert channel_load(g, 1) == 0.5


def test_required_slots():
    assert required_slots(9, 10, 200, False) == 1
    assert required_slots(9, 10, 200, True) == 1
    assert required_slots(12, 10, 200, True, toa_ms=800) == 4
    with pytest.raises(ValueError):
        required_slots(9, 10, 0, True)


def test_quota_examples():
    g = full_grid()
    assert multislot_quota_ok(g, 47, 1, 0.3)
    assert not multislot_quota_ok(g, 47, 2, 0.3)
    assert not multislot_quota_ok(g, 0, 2, 0.0)
    assert multislot_quota_ok(g, 0, 48, 0.3)


def test_control_overhead():
    assert control_overhead_eta(4, 86400) == pytest.approx(9.26e-5, rel=1e-3)
    assert control_overhead_eta(50, 100) == 1
    assert control_overhead_eta(60, 3600) == pytest.approx(0.0333, abs=1e-4)
    with pytest.raises(ValueError):
        control_overhead_eta(0, 10)


def test_first_request_goes_to_channel_one_slot_zero():
    res = allocate(full_grid(), {}, AllocationRequest(1), 0.0)
    assert (res.channel_index, res.slot_indices, res.is_reuse) == (1, (0,), False)


def test_saturation_at_160th_request():
    g, table = full_grid(), {}
    for d in range(159):
        assert not allocate(g, table, AllocationRequest(d), 0.0).is_reuse
    assert allocate(g, table, AllocationRequest(159), 0.0).is_reuse
    assert all(g.cells[0][0] is None for _ in [0])


def test_reuse_disabled_rejects():
    g, table = full_grid(), {}
    for d in range(159):
        allocate(g, table, AllocationRequest(d), 0.0)
    with pytest.raises(AllocationRejected):
        allocate(g, table, AllocationRequest(999), 0.0, reuse=False)


def test_victim_is_lowest_priority_then_longest_idle():
    g, table = full_grid(), {}
    for d in range(159):
        allocate(g, table, AllocationRequest(d, priority=3), 1_000_000.0)
    table[42].priority = 1
    table[42].t_last_ms = 500_000.0
    table[7].priority = 1
    table[7].t_last_ms = 900_000.0
    res = allocate(g, table, AllocationRequest(500, priority=5), 1_000_000.0)
    assert res.is_reuse
    assert (res.channel_index, res.slot_indices) == (table[42].channel_index, table[42].slot_indices)


def test_strict_priority_flag():
    g, table = full_grid(), {}
    for d in range(159):
        allocate(g, table, AllocationRequest(d, priority=3), 0.0)
    with pytest.raises(AllocationRejected):
        allocate(g, table, AllocationRequest(500, priority=3), 0.0, strict_priority=True)


def test_rejoin_releases_previous_cells():
    g, table = full_grid(), {}
    first = allocate(g, table, AllocationRequest(1), 0.0)
    allocate(g, table, AllocationRequest(2), 0.0)
    allocate(g, table, AllocationRequest(1), 0.0)
    assert sum(1 for row in g.cells for x in row if x == 1) == 1
    assert first.channel_index == 1


def test_multislot_request_and_degrade():
    g, table = full_grid(), {}
    res = allocate(g, table, AllocationRequest(1, is_multi=True), 0.0, slot_len_ms=100.0)
    assert len(res.slot_indices) == 2 and not res.degraded
    res = allocate(g, table, AllocationRequest(2, is_multi=True), 0.0, rho_max=0.0, slot_len_ms=100.0)
    assert len(res.slot_indices) == 1 and res.degraded
    with pytest.raises(AllocationRejected):
        allocate(g, table, AllocationRequest(3, is_multi=True), 0.0, rho_max=0.0,
                 slot_len_ms=100.0, quota_mode="reject")


def test_reclaim_examples():
    g, table = full_grid(), {}
    allocate(g, table, AllocationRequest(1), 0.0)
    assert reclaim_expired(g, table, 1000.0, 12_000.0) == 0
    assert reclaim_expired(g, table, 12_001.0, 12_000.0) == 1
    assert all(x is None for row in g.cells for x in row)


def test_reclaim_multislot_atomically():
    g, table = full_grid(), {}
    allocate(g, table, AllocationRequest(1, is_multi=True), 0.0, slot_len_ms=50.0)
    assert table[1].n_slots == 3
    reclaim_expired(g, table, 20_000.0, 12_000.0)
    assert not g.holders()


def test_reclaim_keeps_reused_cell_for_newcomer():
    g = ResourceGrid(1, 2)
    table = {}
    allocate(g, table, AllocationRequest(1), 0.0)
    allocate(g, table, AllocationRequest(2), 5.0)  # shares device 1's cell
    table[2].t_last_ms = 20_000.0
    reclaim_expired(g, table, 20_000.0, 12_000.0)
    assert g.cells[0][1] == 2


def test_scheduler_report_refreshes_and_logs():
    sch = Scheduler(full_grid())
    sch.handle(AllocationRequest(1), 0.0)
    assert sch.handle(AllocationRequest(1, type="report"), 10_000.0) is None
    assert sch.table[1].t_last_ms == 10_000.0
    assert len(sch.log) == 1 and sch.log[0][1] == 1
    with pytest.raises(ValueError):
        sch.handle(AllocationRequest(1, type="bogus"), 0.0)


def test_reserved_cell_cannot_be_set():
    with pytest.raises(ValueError):
        full_grid().set(0, 0, 5)


def test_device_record_cells():
    rec = DeviceRecord(1, 2, (3, 4), 0.0, 2)
    assert rec.cells() == [(2, 3), (2, 4)]
