"""Acceptance suite: every criterion runs at its stated tolerance and prints a verdict line.

Runs are serial (one worker) so the timings hold on a single-core machine.
"""

import math
import random
import statistics
import subprocess
import sys
import time

from tdma_lorawan.config import ScenarioConfig
from tdma_lorawan.engine import capacity_search, cliff_midpoint, mean_pdr, run_seeds, run_simulation, sensitivity_sweep
from tdma_lorawan.exhibits import GUARD_GRID, capacity_base, capacity_bound, provisioned_base, sweep_base, table3_base
from tdma_lorawan.phy import RadioConfig, time_on_air
from tdma_lorawan.scheduler import AllocationRequest, ResourceGrid, Scheduler, control_overhead_eta
from tdma_lorawan.superframe import DeviceSchedule, SlotFull, assign_group_offset, build_schedule

W = 1  # serial execution


# ---------------------------------------------------------------------------
# 1. airtime


def _hand_toa(sf, payload, bw=125_000, preamble=8, crc=1, h=0, cr=1):
    t_sym = 2**sf / bw * 1000
    de = 1 if t_sym > 16 else 0
    n_payload = 8 + max(math.ceil((8 * payload - 4 * sf + 28 + 16 * crc - 20 * h) / (4 * (sf - 2 * de))) * (cr + 4), 0)
    return (preamble + 4.25) * t_sym + n_payload * t_sym


def test_c01_airtime(criterion):
    sf9, sf7 = time_on_air(RadioConfig(sf=9), 10), time_on_air(RadioConfig(sf=7), 10)
    exact = abs(sf9 - 144.384) <= 0.001 and abs(sf7 - 41.216) <= 0.001
    independent = abs(sf9 - _hand_toa(9, 10)) <= 0.001 and abs(sf7 - _hand_toa(7, 10)) <= 0.001
    # published values are whole milliseconds; each must be one of the two neighbouring integers
    rounded = all(math.floor(x) <= ms <= math.ceil(x) for x, ms in ((sf9, 145), (sf7, 41)))
    ok = exact and independent and rounded
    criterion(1, ok, f"SF9 {sf9:.3f} ms, SF7 {sf7:.3f} ms")
    assert ok


# ---------------------------------------------------------------------------
# 2. table III


def test_c02_table3(criterion):
    t0 = time.time()
    seeds = range(1, 11)
    tdma = run_seeds(table3_base().set(protocol="tdma"), seeds, W)
    aloha = run_seeds(table3_base().set(protocol="aloha"), seeds, W)
    p_t, p_a = mean_pdr(tdma), mean_pdr(aloha)
    every = all(t.pdr > a.pdr for t, a in zip(tdma, aloha))
    elapsed = time.time() - t0
    ok = abs(p_t - 0.977) <= 0.02 and abs(p_a - 0.867) <= 0.03 and every and elapsed < 120
    criterion(2, ok, f"TDMA {p_t:.4f}, ALOHA {p_a:.4f}, TDMA ahead every seed: {every}, {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------------------
# 3. ALOHA analytic oracle

N_ORACLE = 500
TX_ORACLE = 20_000


def _oracle_run(protocol, g):
    base = ScenarioConfig()
    unit_ms = base.toa_ms if protocol == "aloha" else base.slot_ms
    interval_s = N_ORACLE * unit_ms / g / 1000.0
    duration_s = TX_ORACLE * interval_s / N_ORACLE
    cfg = base.set(**{
        "protocol": protocol, "n_nodes": N_ORACLE, "net.channels": 1, "link.capture": False,
        "link.sigma_db": 0.0, "link.sensitivity_dbm": -200.0, "traffic.model": "poisson",
        "traffic.interval_s": interval_s, "sim.duration_s": duration_s,
        "sync.sigma_ms": 0.0, "sync.drift_ppm": 0.0, "sync.hw_sigma_ms": 0.0,
    })
    rep = run_simulation(cfg, 1)
    # compare against the load actually offered in this run
    g_hat = rep.sent * unit_ms / (duration_s * 1000.0)
    expected = math.exp(-2 * g_hat) if protocol == "aloha" else math.exp(-g_hat)
    sigma = math.sqrt(expected * (1 - expected) / rep.sent)
    return rep.pdr, expected, sigma


def test_c03_aloha_oracle(criterion):
    t0 = time.time()
    parts, ok = [], True
    for protocol in ("aloha", "slotted_aloha"):
        for g in (0.05, 0.1, 0.5):
            pdr, expected, sigma = _oracle_run(protocol, g)
            z = (pdr - expected) / sigma
            ok &= abs(z) <= 3
            parts.append(f"{protocol}@{g}: z={z:+.2f}")
    elapsed = time.time() - t0
    ok &= elapsed < 60
    criterion(3, ok, ", ".join(parts) + f", {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------------------
# 4. TDMA zero-collision property


def test_c04_zero_collision(criterion):
    t0 = time.time()
    base = provisioned_base(1000.0).set(**{
        "sched.reuse": False, "tdma.guard_ms": 55.0, "tdma.slot_ms": 200.0, "tdma.slots_per_frame": 20,
        "sync.sigma_ms": 2.0, "sync.drift_ppm": 20.0, "sync.interval_s": 600.0, "sync.hw_sigma_ms": 3.0,
    })
    ok, parts = True, []
    for n in (50, 100, 159):
        reps = run_seeds(base.set(n_nodes=n), range(1, 6), W)
        worst = max(r.collisions for r in reps)
        fewest = min(r.sent for r in reps)
        ok &= worst == 0 and fewest >= 10_000 and all(r.infeasible == 0 for r in reps)
        parts.append(f"N={n}: max collisions {worst}, min sent {fewest}")
    elapsed = time.time() - t0
    ok &= elapsed < 120
    criterion(4, ok, "; ".join(parts) + f"; {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------------------
# 5. sensitivity cliff


def _monotone(points, slack=0.01):
    """Non-decreasing in the guard time up to seed noise."""
    return all(b.pdr >= a.pdr - slack for a, b in zip(points, points[1:]))


def test_c05_sensitivity_cliff(criterion):
    t0 = time.time()
    seeds = (1, 2, 3)
    low = sensitivity_sweep(sweep_base(2.0), "guard_time", GUARD_GRID, seeds, W)
    high = sensitivity_sweep(sweep_base(20.0), "guard_time", GUARD_GRID, seeds, W)
    mid_low, mid_high = cliff_midpoint(low), cliff_midpoint(high)
    floor_pdr = min(p.pdr for p in low if p.value >= 10)
    elapsed = time.time() - t0
    ok = (
        floor_pdr >= 0.95
        and _monotone(low) and _monotone(high)
        and mid_low is not None and 3 <= mid_low <= 8
        and mid_high is not None and 30 <= mid_high <= 50
        and elapsed < 300
    )
    criterion(5, ok, f"sigma 2 ms: midpoint {mid_low:.1f} ms, min PDR at guard>=10 ms {floor_pdr:.4f}; "
                     f"sigma 20 ms: midpoint {mid_high:.1f} ms (want 30..50); {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------------------
# 6. capacity ordering


def test_c06_capacity(criterion):
    t0 = time.time()
    seeds = (1, 2, 3)
    caps = {}
    for protocol in ("tdma", "slotted_aloha", "aloha"):
        cfg = capacity_base(4.0).set(protocol=protocol)
        caps[protocol] = capacity_search(cfg, 0.8, capacity_bound(protocol, 4.0), seeds, W)
    elapsed = time.time() - t0
    ordered = caps["tdma"] > caps["slotted_aloha"] > caps["aloha"]
    ok = ordered and 140 <= caps["tdma"] <= 175 and elapsed < 600
    criterion(6, ok, f"TDMA {caps['tdma']} (want 140..175), S-ALOHA {caps['slotted_aloha']}, "
                     f"ALOHA {caps['aloha']}, ordered: {ordered}; {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------------------
# 7. energy ordering


def _tdma_energy_by_hand():
    tx = 50.0 * 144.384 / 1000.0                    # 7.2192 mJ
    sync = 10.0 * 200.0 / 1000.0 * 4.0 / 600.0      # 2 mJ every 600 s, per 4 s packet
    sleep = 0.005 * (4000.0 - 144.384 - 200.0 * 4.0 / 600.0) / 1000.0
    return tx + sync + sleep


def test_c07_energy(criterion):
    t0 = time.time()
    seeds = (1, 2, 3)
    base = provisioned_base(1000.0).set(n_nodes=120)
    energy = {}
    for protocol in ("tdma", "slotted_aloha", "aloha"):
        reps = run_seeds(base.set(protocol=protocol), seeds, W)
        energy[protocol] = statistics.fmean(r.energy_mj_per_success for r in reps)
    hand = _tdma_energy_by_hand()
    ratio = energy["tdma"] / hand
    elapsed = time.time() - t0
    ordered = energy["tdma"] < energy["slotted_aloha"] < energy["aloha"]
    ok = ordered and abs(ratio - 1) <= 0.15 and elapsed < 120
    criterion(7, ok, f"mJ per success: TDMA {energy['tdma']:.3f}, S-ALOHA {energy['slotted_aloha']:.3f}, "
                     f"ALOHA {energy['aloha']:.3f}; TDMA / closed form {ratio:.4f}; {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------------------
# 8. scheduler oracle


class _OracleGrid:
    """Brute-force mirror of the allocation rules on a plain dict of cells."""

    def __init__(self, channels, slots, rho_max, t_release):
        self.C, self.S = channels, slots
        self.rho, self.t_release = rho_max, t_release
        self.cells = {}          # (c, s) -> dev
        self.devs = {}           # dev -> dict(c, slots, t_last, prio, multi)

    def free(self, c, s):
        return (c, s) != (0, 0) and (c, s) not in self.cells

    def release(self, dev):
        d = self.devs.pop(dev)
        for s in d["slots"]:
            if self.cells.get((d["c"], s)) == dev:
                del self.cells[(d["c"], s)]

    def reclaim(self, now):
        for dev in [k for k, d in self.devs.items() if now - d["t_last"] > self.t_release]:
            self.release(dev)

    def load(self, c):
        held = sum(1 for (cc, _) in self.cells if cc == c)
        return (held + (1 if c == 0 else 0)) / self.S

    def request(self, dev, want, prio, now):
        self.reclaim(now)
        if dev in self.devs:
            self.release(dev)
        multi_cells = sum(len(d["slots"]) for d in self.devs.values() if d["multi"])
        n = want
        if want > 1 and (multi_cells + want) / (self.C * self.S) > self.rho:
            n = 1
        options = [
            (self.load(c), c, s)
            for c in range(self.C)
            for s in range(self.S - n + 1)
            if all(self.free(c, s + i) for i in range(n))
        ]
        if options:
            _, c, s = min(options)
            slots = tuple(range(s, s + n))
            reuse = False
        else:
            victims = [(d["prio"], -(now - d["t_last"]), k) for k, d in self.devs.items() if k != dev]
            v = self.devs[min(victims)[2]]
            c = v["c"]
            slots = v["slots"][:n] if len(v["slots"]) >= n else v["slots"][:1]
            reuse = True
        for s in slots:
            self.cells[(c, s)] = dev
        self.devs[dev] = {"c": c, "slots": slots, "t_last": now, "prio": prio, "multi": want > 1 and len(slots) > 1}
        return c, slots, reuse

    def report(self, dev, now):
        self.reclaim(now)
        if dev in self.devs:
            self.devs[dev]["t_last"] = now


def _scheduler_sequence(rng):
    rho, t_release = 0.3, 12_000.0
    sch = Scheduler(ResourceGrid(3, 5), rho_max=rho, slot_len_ms=100.0, t_release_ms=t_release)
    oracle = _OracleGrid(3, 5, rho, t_release)
    now = 0.0
    for _ in range(rng.randint(5, 40)):
        now += rng.choice([0.0, 500.0, 3000.0, 8000.0])
        dev = rng.randrange(20)
        if rng.random() < 0.25:
            sch.handle(AllocationRequest(dev, "report"), now)
            oracle.report(dev, now)
            continue
        multi = rng.random() < 0.3
        prio = rng.randrange(3)
        got = sch.handle(AllocationRequest(dev, "request", 9, 10, multi, prio), now)
        want = oracle.request(dev, 2 if multi else 1, prio, now)
        if (got.channel_index, got.slot_indices, got.is_reuse) != want:
            return f"mismatch dev {dev}: got {(got.channel_index, got.slot_indices, got.is_reuse)}, oracle {want}"
        if sch.grid.cells[0][0] is not None:
            return "reserved cell granted"
        multi_cells = sum(r.n_slots for r in sch.table.values() if r.is_multi)
        if multi_cells / (3 * 5) > rho + 1e-12:
            return f"quota violated: {multi_cells} multi-slot cells"
    return None


def test_c08_scheduler_oracle(criterion):
    t0 = time.time()
    rng = random.Random(2024)
    failures = [f for f in (_scheduler_sequence(rng) for _ in range(1000)) if f]
    elapsed = time.time() - t0
    ok = not failures and elapsed < 30
    criterion(8, ok, f"1000 sequences, {len(failures)} disagreements"
                     + (f" (first: {failures[0]})" if failures else "") + f", {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 9. superframe exhaustiveness


def _fill_slot(rng, k_max):
    devices = []
    for dev in range(200):
        k = rng.randint(0, k_max)
        try:
            g = assign_group_offset(devices, k, 2**k_max)
        except SlotFull:
            continue
        devices.append(DeviceSchedule(dev, k, g, slot=0))
    return devices


def test_c09_superframe(criterion):
    t0 = time.time()
    rng = random.Random(99)
    problems = 0
    for k_max in range(7):
        m = 2**k_max
        for _ in range(60):
            devices = _fill_slot(rng, k_max)
            plan = build_schedule(devices, m)
            counts = {d.dev_id: 0 for d in devices}
            for frame in range(m):
                if len(plan[frame]) > 1:
                    problems += 1
                for d in plan[frame]:
                    counts[d.dev_id] += 1
            problems += sum(1 for d in devices if counts[d.dev_id] != m // 2**d.k)
    elapsed = time.time() - t0
    ok = problems == 0 and elapsed < 30
    criterion(9, ok, f"K=0..6, 420 filled slots, {problems} clashes or miscounts, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 10. control overhead


def test_c10_control_overhead(criterion):
    eta = control_overhead_eta(4, 24 * 3600)
    ok = abs(eta - 9.26e-5) < 0.005e-5 and f"{eta:.1e}" == "9.3e-05"
    criterion(10, ok, f"eta = {eta:.4e}")
    assert ok


# ---------------------------------------------------------------------------
# 11. determinism


def test_c11_determinism(criterion, tmp_path):
    seeds = tmp_path / "seeds.txt"
    seeds.write_text("1\n2\n3\n")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        cmd = [sys.executable, "-m", "tdma_lorawan.cli", "reproduce", "table3",
               "--seeds-file", str(seeds), "--workers", "1", "-o", str(out)]
        subprocess.run(cmd, check=True, capture_output=True)
        outs.append(out)
    files_a = sorted(p.name for p in outs[0].glob("*.csv"))
    files_b = sorted(p.name for p in outs[1].glob("*.csv"))
    same = files_a == files_b and bool(files_a) and all(
        (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files_a)
    criterion(11, same, f"{len(files_a)} CSV files compared byte for byte")
    assert same
