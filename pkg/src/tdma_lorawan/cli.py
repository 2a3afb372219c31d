"""Command-line entry point: run, reproduce, sweep and capacity verbs.

Exit status: 0 when every run succeeded, 1 on configuration or usage errors,
2 when a simulation raised at runtime.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ScenarioConfig, dump_config, load_config
from .engine import (
    capacity_search,
    cliff_midpoint,
    default_workers,
    run_seeds,
    sensitivity_sweep,
    write_reports,
    write_sweep,
    write_trace,
    WORKERS_ENV,
    SWEEP_AXES,
)
from .exhibits import EXHIBITS, reproduce

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
log = logging.getLogger("tdma_lorawan")


def _parse_set(items: Sequence[str]) -> list[tuple[str, str]]:
    out = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}", "<command line>")
        k, v = item.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def _config(path: Optional[str], sets: Sequence[str]) -> ScenarioConfig:
    cfg = load_config(path) if path else ScenarioConfig()
    if sets:
        cfg = cfg.with_overrides(_parse_set(sets), source="--set")
    return cfg


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _read_seeds(args: argparse.Namespace) -> Optional[tuple[int, ...]]:
    text = None
    if getattr(args, "seeds_file", None):
        text = Path(args.seeds_file).read_text()
    elif getattr(args, "seeds", None):
        text = args.seeds
    if text is None:
        return None
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(x) for x in text.replace(",", " ").split())


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args.config, args.set)
    if args.trace:
        cfg = cfg.set(**{"sim.trace": True})
    seeds = _read_seeds(args) or cfg.sim.seeds
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "effective_config.txt", dump_config(cfg))
    reports = run_seeds(cfg, seeds, args.workers)
    for rep in reports:
        write_reports(out / f"run_seed{rep.seed}.csv", [rep])
        if cfg.sim.trace:
            write_trace(out / f"trace_seed{rep.seed}.csv", rep)
    write_reports(out / "summary.csv", reports, aggregate=True)
    for rep in reports:
        if rep.infeasible:
            log.warning("seed %s: %d device(s) could not be allocated (%s)", rep.seed, rep.infeasible, rep.notes)
    mean = sum(r.pdr for r in reports) / len(reports)
    print(f"{cfg.protocol} N={cfg.n_nodes}: mean PDR {mean:.4f} over {len(reports)} seed(s) -> {out}")
    return EXIT_OK


def cmd_reproduce(args: argparse.Namespace) -> int:
    seeds = _read_seeds(args) or tuple(range(1, 11))
    rows = reproduce(args.exhibit, args.out, seeds, args.workers, args.quick, args.duration)
    for r in rows:
        print(f"{r.exhibit:7s} {r.scenario:15s} {r.metric:28s} observed={r.observed:.6g} "
              f"reference={r.reference:.6g} {r.status}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config(args.config, args.set)
    grid = [float(x) for x in args.grid.replace(",", " ").split()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "effective_config.txt", dump_config(cfg))
    pts = sensitivity_sweep(cfg, args.axis, grid, _read_seeds(args), args.workers)
    write_sweep(out / f"sweep_{args.axis}.csv", pts)
    for p in pts:
        print(f"{args.axis}={p.value:g}: PDR {p.pdr:.4f} +- {p.pdr_ci95:.4f}")
    mid = cliff_midpoint(pts)
    print("cliff midpoint: " + ("n/a" if mid is None else f"{mid:.2f}"))
    return EXIT_OK


def cmd_capacity(args: argparse.Namespace) -> int:
    cfg = _config(args.config, args.set)
    if not 0.0 <= args.threshold < 1.0:
        raise ConfigError("--threshold must be in [0, 1)", "<command line>")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "effective_config.txt", dump_config(cfg))
    cap = capacity_search(cfg, args.threshold, args.n_max, _read_seeds(args), args.workers)
    with open(out / "capacity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["protocol", "sf", "interval_s", "threshold", "capacity"])
        w.writerow([cfg.protocol, cfg.phy.sf, cfg.traffic.interval_s, args.threshold, cap])
    print(f"{cfg.protocol}: capacity {cap} devices at PDR >= {args.threshold}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdma-lorawan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp: argparse.ArgumentParser, config: bool = True) -> None:
        if config:
            sp.add_argument("config", nargs="?", help="key = value scenario file (defaults if omitted)")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override one config key; repeatable")
        sp.add_argument("-o", "--out", default="out", help="output directory")
        sp.add_argument("--seeds", help="seed list, e.g. 1,2,3 or 1..10")
        sp.add_argument("--seeds-file", help="file holding a seed list")
        sp.add_argument("--workers", type=int, default=None,
                        help=f"parallel runs (default ${WORKERS_ENV} or CPU count)")

    r = sub.add_parser("run", help="run every seed of one scenario")
    common(r)
    r.add_argument("--trace", action="store_true", help="also write per-transmission trace CSVs")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("reproduce", help="regenerate a table or figure and compare with reference values")
    rp.add_argument("exhibit", choices=EXHIBITS)
    common(rp, config=False)
    rp.add_argument("--quick", action="store_true", help="reduced grids for smoke testing")
    rp.add_argument("--duration", type=float, default=None, help="override simulated seconds per run")
    rp.set_defaults(func=cmd_reproduce)

    sw = sub.add_parser("sweep", help="PDR against sync error or guard time")
    common(sw)
    sw.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sw.add_argument("--grid", required=True, help="comma-separated axis values (ms)")
    sw.set_defaults(func=cmd_sweep)

    cp = sub.add_parser("capacity", help="largest N meeting a PDR threshold")
    common(cp)
    cp.add_argument("--threshold", type=float, default=0.8)
    cp.add_argument("--n-max", type=int, default=400)
    cp.set_defaults(func=cmd_capacity)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers is None:
        args.workers = default_workers()
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any simulator fault maps to the runtime status
        log.exception("simulation failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
