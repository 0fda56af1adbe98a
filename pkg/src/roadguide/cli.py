"""Command-line entry point: ``roadguide simulate | sweep | cba``.

Exit codes: 0 success, 2 configuration or usage error, 3 infeasible
scenario, 4 internal invariant breach (the offending trace is dumped).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .scenario import ConfigError, InfeasibleDensity, ScenarioError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_INTERNAL = 4
MANIFEST_SCHEMA = "manifest.v1"
TRACE_SUMMARY_SCHEMA = "trace_summary.v1"

log = logging.getLogger("roadguide")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="YAML run file")
    common.add_argument("--out", required=True, type=Path, help="output directory")
    common.add_argument("--svg", action=argparse.BooleanOptionalAction, default=True,
                        help="also render SVG charts")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="roadguide", description="Ring-road guided-vehicle simulator and highway CBA.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", parents=[common], help="run one scenario")
    sim.add_argument("--seed", type=int, help="override scenario.seed")

    sw = sub.add_parser("sweep", parents=[common], help="run an experiment grid")
    sw.add_argument("kind", choices=["density", "penetration"])
    sw.add_argument("--seed", type=int, help="override the master seed (scenario.seed)")
    sw.add_argument("--parallel", type=int, default=1, help="max concurrent cells (default 1)")

    sub.add_parser("cba", parents=[common], help="cost-benefit ledgers for both highway kinds")
    return p


def _write(out: Path, name: str, text: str, outputs: list[str]) -> Path:
    path = out / name
    path.write_text(text, encoding="utf-8")
    outputs.append(name)
    return path


def _manifest(out: Path, command: str, cfg: RunConfig, outputs: list[str], **extra) -> None:
    outputs.append("manifest.json")
    doc = {"schema_version": MANIFEST_SCHEMA, "tool_version": __version__, "command": command,
           "seed": cfg.scenario.seed, **extra, "outputs": sorted(outputs),
           "config": cfg.to_dict()}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n",
                                       encoding="utf-8")


def _json_num(v):
    return None if v != v else v


def _with_seed(cfg: RunConfig, seed) -> RunConfig:
    if seed is None:
        return cfg
    try:
        return replace(cfg, scenario=replace(cfg.scenario, seed=seed))
    except ScenarioError as exc:
        raise ConfigError("--seed", str(exc)) from None


def trace_summary_csv(trace) -> str:
    """One row per recorded step: fleet speed statistics, lane changes, events."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema_version", "step", "time_s", "speed_mean_mps", "speed_min_mps",
                "speed_max_mps", "lane_changes", "events_emergency_brake",
                "events_contact_prevented"])
    prev = trace.initial.lane
    ev = trace.events
    brake = np.bincount(ev[ev[:, 3] == 0, 0], minlength=trace.steps + 1) if len(ev) else None
    contact = np.bincount(ev[ev[:, 3] == 1, 0], minlength=trace.steps + 1) if len(ev) else None
    dt = trace.config.dt
    for k in range(trace.steps):
        s = trace.speed[k]
        changes = int(np.sum(trace.lane[k] != prev))
        prev = trace.lane[k]
        t = k + 1
        w.writerow([TRACE_SUMMARY_SCHEMA, t, repr(t * dt), repr(float(s.mean())),
                    repr(float(s.min())), repr(float(s.max())), changes,
                    int(brake[t]) if brake is not None else 0,
                    int(contact[t]) if contact is not None else 0])
    return buf.getvalue()


def cmd_simulate(cfg: RunConfig, out: Path, svg: bool) -> int:
    from .engine import simulate
    from .metrics import METRICS_COLUMNS, TraceInvariantError, check_trace, compute_metrics

    trace = simulate(cfg.scenario)
    outputs: list[str] = []
    try:
        check_trace(trace)
    except TraceInvariantError as exc:
        dump = out / "trace_dump.npz"
        np.savez_compressed(dump, position=trace.position, speed=trace.speed,
                            accel=trace.accel, lane=trace.lane, events=trace.events)
        outputs.append(dump.name)
        _manifest(out, "simulate", cfg, outputs, trace_hash=trace.trace_hash,
                  invariant_breach=str(exc))
        log.error("invariant breach: %s (trace dumped to %s)", exc, dump)
        return EXIT_INTERNAL
    _write(out, "trace_summary.csv", trace_summary_csv(trace), outputs)
    rec = compute_metrics(trace).row()
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})
    _write(out, "metrics.csv", buf.getvalue(), outputs)
    if svg:
        from .plotting import plot_speed_timeseries
        plot_speed_timeseries(trace, out / "speed_timeseries.svg")
        outputs.append("speed_timeseries.svg")
    _manifest(out, "simulate", cfg, outputs, trace_hash=trace.trace_hash)
    log.info("trace hash %s", trace.trace_hash)
    return EXIT_OK


def cmd_sweep(kind: str, cfg: RunConfig, out: Path, parallel: int, svg: bool) -> int:
    from .experiments import density_sweep, penetration_sweep, summary_rows, write_summary_csv

    if parallel < 1:
        raise ConfigError("--parallel", "must be >= 1")
    sw = cfg.sweep
    if kind == "density":
        table = density_sweep(cfg.scenario, sw.vehicle_counts, sw.replications, parallel)
    else:
        table = penetration_sweep(cfg.scenario, sw.penetrations, sw.densities,
                                  sw.replications, parallel)
    outputs: list[str] = []
    _write(out, f"sweep_{kind}.csv", table.to_csv(), outputs)
    write_summary_csv(table, out / f"sweep_{kind}_summary.csv")
    outputs.append(f"sweep_{kind}_summary.csv")
    if svg:
        from .plotting import plot_speed_vs_penetration, plot_ttc_vs_count
        if kind == "density":
            plot_ttc_vs_count(table, out / "ttc_vs_count.svg")
            outputs.append("ttc_vs_count.svg")
        else:
            plot_speed_vs_penetration(table, out / "speed_vs_penetration.svg")
            outputs.append("speed_vs_penetration.svg")
    rho = [{"quantity": r["quantity"], "total_vehicles": r["total_vehicles"] or None,
            "spearman": _json_num(r["spearman"])} for r in summary_rows(table)]
    _manifest(out, f"sweep {kind}", cfg, outputs, rank_correlations=rho)
    return EXIT_OK


def cmd_cba(cfg: RunConfig, out: Path, svg: bool) -> int:
    from .cba import BcrMode, run_cba, summary_csv

    c = cfg.cba
    regular, smart = run_cba(c.profile, c.traffic, c.start_year, c.end_year)
    outputs: list[str] = []
    _write(out, "cba_regular.csv", regular.to_csv(), outputs)
    _write(out, "cba_smart.csv", smart.to_csv(), outputs)
    _write(out, "cba_summary.csv", summary_csv([regular, smart]), outputs)
    if svg:
        from .plotting import plot_cba
        plot_cba(regular, smart, out / "cba.svg")
        outputs.append("cba.svg")
    bcrs = {f"{led.kind.value}_{m.value}": led.bcr(m) for led in (regular, smart) for m in BcrMode}
    _manifest(out, "cba", cfg, outputs, bcr=bcrs)
    for k, v in bcrs.items():
        print(f"{k:28s} {v:.6f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _with_seed(load_config(args.config), getattr(args, "seed", None))
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            code = cmd_simulate(cfg, args.out, args.svg)
        elif args.command == "sweep":
            code = cmd_sweep(args.kind, cfg, args.out, args.parallel, args.svg)
        else:
            code = cmd_cba(cfg, args.out, args.svg)
    except InfeasibleDensity as exc:
        print(f"infeasible scenario: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return code


if __name__ == "__main__":
    sys.exit(main())
