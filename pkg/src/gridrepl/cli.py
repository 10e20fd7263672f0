"""Command-line front end: ``gridrepl run`` and ``gridrepl sweep``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

from . import metrics
from .activities import GridSimulation
from .scenario import GBPS, ScenarioConfig, ScenarioError, parse_scenario

log = logging.getLogger("gridrepl")

SWEEP_HEADER = ("transatlantic_gbps", "mean_dst_transfer_s", "mean_raw_transfer_s", "transatlantic_utilization")


class CliError(Exception):
    pass


def builtin_scenarios() -> list[str]:
    files = resources.files("gridrepl") / "scenarios"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml"))


def read_scenario(name: str) -> ScenarioConfig:
    """Load a scenario from a path, or a bundled one by name."""
    if os.path.exists(name):
        with open(name, encoding="utf-8") as fh:
            text = fh.read()
    elif name in builtin_scenarios():
        text = (resources.files("gridrepl") / "scenarios" / f"{name}.yaml").read_text(encoding="utf-8")
    else:
        raise CliError(f"scenario not found: {name}")
    try:
        return parse_scenario(text)
    except ScenarioError as exc:
        raise CliError(f"{name}: {exc}") from None


def apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    changes = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise CliError("--seed must be a 64-bit unsigned integer")
        changes["seed"] = args.seed
    if args.duration is not None:
        if not args.duration > 0:
            raise CliError("--duration must be > 0")
        changes["duration"] = args.duration
    if args.agent is not None:
        changes["agent_enabled"] = args.agent
    return dataclasses.replace(cfg, **changes)


def _capacities(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"bad --transatlantic-gbps value: {text!r}") from None
    if not values or any(not (v > 0 and math.isfinite(v)) for v in values):
        raise CliError(f"--transatlantic-gbps needs positive values, got {text!r}")
    return values


def simulate(cfg: ScenarioConfig, out_dir: str) -> dict:
    sim = GridSimulation(cfg).run()
    metrics.write_outputs(sim, out_dir)
    rows = metrics.summarize(sim.flow_log.records)
    ta = sim.net.links[cfg.transatlantic_link]
    direction = f"{ta.endpoints[0]}->{ta.endpoints[1]}"
    result = {
        "transatlantic_gbps": cfg.transatlantic_capacity() / GBPS,
        "mean_dst_transfer_s": metrics.summary_value(rows, "DST"),
        "mean_raw_transfer_s": metrics.summary_value(rows, "RAW"),
        "transatlantic_utilization": metrics.mean_utilization(sim.net, direction, cfg.duration),
        "analyses": [(r.center, r.start, r.end) for r in sim.state.analyses],
    }
    return result


def _sweep_dir(gbps: float) -> str:
    return f"transatlantic_{metrics.fmt(gbps)}gbps"


def cmd_run(args) -> int:
    cfg = apply_overrides(read_scenario(args.scenario), args)
    if args.transatlantic_gbps is not None:
        caps = _capacities(args.transatlantic_gbps)
        if len(caps) != 1:
            raise CliError("run takes a single --transatlantic-gbps value; use sweep for several")
        cfg = cfg.with_transatlantic(caps[0] * GBPS)
    result = simulate(cfg, args.out)
    log.info("wrote %s (mean DST %.3f s, mean RAW %.3f s)", args.out,
             result["mean_dst_transfer_s"], result["mean_raw_transfer_s"])
    return 0


def _sweep_one(job):
    cfg, out = job
    return simulate(cfg, out)


def cmd_sweep(args) -> int:
    base = apply_overrides(read_scenario(args.scenario), args)
    if args.transatlantic_gbps is not None:
        caps = _capacities(args.transatlantic_gbps)
    elif base.sweep:
        caps = [c / GBPS for c in base.sweep]
    else:
        raise CliError("sweep needs --transatlantic-gbps X,Y,... or a 'sweep' list in the scenario")
    jobs = [(base.with_transatlantic(g * GBPS), os.path.join(args.out, _sweep_dir(g))) for g in caps]
    os.makedirs(args.out, exist_ok=True)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]

    analysis_cols = []
    for k, spec in enumerate(base.analysis_centers):
        analysis_cols += [f"analysis_{k}_{spec.center}_start_s", f"analysis_{k}_{spec.center}_end_s",
                          f"analysis_{k}_{spec.center}_duration_s"]
    rows = []
    for res in results:
        row = [res[h] for h in SWEEP_HEADER]
        for k in range(len(base.analysis_centers)):
            if k < len(res["analyses"]):
                _, start, end = res["analyses"][k]
                row += [start, end, None if end is None else end - start]
            else:
                row += [None, None, None]
        rows.append(row)
    metrics.export_csv(rows, SWEEP_HEADER + tuple(analysis_cols), os.path.join(args.out, "sweep_summary.csv"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridrepl", description="T0/T1 data replication simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "simulate one scenario"), ("sweep", "vary the transatlantic capacity")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--scenario", default="paper-default",
                       help="scenario file, or a bundled name (%(default)s, production-only)")
        p.add_argument("--seed", type=int)
        p.add_argument("--duration", type=float, help="simulated seconds")
        agent = p.add_mutually_exclusive_group()
        agent.add_argument("--agent", dest="agent", action="store_true", default=None)
        agent.add_argument("--no-agent", dest="agent", action="store_false")
        p.add_argument("--transatlantic-gbps", help="capacity in Gbps (comma list for sweep)")
        p.add_argument("--out", default="out", help="output directory")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_sweep(args)
    except CliError as exc:
        print(f"gridrepl: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"gridrepl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
