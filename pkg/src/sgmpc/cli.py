"""Command line: ``sgmpc run | metrics | plot | default-config``.

Exit codes: 0 on success, 2 when any controller is infeasible at the
first step, 1 on usage or input errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import ExperimentConfig, dump_default_config, load_config

log = logging.getLogger("sgmpc")
EXIT_INFEASIBLE = 2


def _run(args) -> int:
    path = Path(args.config) if args.config else None
    cfg = load_config(path) if path else ExperimentConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["output_dir"] = args.out
    if args.controller:
        updates["controllers"] = args.controller
    if args.n is not None:
        updates["n_trajectories"] = args.n
    if args.workers is not None:
        updates["workers"] = args.workers
    if updates:
        cfg = ExperimentConfig.model_validate({**cfg.resolved(), **updates})
    base = path.parent if path else Path.cwd()
    out = Path(cfg.output_dir)
    if not out.is_absolute() and args.out is None and path is not None:
        out = base / out
    result = harness.run_batch(cfg, out, base_dir=base)
    reports = harness.reports_for_batch(result)
    harness.emit_outputs(result, reports, out)
    for b in result.bundles:
        if not b.feasible:
            log.warning("%s infeasible at the first step (%s)", b.name, b.failure)
    sys.stdout.write(harness.metrics_csv(reports))
    return EXIT_INFEASIBLE if any(not b.feasible for b in result.bundles) else 0


def _metrics(args) -> int:
    reports = harness.metrics_from_records(args.records)
    text = harness.metrics_csv(reports)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_INFEASIBLE if harness.any_infeasible_at_start(reports) else 0


def _plot(args) -> int:
    from .plots import precision_svg, trajectory_svg

    data = harness.load_records(args.records)
    out = Path(args.out) if args.out else Path(args.records).parent
    out.mkdir(parents=True, exist_ok=True)
    schedules = {name: data.schedule(name) for name in data.controllers}
    trajectory_svg(data.records, schedules, out / "plot.svg", run_index=args.run)
    precision_svg(harness.metrics_from_records(args.records), out / "precision.svg")
    return 0


def _default_config(args) -> int:
    sys.stdout.write(dump_default_config())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgmpc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a Monte-Carlo batch from a YAML config")
    r.add_argument("config", nargs="?", help="YAML config (defaults when omitted)")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory")
    r.add_argument("--controller", action="append",
                   choices=["ours", "zero_mean_subgaussian", "gaussian", "robust", "position"],
                   help="controller kind; repeat for several (overrides the config)")
    r.add_argument("-n", type=int, help="number of trajectories")
    r.add_argument("--workers", type=int)
    r.set_defaults(func=_run)

    m = sub.add_parser("metrics", help="recompute metrics.csv from records.ndjson")
    m.add_argument("records")
    m.add_argument("--out", help="write the CSV here instead of stdout")
    m.set_defaults(func=_metrics)

    pl = sub.add_parser("plot", help="draw plot.svg and precision.svg from records.ndjson")
    pl.add_argument("records")
    pl.add_argument("--out", help="output directory (default: next to the records)")
    pl.add_argument("--run", type=int, help="trajectory index to draw (default: first)")
    pl.set_defaults(func=_plot)

    d = sub.add_parser("default-config", help="print the default configuration as YAML")
    d.set_defaults(func=_default_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
