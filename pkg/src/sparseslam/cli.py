"""Command-line interface.

    sparseslam run --log PATH --format carmen|crazyflie|synthetic --out DIR
    sparseslam evaluate --traj PATH --relations PATH
    sparseslam sweep --axis kernel --values none,k3,k5,k7 --log PATH ...

Exit codes: 0 success, 1 fatal input error, 2 internal failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data_io, pipeline, synthetic
from .data_io import DataError, RunConfig


def _load_scans(args, cfg):
    if args.format == "carmen":
        return list(data_io.parse_carmen_log(args.log, fov=cfg.carmen_fov)), None
    if args.format == "crazyflie":
        return list(data_io.parse_crazyflie_csv(args.log)), None
    if args.format == "synthetic":
        spec = synthetic.SyntheticSpec.from_file(args.log) if args.log \
            else synthetic.SyntheticSpec()
        run = synthetic.generate(spec)
        return run.scans, run
    raise DataError(f"unknown format {args.format!r}")


def _build_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        "beams_per_scan": args.beams,
        "range_cap": args.range_cap,
        "multiscan_size": args.multiscan,
        "cell_size": args.cell,
        "kernel": args.kernel,
        "deterministic_mode": True if args.deterministic else None,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**overrides) if overrides else cfg


def _add_run_flags(p):
    p.add_argument("--log", help="input log path (optional for synthetic)")
    p.add_argument("--format", default="carmen",
                   choices=["carmen", "crazyflie", "synthetic"])
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--beams", type=int, default=None)
    p.add_argument("--range-cap", type=float, default=None)
    p.add_argument("--multiscan", type=int, default=None)
    p.add_argument("--cell", type=float, default=None)
    p.add_argument("--kernel", choices=["none", "k3", "k5", "k7"],
                   default=None)
    p.add_argument("--deterministic", action="store_true")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sparseslam", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run SLAM on a log")
    _add_run_flags(p_run)
    p_run.add_argument("--out", required=True, help="output directory")

    p_eval = sub.add_parser("evaluate", help="trajectory error metrics")
    p_eval.add_argument("--traj", required=True)
    p_eval.add_argument("--relations", required=True)

    p_sweep = sub.add_parser("sweep", help="parameter sweep")
    _add_run_flags(p_sweep)
    p_sweep.add_argument("--axis", required=True,
                         choices=["kernel", "multiscan", "beams"])
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values")
    p_sweep.add_argument("--relations", help="ground-truth relations file")
    p_sweep.add_argument("--out", help="write the sweep table here")

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")

    try:
        return _dispatch(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        logging.exception("internal failure")
        return 2


def _dispatch(args) -> int:
    if args.command == "run":
        cfg = _build_config(args)
        if args.format != "synthetic" and not args.log:
            raise DataError("--log is required for carmen/crazyflie input")
        scans, synth = _load_scans(args, cfg)
        result = pipeline.run(cfg, scans, out_dir=args.out)
        if synth is not None:
            rels = synthetic.relations_from_ground_truth(synth)
            synthetic.write_relations(rels, Path(args.out) / "relations.txt")
            data_io.write_trajectory(
                [(synth.timestamps[i], synth.gt_poses[i])
                 for i in range(len(synth.gt_poses))],
                Path(args.out) / "ground_truth.txt")
            report = pipeline.evaluate(result.trajectory, rels)
            print(data_io.format_metrics(report.as_dict()), end="")
        print(f"processed {len(scans)} scans, "
              f"{len(result.loop_constraints)} loop closures, "
              f"frontend mean {result.stats.frontend_mean * 1e3:.2f} ms")
        return 0

    if args.command == "evaluate":
        relations = synthetic.read_relations(args.relations)
        report = pipeline.evaluate(args.traj, relations)
        print(data_io.format_metrics(report.as_dict()), end="")
        return 0

    if args.command == "sweep":
        cfg = _build_config(args)
        scans, synth = _load_scans(args, cfg)
        if args.relations:
            relations = synthetic.read_relations(args.relations)
        elif synth is not None:
            relations = synthetic.relations_from_ground_truth(synth)
        else:
            raise DataError("--relations is required for non-synthetic input")
        values = [v if args.axis == "kernel" else int(v)
                  for v in args.values.split(",")]
        rows = pipeline.sweep(cfg, args.axis, values, scans, relations)
        lines = []
        for value, report, err in rows:
            if report is None:
                lines.append(f"{value} failed {err}")
            else:
                lines.append(f"{value} trans {report.trans_mean:.4f} "
                             f"rot_deg {report.rot_mean_deg:.4f}")
        table = "\n".join(lines) + "\n"
        print(table, end="")
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(table)
        return 0
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
