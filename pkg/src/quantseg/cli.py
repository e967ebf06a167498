"""Command line entry point: ``quantseg run|gen-data|eval|report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, from_dict, load_experiment, load_json
from .data import SynthConfig, read_container, write_dataset
from .harness import PipelineError, load_samples, rerender, run_experiment
from .metrics import evaluate, to_csv

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _cmd_run(args) -> int:
    cfg = load_experiment(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    report = run_experiment(cfg, jobs=args.jobs, seed_offset=args.seed_offset, repeats=args.repeats)
    print(to_csv(report.rows), end="")
    print(f"memory: {report.memory}", file=sys.stderr)
    return 0


def _cmd_gen_data(args) -> int:
    data = load_json(args.synth)
    if isinstance(data, list):
        cfgs = [from_dict(SynthConfig, d, f"[{i}]") for i, d in enumerate(data)]
    else:
        cfgs = [from_dict(SynthConfig, data)]
    samples = load_samples(cfgs if isinstance(data, list) else cfgs[0])
    manifest = write_dataset(samples, args.out)
    print(manifest)
    return 0


def _labels(path: Path):
    t = read_container(path)
    for key in ("labels", "instances"):
        if key in t:
            return t[key].astype("int64")
    raise ConfigError(f"{path}: container has neither a 'labels' nor an 'instances' tensor")


def _cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"directory not found: {d}")
    gt_files = sorted(gt_dir.glob("*.fcnt"))
    if not gt_files:
        raise FileNotFoundError(f"no .fcnt files in {gt_dir}")
    preds, gts = [], []
    for g in gt_files:
        p = pred_dir / g.name
        if not p.is_file():
            raise FileNotFoundError(f"missing prediction for {g.name} in {pred_dir}")
        preds.append(_labels(p))
        gts.append(_labels(g))
    m = evaluate(preds, gts)
    text = to_csv([m.row(args.run_id, "all")])
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def _cmd_report(args) -> int:
    report = rerender(args.run_dir)
    print(to_csv(report.rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quantseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log pipeline progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the SA -> NT pipeline from a JSON config")
    r.add_argument("config")
    r.add_argument("--jobs", type=int, default=1, help="worker cap for ensemble training")
    r.add_argument("--seed-offset", type=int, default=0)
    r.add_argument("--repeats", type=int, default=1)
    r.add_argument("--output-dir", default=None, help="override output_dir from the config")
    r.set_defaults(func=_cmd_run)

    g = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    g.add_argument("synth")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)

    e = sub.add_parser("eval", help="score instance masks against ground truth")
    e.add_argument("pred_dir")
    e.add_argument("gt_dir")
    e.add_argument("--run-id", default="eval")
    e.add_argument("--out", default=None)
    e.set_defaults(func=_cmd_eval)

    rp = sub.add_parser("report", help="re-render report tables of a run directory")
    rp.add_argument("run_dir")
    rp.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PipelineError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
