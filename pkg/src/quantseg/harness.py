"""Two-stage pipeline: suggestive annotation, then segmentation training and evaluation."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, to_dict
from .data import SynthConfig, generate_synthetic, read_dataset, split_dataset, write_container
from .metrics import evaluate, prediction_to_instances, to_csv
from .model import ModelSpec, build_model, forward
from .quant import QuantSpec, deployed_bits, deployed_bytes, memory_ratio, quantized_weights
from .rng import Rng
from .suggest import suggest_loop
from .training import StepLR, train

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage


class _stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


@dataclass
class Report:
    run_id: str
    rows: list[dict]
    memory: dict
    provenance: dict
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"run_id": self.run_id, "rows": self.rows, "memory": self.memory,
             "provenance": self.provenance, "extras": self.extras},
            indent=2, sort_keys=True, allow_nan=True,
        ) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Report":
        d = json.loads(text)
        return cls(d["run_id"], d["rows"], d["memory"], d["provenance"], d.get("extras", {}))


def load_samples(dataset):
    """Samples from a manifest path, one SynthConfig, or a list of them."""
    if isinstance(dataset, str):
        return read_dataset(dataset)
    if isinstance(dataset, SynthConfig):
        return generate_synthetic(dataset)
    samples = []
    for j, cfg in enumerate(dataset):
        part = generate_synthetic(cfg)
        prefix_len = len(part[0].id.split("-")[0]) if part else 0
        for s in part:
            s.id = f"{s.id[:prefix_len]}{j}{s.id[prefix_len:]}"
        samples.extend(part)
    return samples


def _train_segmenter(args):
    spec, seed, samples, nt = args
    model = build_model(ModelSpec(**{**vars(spec), "seed": seed}))
    model, curve = train(model, samples, nt.epochs, StepLR(nt.lr, nt.lr_drop_epoch), nt.quant, rng=Rng(seed))
    return model, curve


def ensemble_predict(models, image, quant: QuantSpec):
    """Pixelwise mean of member contour/object probabilities."""
    contour, obj = [], []
    for m in models:
        p = forward(m, image, quantized_weights(m, quant) or None)
        contour.append(p.contour)
        obj.append(p.object)
    return np.mean(contour, axis=0), np.mean(obj, axis=0)


def _round(x):
    x = float(x)
    return x if math.isnan(x) else round(x, 10)


def run_pipeline(cfg: ExperimentConfig, jobs: int = 1, seed_offset: int = 0, out_dir=None,
                 samples=None, label: str | None = None) -> Report:
    """Run SA -> NT -> evaluation for one configuration and write its outputs.

    ``seed_offset`` shifts every member seed (SA and NT) and the bootstrap
    seed; the data itself is unaffected.
    """
    cfg = copy.deepcopy(cfg)
    cfg.validate()
    sa = cfg.sa
    sa.seeds = [s + seed_offset for s in sa.member_seeds()]
    sa.bootstrap_seed += seed_offset
    cfg.nt.seeds = [s + seed_offset for s in cfg.nt.seeds]
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    # the output location is not part of the experiment's identity
    ident = copy.deepcopy(cfg)
    ident.output_dir = ""
    chash = config_hash(ident)
    run_id = hashlib.sha1(chash.encode()).hexdigest()[:12]
    if label:
        run_id = f"{run_id}-{label}"

    with _stage("data"):
        if samples is None:
            samples = load_samples(cfg.dataset)
        pool, _val, test = split_dataset(samples, cfg.split, cfg.split_seed)
        if not pool or not test:
            raise ValueError(f"split produced {len(pool)} training and {len(test)} test samples")

    with _stage("suggest"):
        with open(out / "audit.jsonl", "w") as audit:
            suggested, rounds = suggest_loop(pool, sa, Rng(sa.bootstrap_seed), cfg.model, jobs, audit)
        if not suggested:
            raise ValueError("suggestive annotation produced no samples")
        train_set = sorted(suggested, key=lambda s: s.id)

    with _stage("train"):
        work = [(cfg.model, seed, train_set, cfg.nt) for seed in cfg.nt.seeds]
        if jobs > 1 and len(work) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                trained = list(ex.map(_train_segmenter, work))
        else:
            trained = [_train_segmenter(w) for w in work]
        models = [m for m, _ in trained]
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        for i, m in enumerate(models):
            write_container(ckpt / f"segmenter_{i}.fcnt", m.params)

    with _stage("evaluate"):
        parts: dict[str, tuple[list, list]] = {}
        for s in test:
            contour, obj = ensemble_predict(models, s.image, cfg.nt.quant)
            pred = prediction_to_instances(obj, contour, cfg.eval.threshold, cfg.eval.min_object_px)
            gt = s.instances if not cfg.eval.min_object_px else prediction_to_instances(
                s.object_gt, None, 0.5, cfg.eval.min_object_px)
            for key in (s.part, "all"):
                parts.setdefault(key, ([], []))
                parts[key][0].append(pred)
                parts[key][1].append(gt)
        rows = []
        for key in sorted(parts, key=lambda k: (k == "all", k)):
            m = evaluate(*parts[key])
            rows.append({k: _round(v) if isinstance(v, float) else v for k, v in m.row(run_id, key).items()})

    with _stage("memory"):
        base, quant, _ = memory_ratio(models[0], cfg.nt.quant)
        memory = {
            "baseline_bytes": base,
            "quantized_bytes": quant,
            "ratio": _round(base / quant),
            "baseline_bits": deployed_bits(models[0], QuantSpec(), include_biases=False),
            "quantized_bits": deployed_bits(models[0], cfg.nt.quant, include_biases=False),
            "bias_bytes": deployed_bytes(models[0], QuantSpec()) - base,
            "method": cfg.nt.quant.method,
            "bits": cfg.nt.quant.bits,
        }

    report = Report(
        run_id=run_id,
        rows=rows,
        memory=memory,
        provenance={
            "config_hash": chash,
            "sa_seeds": sa.seeds,
            "nt_seeds": cfg.nt.seeds,
            "seed_offset": seed_offset,
            "config": to_dict(ident),
        },
        extras={
            "suggested_ids": [s.id for s in suggested],
            "mean_uncertainty_per_round": [_round(np.mean(list(r.uncertainty_scores.values()))) for r in rounds],
            "nt_final_loss": [_round(c[-1]) if c else None for _, c in trained],
        },
    )
    write_report(report, out)
    return report


def write_report(report: Report, out_dir) -> None:
    out = Path(out_dir)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(to_csv(report.rows))


def rerender(run_dir) -> Report:
    """Rewrite report.csv/report.json of a run directory from its report.json."""
    run_dir = Path(run_dir)
    path = run_dir / "report.json"
    if not path.is_file():
        raise FileNotFoundError(f"no report.json in {run_dir}")
    report = Report.from_json(path.read_text())
    write_report(report, run_dir)
    return report


def _cells(cfg: ExperimentConfig):
    sw = cfg.sweep
    sa_specs = sw.sa or [cfg.sa.quant]
    nt_specs = sw.nt or [cfg.nt.quant]
    for qa in sa_specs:
        for qn in nt_specs:
            cell = copy.deepcopy(cfg)
            cell.sweep = None
            cell.sa.quant = qa
            cell.nt.quant = qn
            yield f"SA{qa.label}-NT{qn.label}", cell


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, seed_offset: int = 0, repeats: int = 1) -> Report:
    """Run every sweep cell and repeat; returns the combined report.

    Cells and repeats run one after another while each run may use ``jobs``
    workers for its ensembles, so results never depend on scheduling.
    With more than one repeat a best-by-object-Dice row is appended per cell.
    """
    out = Path(cfg.output_dir)
    samples = None
    with _stage("data"):
        samples = load_samples(cfg.dataset)
    cells = list(_cells(cfg)) if cfg.sweep else [(None, cfg)]
    all_rows, memory, runs = [], {}, []
    for name, cell in cells:
        cell_rows = []
        for r in range(repeats):
            sub = out
            if name:
                sub = sub / name
            if repeats > 1:
                sub = sub / f"repeat{r}"
            label = "-".join(x for x in (name, f"r{r}" if repeats > 1 else None) if x)
            rep = run_pipeline(cell, jobs, seed_offset + r, sub, samples, label or None)
            runs.append(rep.run_id)
            cell_rows.append(rep.rows)
            memory[name or "run"] = rep.memory
            all_rows.extend(rep.rows)
        if repeats > 1:
            best = max(cell_rows, key=lambda rows: next(x["object_dice"] for x in rows if x["part"] == "all"))
            all_rows.extend({**row, "run_id": f"best:{row['run_id']}"} for row in best)
    if len(runs) == 1:
        return Report.from_json((out / "report.json").read_text())
    combined = Report(
        run_id=hashlib.sha1(config_hash(cfg).encode()).hexdigest()[:12],
        rows=all_rows,
        memory=memory,
        provenance={"config_hash": config_hash(cfg), "runs": runs, "seed_offset": seed_offset, "repeats": repeats},
    )
    write_report(combined, out)
    return combined
