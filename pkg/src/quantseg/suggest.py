"""Suggestive annotation: ensemble uncertainty plus descriptor similarity.

Each round trains an ensemble of FCNs on the samples suggested so far,
scores every pool image by the ensemble's per-pixel disagreement, keeps the
K most uncertain and then greedily picks k of them that best represent the
whole pool under cosine similarity of the ensemble descriptors.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import ModelSpec, Prediction, build_model, forward
from .quant import QuantSpec, quantized_weights
from .rng import Rng
from .training import StepLR, finetune_epochs, finetune_lr, inq_schedule, train

log = logging.getLogger(__name__)

STRATEGIES = ("representativeness", "dissimilarity")


@dataclass
class SelectionConfig:
    ensemble_size: int = 5
    K: int = 16
    k: int = 8
    iterations: int = 120
    quant: QuantSpec = field(default_factory=QuantSpec)
    epochs_per_iteration: int = 2
    lr: float = 0.0005
    lr_drop_epoch: int = 10**9
    seeds: list[int] | None = None
    from_scratch: bool = False
    strategy: str = "representativeness"
    # samples used to train the very first ensemble; defaults to k
    bootstrap: int | None = None
    bootstrap_seed: int = 0

    def member_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else list(range(self.ensemble_size))

    def validate(self, pool_size: int | None = None):
        if self.ensemble_size < 2:
            raise ValueError(f"ensemble_size must be >= 2, got {self.ensemble_size}")
        if not 0 < self.k <= self.K:
            raise ValueError(f"need 0 < k <= K, got k={self.k}, K={self.K}")
        if pool_size is not None and self.K > pool_size:
            raise ValueError(f"K={self.K} exceeds the pool size {pool_size}")
        if self.iterations < 0 or self.epochs_per_iteration < 0:
            raise ValueError("iterations and epochs_per_iteration must be >= 0")
        if len(self.member_seeds()) != self.ensemble_size:
            raise ValueError(f"{len(self.member_seeds())} seeds for an ensemble of {self.ensemble_size}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown selection strategy {self.strategy!r}; expected one of {STRATEGIES}")
        self.quant.validate()


@dataclass
class SelectionRound:
    candidate_ids: list[str]
    chosen_ids: list[str]
    uncertainty_scores: dict[str, float]
    representativeness: float

    def to_json(self, index: int) -> str:
        return json.dumps(
            {
                "round": index,
                "candidate_ids": self.candidate_ids,
                "chosen_ids": self.chosen_ids,
                "uncertainty_scores": self.uncertainty_scores,
                "representativeness": self.representativeness,
            },
            sort_keys=True,
        )


def uncertainty_map(preds: list[Prediction]) -> np.ndarray:
    """Per-pixel population std of the object-head probabilities."""
    if len(preds) < 2:
        raise ValueError(f"uncertainty needs at least 2 predictions, got {len(preds)}")
    shape = preds[0].object.shape
    if any(p.object.shape != shape for p in preds):
        raise ValueError("ensemble predictions have different shapes")
    return np.std(np.stack([p.object for p in preds]), axis=0)


def uncertainty_score(umap) -> float:
    return float(np.mean(umap))


def ensemble_descriptor(preds: list[Prediction]) -> np.ndarray:
    if not preds:
        raise ValueError("need at least one prediction")
    n = len(preds[0].descriptor)
    if any(len(p.descriptor) != n for p in preds):
        raise ValueError("descriptor length mismatch across ensemble members")
    return np.mean([p.descriptor for p in preds], axis=0)


def cosine_sim(a, b) -> float:
    """Cosine similarity; 0 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"vector lengths differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def select_top_uncertain(pool_scores: dict, K: int) -> list:
    """The K highest-scoring ids, score descending, ties to the smaller id."""
    if K > len(pool_scores):
        raise ValueError(f"K={K} exceeds the pool size {len(pool_scores)}")
    return sorted(pool_scores, key=lambda i: (-pool_scores[i], i))[:K]


def similarity_matrix(rows: list, cols: list, descriptors: dict) -> np.ndarray:
    return np.array([[cosine_sim(descriptors[r], descriptors[c]) for c in cols] for r in rows])


def representativeness(chosen: list, pool: list, descriptors: dict) -> float:
    """Sum over the pool of each item's best cosine similarity to ``chosen``."""
    if not chosen:
        return 0.0
    return float(similarity_matrix(chosen, pool, descriptors).max(axis=0).sum())


def select_representative(candidates: list, pool: list, descriptors: dict, k: int,
                          strategy: str = "representativeness") -> list:
    """Greedily choose k of the candidates.

    ``representativeness`` maximizes the facility-location objective over the
    whole pool. Coverage starts at -1 (the lowest cosine), which leaves the
    choice unchanged for non-negative similarities and keeps gains
    non-negative otherwise. ``dissimilarity`` instead takes the first
    candidate and then repeatedly the one least similar to those chosen.
    Ties go to the smaller id.
    """
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds the number of candidates {len(candidates)}")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown selection strategy {strategy!r}")
    if strategy == "dissimilarity":
        return _select_dissimilar(candidates, descriptors, k)
    sim = similarity_matrix(candidates, pool, descriptors)
    cover = np.full(len(pool), -1.0)
    chosen: list[int] = []
    for _ in range(k):
        best, best_gain = None, -math.inf
        for i in sorted(range(len(candidates)), key=lambda i: candidates[i]):
            if i in chosen:
                continue
            gain = float(np.maximum(cover, sim[i]).sum() - cover.sum())
            if gain > best_gain:
                best, best_gain = i, gain
        chosen.append(best)
        cover = np.maximum(cover, sim[best])
    return [candidates[i] for i in chosen]


def _select_dissimilar(candidates, descriptors, k):
    chosen = [candidates[0]]
    while len(chosen) < k:
        rest = sorted(c for c in candidates if c not in chosen)
        worst = [max(cosine_sim(descriptors[c], descriptors[s]) for s in chosen) for c in rest]
        chosen.append(rest[int(np.argmin(worst))])
    return chosen


@dataclass
class Member:
    """One suggestive FCN: float master weights plus its data-order stream."""

    model: object
    rng: Rng
    seed: int
    epoch: int = 0


def _fit_member(member: Member, samples, cfg: SelectionConfig, model_spec: ModelSpec):
    """Train one member for a round; returns (updated member, scoring model, scoring weights).

    The float master trains for ``epochs_per_iteration``. Scoring then uses a
    copy that gets the same low-rate phase for every method: INQ spends it
    on partition fine-tuning, the others keep training, so quantized and
    float ensembles see equal training budgets.
    """
    if cfg.from_scratch:
        member = Member(_fresh_model(model_spec, member.seed), Rng(member.seed), member.seed)
    schedule = StepLR(cfg.lr, cfg.lr_drop_epoch)
    q = cfg.quant
    ste = q if q.method in ("dorefa", "twn") else None
    master, _ = train(member.model, samples, cfg.epochs_per_iteration, schedule, ste,
                      rng=member.rng, start_epoch=member.epoch)
    member = Member(master, member.rng, member.seed, member.epoch + cfg.epochs_per_iteration)
    if q.method == "inq":
        scorer, _, _ = inq_schedule(master.copy(), samples, q, finetune_lr(schedule), member.rng)
        return member, scorer, None
    scorer, _ = train(master, samples, finetune_epochs(q), StepLR(finetune_lr(schedule)), ste, rng=member.rng)
    return member, scorer, (quantized_weights(scorer, q) or None)


def _fresh_model(spec: ModelSpec, seed: int):
    s = ModelSpec(**{**vars(spec), "seed": seed})
    return build_model(s)


def _fit_member_args(args):
    return _fit_member(*args)


def _score_pool(scorers, pool):
    scores, descriptors = {}, {}
    for s in pool:
        preds = [forward(m, s.image, w) for m, w in scorers]
        scores[s.id] = uncertainty_score(uncertainty_map(preds))
        descriptors[s.id] = ensemble_descriptor(preds)
    return scores, descriptors


def init_members(cfg: SelectionConfig, model_spec: ModelSpec) -> list[Member]:
    return [Member(_fresh_model(model_spec, s), Rng(s), s) for s in cfg.member_seeds()]


def train_ensemble(members, samples, cfg, model_spec, jobs: int = 1):
    """Fit all members for one round; order of results is the member order."""
    work = [(m, samples, cfg, model_spec) for m in members]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_fit_member_args, work))
    return [_fit_member(*w) for w in work]


def suggest_loop(pool: list, cfg: SelectionConfig, rng: Rng, model_spec: ModelSpec | None = None,
                 jobs: int = 1, audit=None):
    """Run the suggestion rounds; returns (suggested samples, rounds).

    The first ensemble trains on a random bootstrap subset drawn from ``rng``;
    later ones on everything suggested so far. Samples may be suggested more
    than once across rounds. ``audit``, if given, is a writable text stream
    that receives one JSON line per round.
    """
    cfg.validate(len(pool))
    model_spec = model_spec or ModelSpec()
    ids = [s.id for s in pool]
    if len(set(ids)) != len(ids):
        raise ValueError("pool sample ids must be unique")
    by_id = {s.id: s for s in pool}
    members = init_members(cfg, model_spec)
    n_boot = cfg.bootstrap if cfg.bootstrap is not None else cfg.k
    perm = rng.permutation(len(pool))
    bootstrap = [pool[i] for i in sorted(perm[:n_boot])]
    suggested: list = []
    rounds: list[SelectionRound] = []
    for t in range(cfg.iterations):
        train_set = sorted(suggested, key=lambda s: s.id) if suggested else bootstrap
        fitted = train_ensemble(members, train_set, cfg, model_spec, jobs)
        members = [f[0] for f in fitted]
        scores, descriptors = _score_pool([(f[1], f[2]) for f in fitted], pool)
        candidates = select_top_uncertain(scores, cfg.K)
        chosen = select_representative(candidates, ids, descriptors, cfg.k, cfg.strategy)
        rnd = SelectionRound(candidates, chosen, scores, representativeness(chosen, ids, descriptors))
        rounds.append(rnd)
        suggested.extend(by_id[i] for i in chosen)
        log.info("round %d: mean uncertainty %.5f, chose %s", t, float(np.mean(list(scores.values()))), chosen)
        if audit is not None:
            audit.write(rnd.to_json(t) + "\n")
    return suggested, rounds
