"""Epoch-level training of the dual-head FCN with optional weight quantization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Model, loss_and_grads
from .quant import QuantSpec, QuantState, inq_step, plain_train_step, quantized_weights, ste_train_step
from .rng import Rng


@dataclass
class StepLR:
    """Learning rate ``lr`` until ``drop_epoch``, then ``lr * drop_factor``."""

    lr: float = 0.0005
    drop_epoch: int = 10**9
    drop_factor: float = 0.1

    def __call__(self, epoch: int) -> float:
        return self.lr if epoch < self.drop_epoch else self.lr * self.drop_factor


def mean_loss(model: Model, samples, spec: QuantSpec | None = None) -> float:
    """Combined loss averaged over samples, using the forward weights ``spec`` implies."""
    wq = quantized_weights(model, spec) if spec is not None else {}
    return float(np.mean([
        loss_and_grads(model, s.image, s.contour_gt, s.object_gt, weights=wq or None)[0] for s in samples
    ]))


def _epoch(model, samples, lr, spec, state, rng, locked=None):
    losses = []
    for i in rng.permutation(len(samples)):
        s = samples[i]
        if spec.method in ("dorefa", "twn"):
            model, loss = ste_train_step(model, s, lr, spec, state)
        else:
            loss = plain_train_step(model, s, lr, locked)
        losses.append(loss)
    return model, float(np.mean(losses))


def inq_schedule(model: Model, samples, spec: QuantSpec, lr: float, rng: Rng,
                 state: QuantState | None = None):
    """Walk the INQ partition schedule with locked fine-tuning between steps.

    Returns (model, state, curve); the last curve entry is the loss of the
    fully quantized model.
    """
    state = state or QuantState()
    curve = []
    for fraction in spec.partition_fractions:
        if fraction <= state.fraction:
            continue
        model, state = inq_step(model, spec, state, fraction)
        if fraction < 1.0:
            locked = state.locked_masks()
            for _ in range(spec.finetune_epochs_per_step):
                model, loss = _epoch(model, samples, lr, spec, state, rng, locked)
                curve.append(loss)
    curve.append(mean_loss(model, samples))
    model.quant = state
    return model, state, curve


def finetune_epochs(spec: QuantSpec) -> int:
    """Epochs the INQ schedule spends fine-tuning (one block per partial step)."""
    return sum(1 for f in spec.partition_fractions if f < 1.0) * spec.finetune_epochs_per_step


def finetune_lr(lr_schedule) -> float:
    """Rate used for INQ fine-tuning: the post-drop stage of the schedule."""
    if isinstance(lr_schedule, StepLR):
        return lr_schedule.lr * lr_schedule.drop_factor
    return lr_schedule(10**9)


def train(model: Model, samples, epochs: int, lr_schedule=None, quant_spec: QuantSpec | None = None,
          quant_state: QuantState | None = None, rng: Rng | None = None, start_epoch: int = 0):
    """Train on ``samples`` with batch size 1; returns (model, per-epoch mean losses).

    The input model is not modified. For INQ, ``epochs`` float epochs are
    followed by the partition schedule, fine-tuning at the schedule's reduced
    rate; the final curve entry is then the fully quantized model's loss.
    The returned model carries its quantization state in ``model.quant``.
    """
    if not samples:
        raise ValueError("cannot train on an empty sample set")
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    spec = quant_spec or QuantSpec()
    spec.validate()
    lr_schedule = lr_schedule or StepLR()
    rng = rng or Rng(model.spec.seed)
    model = model.copy()
    if epochs == 0:
        return model, []
    state = quant_state or model.quant or QuantState()
    locked = state.locked_masks() if spec.method == "inq" else None
    curve = []
    for k in range(epochs):
        model, loss = _epoch(model, samples, lr_schedule(start_epoch + k), spec, state, rng, locked)
        curve.append(loss)
    if spec.method == "inq":
        model, state, tail = inq_schedule(model, samples, spec, finetune_lr(lr_schedule), rng, state)
        curve.extend(tail)
    elif spec.method in ("dorefa", "twn"):
        quantized_weights(model, spec, state)
        model.quant = state
    return model, curve
