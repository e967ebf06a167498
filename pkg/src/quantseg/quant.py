"""Weight quantizers: incremental power-of-two (INQ), 1-bit DoReFa, ternary TWN.

INQ quantizes weights in magnitude order and locks them; the remaining float
weights keep training. DoReFa and TWN keep float master weights and only use
the quantized copy in the forward pass (straight-through estimator).
Only convolution kernels are quantized; biases stay in float.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import Model, loss_and_grads

log = logging.getLogger(__name__)

METHODS = ("none", "inq", "dorefa", "twn")
FLOAT_BITS = 32


@dataclass
class QuantSpec:
    method: str = "none"
    bits: int = 7
    partition_fractions: list[float] = field(default_factory=lambda: [0.5, 0.75, 0.875, 1.0])
    finetune_epochs_per_step: int = 2

    def __post_init__(self):
        self.partition_fractions = [float(f) for f in self.partition_fractions]

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown quantization method {self.method!r}; expected one of {METHODS}")
        if self.method == "inq" and self.bits < 2:
            raise ValueError(f"INQ needs at least 2 bits, got {self.bits}")
        fr = self.partition_fractions
        if not fr or fr[-1] != 1.0:
            raise ValueError(f"partition_fractions must end at 1.0, got {fr}")
        if any(not 0.0 < f <= 1.0 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError(f"partition_fractions must be strictly increasing in (0, 1], got {fr}")
        if self.finetune_epochs_per_step < 0:
            raise ValueError("finetune_epochs_per_step must be >= 0")

    @property
    def label(self) -> str:
        return "F" if self.method == "none" else (f"{self.bits}" if self.method == "inq" else self.method)


@dataclass
class LayerQuant:
    locked: np.ndarray | None = None
    u: int | None = None
    l: int | None = None
    alpha: float | None = None
    delta: float | None = None


@dataclass
class QuantState:
    layers: dict[str, LayerQuant] = field(default_factory=dict)
    # last INQ partition fraction applied (0 before the first step)
    fraction: float = 0.0

    def locked_masks(self) -> dict[str, np.ndarray]:
        return {k: v.locked for k, v in self.layers.items() if v.locked is not None}


def inq_bounds(weights, bits: int) -> tuple[int, int]:
    """Exponent range [l, u] of the power-of-two codebook for ``bits`` bits.

    One bit carries the sign and one codeword is reserved for zero, which
    leaves 2**(bits-2) exponents below the top one fixed by the largest weight.
    """
    w = np.abs(np.asarray(weights, dtype=np.float64))
    if w.size == 0:
        raise ValueError("cannot compute INQ bounds of an empty layer")
    m = float(w.max())
    if m == 0.0:
        raise ValueError("cannot compute INQ bounds: all weights are zero")
    u = math.floor(math.log2(4.0 * m / 3.0))
    # guard the floor against log2 rounding at exact powers of two
    while 2.0 ** (u + 1) <= 4.0 * m / 3.0:
        u += 1
    while 2.0 ** u > 4.0 * m / 3.0:
        u -= 1
    return u, u - (2 ** (bits - 2) - 1)


def inq_quantize(w, u: int, l: int) -> np.ndarray:
    """Vectorized power-of-two quantization into {0} U {+-2^p : l <= p <= u}."""
    if l > u:
        raise ValueError(f"lower exponent {l} exceeds upper exponent {u}")
    w = np.asarray(w, dtype=np.float64)
    a = np.abs(w)
    out = np.zeros_like(a)
    nz = a > 0
    # p with 3*2^(p-2) <= |w| < 3*2^(p-1)
    p = np.zeros(a.shape, dtype=np.int64)
    p[nz] = np.floor(np.log2(a[nz]) - np.log2(3.0)).astype(np.int64) + 2
    lo = 3.0 * np.exp2(p - 2.0)
    p = np.where(nz & (a < lo), p - 1, p)
    hi = 3.0 * np.exp2(p - 1.0)
    p = np.where(nz & (a >= hi), p + 1, p)
    p = np.minimum(p, u)
    keep = nz & (p >= l)
    out[keep] = np.exp2(p[keep].astype(np.float64))
    return np.where(w < 0, -out, out)


def inq_quantize_value(w: float, u: int, l: int) -> float:
    return float(inq_quantize(np.array([w]), u, l)[0])


def _quantized_layers(model: Model) -> list[str]:
    return model.weight_names()


def inq_step(model: Model, spec: QuantSpec, state: QuantState, fraction: float) -> tuple[Model, QuantState]:
    """Quantize and lock the largest unlocked weights of every layer up to ``fraction``.

    Returns new (model, state); inputs are not modified. Re-applying the last
    fraction is a no-op.
    """
    spec.validate()
    if fraction not in spec.partition_fractions:
        raise ValueError(f"fraction {fraction} is not in the partition schedule {spec.partition_fractions}")
    if fraction < state.fraction:
        raise ValueError(f"fraction {fraction} is behind the already applied fraction {state.fraction}")
    idx = spec.partition_fractions.index(fraction)
    if fraction > state.fraction and idx > 0 and spec.partition_fractions[idx - 1] != state.fraction:
        raise ValueError(
            f"fraction {fraction} applied out of order: expected {spec.partition_fractions[idx - 1]} first"
        )
    model = model.copy()
    new_state = QuantState({k: LayerQuant(**vars(v)) for k, v in state.layers.items()}, state.fraction)
    for name in _quantized_layers(model):
        w = model.params[name]
        lq = new_state.layers.setdefault(name, LayerQuant())
        if lq.locked is None:
            lq.locked = np.zeros(w.shape, dtype=bool)
        else:
            lq.locked = lq.locked.copy()
        if lq.u is None:
            lq.u, lq.l = inq_bounds(w, spec.bits)
        target = int(math.floor(fraction * w.size + 0.5))
        need = target - int(lq.locked.sum())
        if need <= 0:
            continue
        flat_w = w.ravel()
        flat_lock = lq.locked.ravel()
        cand = np.flatnonzero(~flat_lock)
        # descending magnitude, ties to the lower flat index
        order = cand[np.lexsort((cand, -np.abs(flat_w[cand])))][:need]
        flat_w = flat_w.copy()
        flat_w[order] = inq_quantize(flat_w[order], lq.u, lq.l)
        flat_lock[order] = True
        model.params[name] = flat_w.reshape(w.shape)
        lq.locked = flat_lock.reshape(w.shape)
    new_state.fraction = fraction
    return model, new_state


def dorefa_quantize_layer(w) -> np.ndarray:
    """Every weight becomes mean(|w|) * sign(w), with sign(0) = +1."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot quantize an empty layer")
    scale = np.mean(np.abs(w))
    return np.where(w < 0, -scale, scale)


def twn_quantize_layer(w) -> tuple[np.ndarray, float, float]:
    """Ternary weights {-alpha, 0, +alpha} with delta = 0.7 * mean(|w|).

    alpha is the mean magnitude of the weights above delta. Returns
    (quantized, alpha, delta).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot quantize an empty layer")
    a = np.abs(w)
    delta = 0.7 * float(a.mean())
    big = a > delta
    if not big.any():
        log.warning("TWN layer degenerate: no weight exceeds delta=%g, quantizing to zeros", delta)
        return np.zeros_like(w), 0.0, delta
    alpha = float(a[big].mean())
    wq = np.where(big, np.where(w < 0, -alpha, alpha), 0.0)
    return wq, alpha, delta


def quantized_weights(model: Model, spec: QuantSpec, state: QuantState | None = None) -> dict[str, np.ndarray]:
    """Forward-pass kernels for the STE methods; empty for none/inq."""
    if spec.method == "dorefa":
        return {n: dorefa_quantize_layer(model.params[n]) for n in _quantized_layers(model)}
    if spec.method == "twn":
        out = {}
        for n in _quantized_layers(model):
            wq, alpha, delta = twn_quantize_layer(model.params[n])
            out[n] = wq
            if state is not None:
                lq = state.layers.setdefault(n, LayerQuant())
                lq.alpha, lq.delta = alpha, delta
        return out
    return {}


def plain_train_step(model: Model, sample, lr: float, locked: dict | None = None) -> float:
    """In-place SGD step on one sample; returns the combined loss."""
    loss, grads = loss_and_grads(model, sample.image, sample.contour_gt, sample.object_gt)
    for name, g in grads.items():
        mask = locked.get(name) if locked else None
        model.params[name] = T.sgd_step(model.params[name], g, lr, mask)
    return loss


def ste_train_step(model: Model, sample, lr: float, spec: QuantSpec, state: QuantState | None = None):
    """One straight-through step: quantized forward, float master update.

    Returns (new model, loss); the input model is left as is.
    """
    if spec.method == "inq":
        raise ValueError("INQ trains with locked masks, not the straight-through estimator")
    model = model.copy()
    wq = quantized_weights(model, spec, state)
    loss, grads = loss_and_grads(model, sample.image, sample.contour_gt, sample.object_gt, weights=wq or None)
    for name, g in grads.items():
        model.params[name] = T.sgd_step(model.params[name], g, lr)
    return model, loss


def deployed_bits_per_weight(spec: QuantSpec) -> int:
    return {"none": FLOAT_BITS, "inq": spec.bits, "dorefa": 1, "twn": 2}[spec.method]


def deployed_bits(model: Model, spec: QuantSpec, include_biases: bool = True) -> int:
    """Analytic storage size of the deployed weights, in bits.

    Kernels cost the scheme's bits per weight; DoReFa and TWN add one float
    scale per layer. Biases stay 32-bit.
    """
    spec.validate()
    bits = 0
    for name in _quantized_layers(model):
        bits += model.params[name].size * deployed_bits_per_weight(spec)
        if spec.method in ("dorefa", "twn"):
            bits += FLOAT_BITS
    if include_biases:
        bits += sum(model.params[n].size for n in model.bias_names()) * FLOAT_BITS
    return bits


def deployed_bytes(model: Model, spec: QuantSpec, include_biases: bool = True) -> int:
    """``deployed_bits`` rounded up to whole bytes."""
    return (deployed_bits(model, spec, include_biases) + 7) // 8


def memory_ratio(model: Model, spec: QuantSpec) -> tuple[int, int, float]:
    """(float bytes, quantized bytes, ratio) over the quantized kernels only.

    The ratio is taken on exact bit counts so byte rounding on tiny models
    does not perturb it.
    """
    base = deployed_bits(model, QuantSpec("none"), include_biases=False)
    quant = deployed_bits(model, spec, include_biases=False)
    return (base + 7) // 8, (quant + 7) // 8, base / quant
