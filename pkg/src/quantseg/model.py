"""Dual-head fully convolutional network (contour head + object head).

A strided conv trunk downsamples, a deconv path restores the input
resolution, and two sibling heads read the final feature map. The
channel-wise mean of the last trunk activation is exposed as an image
descriptor for similarity scoring.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng


@dataclass
class Stage:
    filters: int
    kernel: int
    stride: int


def _default_trunk():
    return [Stage(8, 3, 1), Stage(16, 3, 2), Stage(32, 3, 2)]


def _default_upsample():
    return [Stage(16, 4, 2), Stage(8, 4, 2)]


@dataclass
class ModelSpec:
    input_channels: int = 3
    trunk: list[Stage] = field(default_factory=_default_trunk)
    upsample: list[Stage] = field(default_factory=_default_upsample)
    # width of the private 3x3 conv in each head; 0 means a bare 1x1 output conv
    head_channels: int = 8
    seed: int = 0
    # add same-resolution trunk activations onto the upsampling path
    skips: bool = True

    def __post_init__(self):
        self.trunk = [s if isinstance(s, Stage) else Stage(**s) for s in self.trunk]
        self.upsample = [s if isinstance(s, Stage) else Stage(**s) for s in self.upsample]

    def validate(self):
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if not self.trunk:
            raise ValueError("trunk needs at least one stage")
        for s in self.trunk:
            if s.kernel % 2 != 1:
                raise ValueError(f"trunk kernels must be odd, got {s.kernel}")
        for s in self.trunk + self.upsample:
            if s.stride not in (1, 2) or s.filters < 1:
                raise ValueError(f"bad stage {s}")
        for s in self.upsample:
            if s.kernel < s.stride or (s.kernel - s.stride) % 2:
                raise ValueError(f"upsample kernel {s.kernel} incompatible with stride {s.stride}")
        down = math.prod(s.stride for s in self.trunk)
        up = math.prod(s.stride for s in self.upsample)
        if down != up:
            raise ValueError(f"trunk downsamples by {down} but upsample path restores {up}")
        if self.head_channels < 0:
            raise ValueError("head_channels must be >= 0")

    @property
    def downsample_factor(self) -> int:
        return math.prod(s.stride for s in self.trunk)


@dataclass
class Layer:
    name: str
    kind: str  # "conv" or "deconv"
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    pad: int

    @property
    def weight_shape(self):
        if self.kind == "conv":
            return (self.out_ch, self.in_ch, self.kernel, self.kernel)
        return (self.in_ch, self.out_ch, self.kernel, self.kernel)

    def fans(self):
        rf = self.kernel * self.kernel
        return self.in_ch * rf, self.out_ch * rf


@dataclass
class Prediction:
    contour: np.ndarray
    object: np.ndarray
    descriptor: np.ndarray


def build_layers(spec: ModelSpec) -> tuple[list[Layer], list[Layer], dict[str, list[Layer]]]:
    trunk, up = [], []
    ch = spec.input_channels
    for i, s in enumerate(spec.trunk):
        trunk.append(Layer(f"trunk{i}", "conv", ch, s.filters, s.kernel, s.stride, s.kernel // 2))
        ch = s.filters
    for i, s in enumerate(spec.upsample):
        up.append(Layer(f"up{i}", "deconv", ch, s.filters, s.kernel, s.stride, (s.kernel - s.stride) // 2))
        ch = s.filters
    heads = {}
    for head in ("contour", "object"):
        layers = []
        hc = ch
        if spec.head_channels:
            layers.append(Layer(f"{head}0", "conv", hc, spec.head_channels, 3, 1, 1))
            hc = spec.head_channels
        layers.append(Layer(f"{head}_out", "conv", hc, 1, 1, 1, 0))
        heads[head] = layers
    return trunk, up, heads


def _skip_sources(spec: ModelSpec, trunk: list[Layer], up: list[Layer]) -> dict[int, int]:
    """Map upsample index -> trunk index whose activation is added after it."""
    if not spec.skips:
        return {}
    scale = []
    f = 1
    for s in spec.trunk:
        f *= s.stride
        scale.append(f)
    out = {}
    f = spec.downsample_factor
    last = len(trunk) - 1
    for i, layer in enumerate(up):
        f //= layer.stride
        # latest trunk stage at this resolution with matching width (not the bottleneck)
        for j in range(last - 1, -1, -1):
            if scale[j] == f and trunk[j].out_ch == layer.out_ch:
                out[i] = j
                break
    return out


class Model:
    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray], quant=None):
        self.spec = spec
        self.params = params
        self.quant = quant
        self.trunk, self.up, self.heads = build_layers(spec)
        self.skips = _skip_sources(spec, self.trunk, self.up)

    @property
    def layers(self) -> list[Layer]:
        return self.trunk + self.up + self.heads["contour"] + self.heads["object"]

    def weight_names(self) -> list[str]:
        return [f"{l.name}.weight" for l in self.layers]

    def bias_names(self) -> list[str]:
        return [f"{l.name}.bias" for l in self.layers]

    def copy(self) -> "Model":
        return Model(copy.deepcopy(self.spec), {k: v.copy() for k, v in self.params.items()}, copy.deepcopy(self.quant))

    def num_weights(self) -> int:
        return sum(self.params[n].size for n in self.weight_names())


def build_model(spec: ModelSpec) -> Model:
    """Xavier-uniform kernels and zero biases, drawn from ``spec.seed``."""
    spec.validate()
    rng = Rng(spec.seed)
    params = {}
    trunk, up, heads = build_layers(spec)
    for layer in trunk + up + heads["contour"] + heads["object"]:
        fan_in, fan_out = layer.fans()
        params[f"{layer.name}.weight"] = T.xavier_uniform(layer.weight_shape, fan_in, fan_out, rng)
        params[f"{layer.name}.bias"] = np.zeros(layer.out_ch)
    return Model(spec, params)


def _apply(layer: Layer, x, w, b):
    if layer.kind == "conv":
        return T.conv2d(x, w, b, layer.stride, layer.pad)
    return T.deconv2d(x, w, b, layer.stride, layer.pad)


def _apply_backward(layer: Layer, g, x, w):
    if layer.kind == "conv":
        return T.conv2d_backward(g, x, w, layer.stride, layer.pad)
    return T.deconv2d_backward(g, x, w, layer.stride, layer.pad)


def _as_batch(model: Model, image) -> np.ndarray:
    x = T.as_tensor(image)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected image [C,H,W], got shape {np.shape(image)}")
    c, h, w = x.shape[1:]
    if c != model.spec.input_channels:
        raise ValueError(f"image has {c} channels, model expects {model.spec.input_channels}")
    f = model.spec.downsample_factor
    if h % f or w % f:
        raise ValueError(f"image size {h}x{w} must be divisible by the downsample factor {f}")
    return x


def _run(model: Model, x, weights):
    """Forward pass keeping every intermediate needed for backward."""
    p = model.params
    wt = lambda name: weights.get(f"{name}.weight", p[f"{name}.weight"]) if weights else p[f"{name}.weight"]
    cache = {"input": x}
    h = x
    for layer in model.trunk:
        cache[layer.name + ":in"] = h
        h = T.relu(_apply(layer, h, wt(layer.name), p[f"{layer.name}.bias"]))
        cache[layer.name] = h
    cache["bottleneck"] = h
    for i, layer in enumerate(model.up):
        cache[layer.name + ":in"] = h
        h = T.relu(_apply(layer, h, wt(layer.name), p[f"{layer.name}.bias"]))
        cache[layer.name] = h
        if i in model.skips:
            h = h + cache[model.trunk[model.skips[i]].name]
    cache["features"] = h
    outs = {}
    for head, layers in model.heads.items():
        g = h
        for layer in layers[:-1]:
            cache[layer.name + ":in"] = g
            g = T.relu(_apply(layer, g, wt(layer.name), p[f"{layer.name}.bias"]))
            cache[layer.name] = g
        last = layers[-1]
        cache[last.name + ":in"] = g
        outs[head] = T.sigmoid(_apply(last, g, wt(last.name), p[f"{last.name}.bias"]))
        cache[last.name] = outs[head]
    return outs, cache


def forward(model: Model, image, weights: dict | None = None) -> Prediction:
    """Run both heads on a [C,H,W] image.

    ``weights`` optionally overrides kernels by parameter name; used to run
    with quantized weights while the model keeps its float masters.
    """
    x = _as_batch(model, image)
    outs, cache = _run(model, x, weights)
    if outs["object"].shape[2:] != x.shape[2:]:
        raise ValueError(f"output size {outs['object'].shape[2:]} != input size {x.shape[2:]}")
    desc = cache["bottleneck"][0].mean(axis=(1, 2))
    return Prediction(outs["contour"][0, 0], outs["object"][0, 0], desc)


def loss_and_grads(model: Model, image, contour_gt, object_gt, weights: dict | None = None):
    """Combined BCE loss of both heads (1:1) and gradients for every parameter.

    Kernel gradients are taken with respect to whatever kernels were used in
    the forward pass, which is what a straight-through update needs.
    """
    x = _as_batch(model, image)
    p = model.params
    wt = lambda name: weights.get(f"{name}.weight", p[f"{name}.weight"]) if weights else p[f"{name}.weight"]
    outs, cache = _run(model, x, weights)
    grads = {}
    targets = {"contour": T.as_tensor(contour_gt)[None, None], "object": T.as_tensor(object_gt)[None, None]}
    total = 0.0
    g_features = np.zeros_like(cache["features"])
    for head, layers in model.heads.items():
        loss, _ = T.bce_loss(outs[head], targets[head])
        total += loss
        g = T.sigmoid_bce_backward(outs[head], targets[head])
        for k, layer in enumerate(reversed(layers)):
            if k > 0:
                g = T.relu_backward(g, cache[layer.name])
            gx, gw, gb = _apply_backward(layer, g, cache[layer.name + ":in"], wt(layer.name))
            grads[f"{layer.name}.weight"] = gw
            grads[f"{layer.name}.bias"] = gb
            g = gx
        g_features += g
    g = g_features
    skip_grads = {}
    for i in range(len(model.up) - 1, -1, -1):
        layer = model.up[i]
        if i in model.skips:
            j = model.skips[i]
            skip_grads[j] = skip_grads.get(j, 0.0) + g
        g = T.relu_backward(g, cache[layer.name])
        gx, gw, gb = _apply_backward(layer, g, cache[layer.name + ":in"], wt(layer.name))
        grads[f"{layer.name}.weight"] = gw
        grads[f"{layer.name}.bias"] = gb
        g = gx
    for j in range(len(model.trunk) - 1, -1, -1):
        layer = model.trunk[j]
        if j in skip_grads:
            g = g + skip_grads[j]
        g = T.relu_backward(g, cache[layer.name])
        gx, gw, gb = _apply_backward(layer, g, cache[layer.name + ":in"], wt(layer.name))
        grads[f"{layer.name}.weight"] = gw
        grads[f"{layer.name}.bias"] = gb
        g = gx
    return total, grads
