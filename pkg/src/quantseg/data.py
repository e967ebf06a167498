"""Synthetic gland-like data, dataset splits and the FCNT tensor container."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .metrics import instance_labels
from .rng import Rng

MAGIC = b"FCNT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1"), 2: np.dtype("<u4")}
_CODES = {np.dtype("float64"): 0, np.dtype("uint8"): 1, np.dtype("uint32"): 2}

# samples generated with deformation at or above this are "B" (hard) part
PART_B_DEFORMATION = 0.5
MAX_PLACEMENT_ATTEMPTS = 1000


class ContainerError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # [C,H,W] in [0,1]
    object_gt: np.ndarray  # [H,W] of {0,1}
    contour_gt: np.ndarray  # [H,W] of {0,1}
    instances: np.ndarray  # [H,W] labels, 0 = background
    id: str
    part: str = "A"


@dataclass
class SynthConfig:
    n_images: int = 40
    size: tuple[int, int] = (64, 64)
    objects_per_image: tuple[int, int] = (1, 3)
    deformation: float = 0.2
    noise_sigma: float = 0.05
    seed: int = 0
    channels: int = 3

    def __post_init__(self):
        self.size = tuple(self.size)
        self.objects_per_image = tuple(self.objects_per_image)

    def validate(self):
        h, w = self.size
        if h < 32 or w < 32:
            raise ValueError(f"image size must be at least 32x32, got {h}x{w}")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        if not 0.0 <= self.deformation <= 1.0:
            raise ValueError(f"deformation must lie in [0,1], got {self.deformation}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.n_images < 0 or self.channels < 1:
            raise ValueError("n_images must be >= 0 and channels >= 1")


def boundary(mask) -> np.ndarray:
    """Pixels of the mask with at least one 4-neighbour outside it (image edge counts as outside)."""
    m = np.asarray(mask) > 0
    p = np.pad(m, 1)
    interior = p[1:-1, 1:-1] & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return (m & ~interior).astype(np.uint8)


def _blob(rng: Rng, h: int, w: int, deformation: float) -> np.ndarray:
    short = min(h, w)
    a = rng.uniform(0.09, 0.17) * short
    b = a * rng.uniform(0.6, 1.0)
    reach = a * (1.0 + 0.75 * deformation) + 2
    cy = rng.uniform(reach, h - 1 - reach)
    cx = rng.uniform(reach, w - 1 - reach)
    theta = rng.uniform(0.0, math.pi)
    harmonics = [(m, rng.uniform(0.0, 0.25), rng.uniform(0.0, 2 * math.pi)) for m in (2, 3, 4)]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
    v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    radius = np.ones_like(phi)
    for m, amp, ph in harmonics:
        radius += deformation * amp * np.cos(m * phi + ph)
    return rho <= radius


def _render_one(cfg: SynthConfig, rng: Rng, n_obj: int):
    h, w = cfg.size
    occupied = np.zeros((h, w), dtype=bool)
    keepout = np.zeros((h, w), dtype=bool)
    placed = 0
    attempts = 0
    while placed < n_obj:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise RuntimeError(
                f"could not place {n_obj} non-overlapping objects in a {h}x{w} image "
                f"after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        blob = _blob(rng, h, w, cfg.deformation)
        if blob.sum() < 8 or (blob & keepout).any():
            continue
        if ndimage.label(blob, structure=ndimage.generate_binary_structure(2, 1))[1] != 1:
            continue
        occupied |= blob
        # one-pixel gap so objects never touch, even diagonally
        keepout |= ndimage.binary_dilation(blob, structure=np.ones((3, 3), dtype=bool))
        placed += 1
    return occupied


def generate_synthetic(cfg: SynthConfig, id_prefix: str | None = None) -> list[Sample]:
    """Images of non-overlapping deformed ellipses on a textured background.

    Ground truth comes straight from the rasterized geometry. ``deformation``
    scales low-frequency radial warping and also lowers contrast, so high
    values play the role of the hard, abnormal-gland subset.
    """
    cfg.validate()
    rng = Rng(cfg.seed)
    h, w = cfg.size
    part = "B" if cfg.deformation >= PART_B_DEFORMATION else "A"
    prefix = part if id_prefix is None else id_prefix
    lo, hi = cfg.objects_per_image
    samples = []
    for idx in range(cfg.n_images):
        n_obj = lo + rng.integers(hi - lo + 1)
        obj = _render_one(cfg, rng, n_obj)
        contrast = 1.0 - 0.4 * cfg.deformation
        bg = np.array([0.78, 0.50, 0.66] + [0.6] * (cfg.channels - 3))[: cfg.channels]
        fg = np.array([0.36, 0.22, 0.52] + [0.3] * (cfg.channels - 3))[: cfg.channels]
        bg = bg + rng.uniform(-0.05, 0.05, size=cfg.channels)
        fg = bg + contrast * (fg - bg) + rng.uniform(-0.05, 0.05, size=cfg.channels)
        image = np.where(obj[None], fg[:, None, None], bg[:, None, None])
        if cfg.noise_sigma > 0:
            image = image + cfg.noise_sigma * rng.normal(size=(cfg.channels, h, w))
        image = np.clip(image, 0.0, 1.0)
        object_gt = obj.astype(np.uint8)
        samples.append(
            Sample(
                image=image,
                object_gt=object_gt,
                contour_gt=boundary(object_gt),
                instances=instance_labels(object_gt),
                id=f"{prefix}-{idx:04d}",
                part=part,
            )
        )
    return samples


def split_dataset(samples: list, fractions, seed: int):
    """Deterministic shuffled (train, val, test) split.

    Sizes are floor(f * n), with leftover items going to the parts with the
    largest fractional remainders (earlier part first on ties).
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"need three non-negative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")
    n = len(samples)
    raw = [f * n for f in fractions]
    sizes = [math.floor(r) for r in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    perm = Rng(seed).permutation(n)
    shuffled = [samples[i] for i in perm]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


def write_container(path, named_tensors: dict) -> None:
    """Write named arrays to the FCNT binary container.

    Layout: b"FCNT", version u8, entry count u32; then per entry a u16 name
    length, UTF-8 name, dtype code u8 (0 f64, 1 u8, 2 u32), rank u8, u32
    dims and the little-endian row-major payload.
    """
    parts = [MAGIC, struct.pack("<BI", VERSION, len(named_tensors))]
    for name, arr in named_tensors.items():
        if not name.isascii():
            raise ContainerError(f"tensor name {name!r} is not ASCII")
        arr = np.asarray(arr)
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ContainerError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise ContainerError(f"tensor {name!r} has rank {arr.ndim} > 255")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerError(f"{path}: truncated while reading {what} at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    magic = take(4, "magic")
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<BI", take(5, "header"))
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}, expected {VERSION}")
    out = {}
    for k in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"name length of entry {k}"))
        name = take(nlen, f"name of entry {k}").decode("utf-8")
        if name in out:
            raise ContainerError(f"{path}: duplicate tensor name {name!r}")
        code, rank = struct.unpack("<BB", take(2, f"dtype/rank of {name!r}"))
        if code not in _DTYPES:
            raise ContainerError(f"{path}: unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(nbytes, f"payload of {name!r}"), dtype=dtype).reshape(dims)
        out[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(buf):
        raise ContainerError(f"{path}: {len(buf) - pos} trailing bytes after last entry")
    return out


def sample_tensors(s: Sample) -> dict[str, np.ndarray]:
    return {
        "image": s.image.astype(np.float64),
        "object_gt": s.object_gt.astype(np.uint8),
        "contour_gt": s.contour_gt.astype(np.uint8),
        "instances": s.instances.astype(np.uint32),
    }


def write_dataset(samples: list[Sample], out_dir) -> Path:
    """One container per sample plus a manifest.json; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        name = f"{s.id}.fcnt"
        write_container(out_dir / name, sample_tensors(s))
        entries.append({"id": s.id, "path": name, "part": s.part})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"samples": entries}, indent=2) + "\n")
    return manifest


def read_dataset(manifest_path) -> list[Sample]:
    manifest_path = Path(manifest_path)
    data = json.loads(manifest_path.read_text())
    samples = []
    for i, e in enumerate(data.get("samples", [])):
        missing = {"id", "path"} - set(e)
        if missing:
            raise ValueError(f"{manifest_path}: samples[{i}] lacks {sorted(missing)}")
        t = read_container(manifest_path.parent / e["path"])
        samples.append(
            Sample(
                image=t["image"].astype(np.float64),
                object_gt=t["object_gt"].astype(np.uint8),
                contour_gt=t["contour_gt"].astype(np.uint8),
                instances=t["instances"].astype(np.int64),
                id=e["id"],
                part=e.get("part", "A"),
            )
        )
    return samples
