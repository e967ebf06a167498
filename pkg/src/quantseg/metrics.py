"""Object-level segmentation metrics: detection F1, object Dice, object Hausdorff.

Conventions follow the gland-segmentation challenge: objects are 4-connected
components, a detection counts when it covers more than half of a
ground-truth object, and Dice/Hausdorff are area-weighted over objects of
both masks, each object paired with its maximally overlapping counterpart.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

_FOUR = ndimage.generate_binary_structure(2, 1)

CSV_COLUMNS = ["run_id", "part", "f1", "precision", "recall", "object_dice", "object_hausdorff"]


@dataclass
class MetricsReport:
    f1: float
    precision: float
    recall: float
    object_dice: float
    object_hausdorff: float

    def row(self, run_id: str, part: str) -> dict:
        return {"run_id": run_id, "part": part, **asdict(self)}


def instance_labels(binary_mask, min_object_px: int = 0) -> np.ndarray:
    """Label 4-connected components 1..n in raster-scan discovery order."""
    mask = np.asarray(binary_mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    labels, n = ndimage.label(mask > 0, structure=_FOUR)
    labels = labels.astype(np.int64)
    if min_object_px > 0 and n:
        areas = np.bincount(labels.ravel(), minlength=n + 1)
        keep = areas >= min_object_px
        keep[0] = False
        remap = np.zeros(n + 1, dtype=np.int64)
        remap[keep] = np.arange(1, keep.sum() + 1)
        labels = remap[labels]
    return labels


def prediction_to_instances(object_prob, contour_prob=None, threshold: float = 0.5, min_object_px: int = 0):
    """Threshold the object head, carve out predicted contours, then instance."""
    fg = np.asarray(object_prob) > threshold
    if contour_prob is not None:
        fg &= ~(np.asarray(contour_prob) > threshold)
    return instance_labels(fg, min_object_px)


def _check_pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    return pred.astype(np.int64), gt.astype(np.int64)


def _overlaps(a, b):
    """Overlap counts [n_a, n_b] and per-object areas of two label maps."""
    na, nb = int(a.max(initial=0)), int(b.max(initial=0))
    joint = np.bincount((a * (nb + 1) + b).ravel(), minlength=(na + 1) * (nb + 1))
    joint = joint.reshape(na + 1, nb + 1)
    area_a = joint.sum(axis=1)[1:]
    area_b = joint.sum(axis=0)[1:]
    return joint[1:, 1:], area_a, area_b


def detection_counts(pred, gt) -> tuple[int, int, int]:
    """(true positives, predicted objects, ground-truth objects)."""
    pred, gt = _check_pair(pred, gt)
    ov, area_p, area_g = _overlaps(pred, gt)
    pairs = [
        (-ov[i, j], j, i)
        for i, j in zip(*np.nonzero(ov))
        if ov[i, j] > 0.5 * area_g[j]
    ]
    pairs.sort()
    used_p, used_g = set(), set()
    for _, j, i in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
    return len(used_p), len(area_p), len(area_g)


def _prf(tp: int, n_pred: int, n_gt: int):
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def f1_detection(pred, gt) -> tuple[float, float, float]:
    return _prf(*detection_counts(pred, gt))


def _dice_terms(pred, gt):
    """Unnormalized area-weighted Dice sums for each direction plus total areas."""
    ov, area_p, area_g = _overlaps(pred, gt)
    s_g = 0.0
    for j in range(len(area_g)):
        i = int(np.argmax(ov[:, j])) if len(area_p) else -1
        if i >= 0 and ov[i, j] > 0:
            s_g += area_g[j] * 2.0 * ov[i, j] / (area_g[j] + area_p[i])
    s_p = 0.0
    for i in range(len(area_p)):
        j = int(np.argmax(ov[i, :])) if len(area_g) else -1
        if j >= 0 and ov[i, j] > 0:
            s_p += area_p[i] * 2.0 * ov[i, j] / (area_p[i] + area_g[j])
    return s_g, s_p, float(area_g.sum()), float(area_p.sum())


def object_dice(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    if pred.max(initial=0) == 0 and gt.max(initial=0) == 0:
        return 1.0
    s_g, s_p, tot_g, tot_p = _dice_terms(pred, gt)
    out = 0.0
    if tot_g:
        out += s_g / tot_g
    if tot_p:
        out += s_p / tot_p
    return 0.5 * out


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Euclidean Hausdorff distance between two boolean pixel sets."""
    if not a.any() or not b.any():
        raise ValueError("Hausdorff distance needs two non-empty sets")
    # distance from every pixel to the nearest pixel of the other set
    da = ndimage.distance_transform_edt(~b)
    db = ndimage.distance_transform_edt(~a)
    return float(max(da[a].max(), db[b].max()))


def _centroids(labels, n):
    idx = np.arange(1, n + 1)
    return np.array(ndimage.center_of_mass(np.ones_like(labels), labels, idx)).reshape(n, 2)


def _counterparts(ov, src_cent, dst_cent):
    """Max-overlap partner for each source object, nearest centroid if none overlaps."""
    out = []
    for i in range(ov.shape[0]):
        if ov.shape[1] and ov[i].max() > 0:
            out.append(int(np.argmax(ov[i])))
        else:
            d = np.hypot(*(dst_cent - src_cent[i]).T)
            out.append(int(np.argmin(d)))
    return out


def _hausdorff_terms(pred, gt):
    ov, area_p, area_g = _overlaps(pred, gt)
    np_, ng = len(area_p), len(area_g)
    if np_ == 0 or ng == 0:
        raise ValueError("object Hausdorff undefined: a mask has no objects")
    cp, cg = _centroids(pred, np_), _centroids(gt, ng)
    s_g = 0.0
    for j, i in enumerate(_counterparts(ov.T, cg, cp)):
        s_g += area_g[j] * hausdorff(gt == j + 1, pred == i + 1)
    s_p = 0.0
    for i, j in enumerate(_counterparts(ov, cp, cg)):
        s_p += area_p[i] * hausdorff(pred == i + 1, gt == j + 1)
    return s_g, s_p, float(area_g.sum()), float(area_p.sum())


def object_hausdorff(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    s_g, s_p, tot_g, tot_p = _hausdorff_terms(pred, gt)
    return 0.5 * (s_g / tot_g + s_p / tot_p)


def evaluate(preds, gts) -> MetricsReport:
    """Pooled metrics over a set of images.

    Detection counts are pooled over all images; Dice and Hausdorff weights
    are normalized by the total object area of the whole set. Images where a
    Hausdorff pairing is impossible (one side empty) are skipped for that
    metric; it is NaN when no image qualifies.
    """
    preds = [np.asarray(p, dtype=np.int64) for p in preds]
    gts = [np.asarray(g, dtype=np.int64) for g in gts]
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    tp = n_pred = n_gt = 0
    dice_g = dice_p = tot_g = tot_p = 0.0
    hd_g = hd_p = hd_tot_g = hd_tot_p = 0.0
    for pred, gt in zip(preds, gts):
        pred, gt = _check_pair(pred, gt)
        a, b, c = detection_counts(pred, gt)
        tp, n_pred, n_gt = tp + a, n_pred + b, n_gt + c
        sg, sp, tg, tpa = _dice_terms(pred, gt)
        dice_g, dice_p, tot_g, tot_p = dice_g + sg, dice_p + sp, tot_g + tg, tot_p + tpa
        if pred.max(initial=0) and gt.max(initial=0):
            sg, sp, tg, tpa = _hausdorff_terms(pred, gt)
            hd_g, hd_p, hd_tot_g, hd_tot_p = hd_g + sg, hd_p + sp, hd_tot_g + tg, hd_tot_p + tpa
    precision, recall, f1 = _prf(tp, n_pred, n_gt)
    if tot_g == 0 and tot_p == 0:
        dice = 1.0
    else:
        dice = 0.5 * ((dice_g / tot_g if tot_g else 0.0) + (dice_p / tot_p if tot_p else 0.0))
    hd = 0.5 * (hd_g / hd_tot_g + hd_p / hd_tot_p) if hd_tot_g and hd_tot_p else math.nan
    return MetricsReport(float(f1), float(precision), float(recall), float(dice), float(hd))


def format_float(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: format_float(v) if isinstance(v, float) else v for k, v in row.items() if k in CSV_COLUMNS})
    return buf.getvalue()
