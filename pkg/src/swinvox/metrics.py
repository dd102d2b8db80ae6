"""Two-sided Dice loss, voxel IoU and surface F-score."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError
from .tensor import Tensor, ops

DICE_EPS = 1e-6
DEFAULT_THRESHOLD = 0.3
DEFAULT_DISTANCE = 0.01


def _same_shape(a, b):
    sa, sb = np.shape(a), np.shape(b)
    if sa != sb:
        raise DimensionError(f"grid shapes differ: {sa} vs {sb}")


def dice_loss(p: Tensor, g, eps: float = DICE_EPS) -> Tensor:
    """1 - (sum pg + eps)/(sum (p+g) + eps) - (sum (1-p)(1-g) + eps)/(sum (2-p-g) + eps).

    Sums run over every voxel of each sample (all axes but the first when
    ``p`` is batched, i.e. has more than three dims); the result is the mean
    over samples.
    """
    g = ops.as_tensor(g, like=p)
    _same_shape(p.data, g.data)
    axes = tuple(range(1, p.ndim)) if p.ndim > 3 else None
    inter = ops.sum(ops.mul(p, g), axis=axes)
    total = ops.sum(ops.add(p, g), axis=axes)
    q, h = ops.sub(1.0, p), ops.sub(1.0, g)
    inter_empty = ops.sum(ops.mul(q, h), axis=axes)
    total_empty = ops.sum(ops.add(q, h), axis=axes)
    occupied = ops.div(ops.add(inter, eps), ops.add(total, eps))
    empty = ops.div(ops.add(inter_empty, eps), ops.add(total_empty, eps))
    per_sample = ops.sub(ops.sub(1.0, occupied), empty)
    return ops.mean(per_sample) if axes is not None else per_sample


def binarize(pred, t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    return np.asarray(pred) > t


def voxel_iou(pred, gt, t: float = DEFAULT_THRESHOLD) -> float:
    """|{pred > t} & {gt}| / |{pred > t} | {gt}|; 1.0 when the union is empty."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    _same_shape(pred, gt)
    a = binarize(pred, t)
    b = np.asarray(gt).astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


_NEIGHBORS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def surface_mask(v) -> np.ndarray:
    """Occupied voxels with at least one empty 6-neighbor; outside the grid counts as empty."""
    occ = np.asarray(v).astype(bool)
    padded = np.pad(occ, 1, constant_values=False)
    interior = np.ones_like(occ)
    n0, n1, n2 = occ.shape
    for dx, dy, dz in _NEIGHBORS:
        interior &= padded[1 + dx:1 + dx + n0, 1 + dy:1 + dy + n1, 1 + dz:1 + dz + n2]
    return occ & ~interior


def surface_points(v) -> np.ndarray:
    """(n, 3) voxel-center coordinates of the surface voxels, in unit-cube units."""
    mask = surface_mask(v)
    side = np.asarray(mask.shape, dtype=np.float64)
    return (np.argwhere(mask) + 0.5) / side


def _fraction_within(src: np.ndarray, dst: np.ndarray, d: float) -> float:
    if len(src) == 0 or len(dst) == 0:
        return 0.0
    dist, _ = cKDTree(dst).query(src, k=1)
    return float(np.mean(dist <= d))


def fscore(pred, gt, t: float = DEFAULT_THRESHOLD, d: float = DEFAULT_DISTANCE) -> float:
    """Harmonic mean of surface precision and recall at distance ``d``."""
    if d <= 0:
        raise ValueError(f"distance threshold must be positive, got {d}")
    _same_shape(pred, gt)
    pc = surface_points(binarize(pred, t))
    gc = surface_points(np.asarray(gt).astype(bool))
    if len(pc) == 0 and len(gc) == 0:
        return 1.0
    precision = _fraction_within(pc, gc, d)
    recall = _fraction_within(gc, pc, d)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricReport:
    threshold: float
    distance: float
    ids: list = field(default_factory=list)
    iou: list = field(default_factory=list)
    fscore: list = field(default_factory=list)

    def add(self, sample_id: str, pred, gt) -> None:
        self.ids.append(sample_id)
        self.iou.append(voxel_iou(pred, gt, self.threshold))
        self.fscore.append(fscore(pred, gt, self.threshold, self.distance))

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou)) if self.iou else float("nan")

    @property
    def mean_fscore(self) -> float:
        return float(np.mean(self.fscore)) if self.fscore else float("nan")

    def records(self) -> Iterable[dict]:
        for i, a, b in zip(self.ids, self.iou, self.fscore):
            yield {"id": i, "iou": a, "fscore": b}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())

    def to_table(self) -> str:
        width = max([len("id")] + [len(i) for i in self.ids])
        lines = [f"{'id':<{width}}  {'iou':>8}  {'fscore':>8}"]
        lines += [f"{i:<{width}}  {a:8.4f}  {b:8.4f}" for i, a, b in zip(self.ids, self.iou, self.fscore)]
        lines.append(f"{'mean':<{width}}  {self.mean_iou:8.4f}  {self.mean_fscore:8.4f}")
        lines.append(f"samples={self.count} t={self.threshold} d={self.distance}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return f"{self.mean_iou:.3f}/{self.mean_fscore:.3f}"
