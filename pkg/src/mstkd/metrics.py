"""Dice and HD95 for binary volumes.

Conventions (isotropic unit spacing):

* Dice is 1.0 when both masks are empty and 0.0 when exactly one is.
* A boundary voxel is a foreground voxel with at least one 6-connected
  neighbour outside the mask; positions outside the grid count as outside.
* HD95 pools ``{d(p, G)} u {d(g, P)}`` over boundary voxels of both masks and
  takes the nearest-rank 95th percentile.  It is undefined (``nan``) when
  either mask is empty.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

HD95_UNDEFINED = float("nan")
_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class MetricsRow:
    mask: str
    region: str
    dice: float
    hd95: float

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError(f"dice out of range: {self.dice}")
        if not (math.isnan(self.hd95) or self.hd95 >= 0):
            raise ValueError(f"hd95 must be non-negative or undefined, got {self.hd95}")


def _as_bool(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError(f"{name} must be binary")
        mask = mask.astype(bool)
    return mask


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    p, g = _as_bool(pred, "pred"), _as_bool(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    mask = _as_bool(mask, "mask")
    eroded = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~eroded


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    values = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(int(math.ceil(q / 100.0 * values.size)), 1)
    return float(values[rank - 1])


def surface_distances(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pooled boundary-to-boundary distances in both directions."""
    bp = np.argwhere(boundary(pred)).astype(np.float64)
    bg = np.argwhere(boundary(gt)).astype(np.float64)
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    return np.concatenate([d_pg, d_gp])


def hd95(pred: np.ndarray, gt: np.ndarray) -> float:
    p, g = _as_bool(pred, "pred"), _as_bool(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        logger.debug("hd95 undefined: empty %s mask", "pred" if not p.any() else "gt")
        return HD95_UNDEFINED
    return nearest_rank_percentile(surface_distances(p, g), 95.0)


def binarize(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """``sigmoid(logit) > threshold`` per region channel."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    logits = np.asarray(logits, dtype=np.float64)
    # sigmoid(x) > t  <=>  x > logit(t); avoids overflow in exp
    return logits > math.log(threshold / (1.0 - threshold))
