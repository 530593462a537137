"""Independent oracles the test suite checks the package against.

Everything here is deliberately written the slow, obvious way (python
loops, central differences) and shares no code with the implementations
under test.
"""

from __future__ import annotations

import math

import numpy as np


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x)
        flat[i] = orig - h
        f_minus = f(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return g


def grad_close(analytic: np.ndarray, numeric: np.ndarray,
               rtol: float = 1e-4) -> bool:
    """Elementwise mixed absolute/relative agreement at tolerance rtol."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        return False
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return bool(np.all(np.abs(analytic - numeric) <= rtol * scale))


# ---------------------------------------------------------------- surface distance

def brute_boundary(mask: np.ndarray) -> list[tuple[int, ...]]:
    """Boundary voxels via per-voxel face-neighbor checks, python loops.

    A mask voxel is boundary when at least one face neighbor along an
    axis of extent > 1 is outside the mask (out-of-grid counts as
    outside).  If every axis has extent 1 the mask itself is the
    boundary.
    """
    mask = np.asarray(mask, dtype=bool)
    axes = [a for a in range(mask.ndim) if mask.shape[a] > 1]
    coords = []
    for idx in np.ndindex(mask.shape):
        if not mask[idx]:
            continue
        if not axes:
            coords.append(idx)
            continue
        on_boundary = False
        for a in axes:
            for step in (-1, 1):
                nb = list(idx)
                nb[a] += step
                if nb[a] < 0 or nb[a] >= mask.shape[a]:
                    on_boundary = True
                elif not mask[tuple(nb)]:
                    on_boundary = True
        if on_boundary:
            coords.append(idx)
    return coords


def brute_assd(pred: np.ndarray, gt: np.ndarray) -> float:
    """All-pairs nearest-boundary-distance average, pure python."""
    bp = brute_boundary(pred)
    bg = brute_boundary(gt)
    assert bp and bg, "brute_assd needs non-empty masks"

    def nearest(p, other):
        best = math.inf
        for q in other:
            d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(p, q)))
            if d < best:
                best = d
        return best

    total = 0.0
    for p in bp:
        total += nearest(p, bg)
    for q in bg:
        total += nearest(q, bp)
    return total / (len(bp) + len(bg))


def brute_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap score by explicit voxel counting."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    n_pred = int(pred.sum())
    n_gt = int(gt.sum())
    if n_pred == 0 and n_gt == 0:
        return 1.0
    inter = int((pred & gt).sum())
    return 2.0 * inter / (n_pred + n_gt)
