"""Training losses, pseudo-label selection math, and evaluation metrics.

All four training losses are differentiable nodes on the autodiff tape
with hand-derived gradients (cheaper and simpler than composing them
out of a dozen primitives).  The two "masked" variants average only
over a client's annotated classes and contribute exactly zero loss and
zero gradient for everything else, which is what lets partially
labeled sites train one shared backbone.  The two "soft" variants score
a student against server pseudo-labels over the full class union.

Binary cross entropy uses the natural logarithm throughout.  The soft
overlap loss uses squared-denominator normalization:

    1 - 2 * sum(p * t) / (sum(p^2) + sum(t^2))

which is 0 when p == t elementwise, not only when both are binary.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (ClassSetMismatch, EmptyAnnotationSet, EmptyMask,
                     ShapeMismatch)
from .models import ClassRegistry, PredictionVolume
from .scenegen import LabelVolume


@dataclass
class PseudoLabelVolume:
    """Aggregated soft targets for one distillation volume.

    ``targets`` is (C, D, H, W) aligned with ``class_ids``; ``sources``
    records which stored client model each class channel was taken from.
    """
    class_ids: tuple[int, ...]
    targets: np.ndarray
    sources: dict[int, int]

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim != 4 or self.targets.shape[0] != len(self.class_ids):
            raise ShapeMismatch(
                f"pseudo targets shape {self.targets.shape} does not match "
                f"{len(self.class_ids)} classes")

    def channel(self, class_id: int) -> np.ndarray:
        return self.targets[self.class_ids.index(class_id)]


@dataclass(frozen=True)
class ImpurityScore:
    """Entropy mass of one class channel; lower means a more confident mask."""
    class_id: int
    value: float


# ------------------------------------------------------------------ loss cores

def _aligned_targets(pred: PredictionVolume, channels: dict[int, np.ndarray],
                     weights: dict[int, float]) -> tuple[np.ndarray, np.ndarray]:
    """Target tensor and per-class weight column aligned with pred channels."""
    c = len(pred.class_ids)
    spatial = pred.probs.data.shape[1:]
    y = np.zeros((c,) + spatial)
    w = np.zeros((c, 1, 1, 1))
    for i, cid in enumerate(pred.class_ids):
        if cid not in channels:
            continue
        target = np.asarray(channels[cid], dtype=np.float64)
        if target.shape != spatial:
            raise ShapeMismatch(
                f"target for class {cid} has shape {target.shape}, "
                f"prediction is {spatial}")
        y[i] = target
        w[i, 0, 0, 0] = weights[cid]
    return y, w


def _bce_node(pred: PredictionVolume, y: np.ndarray, w: np.ndarray) -> T.Tensor:
    """Weighted per-class mean binary cross entropy as a single tape node.

    loss = sum_c w_c * mean_n -(y log p + (1-y) log(1-p));
    d loss / d p = (w_c / N) * ((1-y)/(1-p) - y/p).
    """
    p = pred.probs.data
    c = len(w)
    n = float(np.prod(p.shape[1:]))
    active = w[:, 0, 0, 0] > 0.0
    # Zero-weight channels must not poison the sum even if they hold
    # exact 0/1 probabilities, so mask them out before touching log().
    with np.errstate(divide="ignore", invalid="ignore"):
        per_voxel = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
        per_class = per_voxel.reshape(c, -1).mean(axis=1)
        value = float((w[:, 0, 0, 0] * np.where(active, per_class, 0.0)).sum())

    def grad_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            raw = (w / n) * (-(y / p) + (1.0 - y) / (1.0 - p))
            d = np.where(w > 0.0, raw, 0.0)
        return (g * d,)

    return T.graph_node(value, (pred.probs,), grad_fn, op="bce_loss")


def _dice_node(pred: PredictionVolume, y: np.ndarray, w: np.ndarray) -> T.Tensor:
    """Weighted soft overlap loss as a single tape node.

    Per class: 1 - num/den with num = 2*sum(p*y), den = sum(p^2) + sum(y^2).
    A class whose denominator is zero contributes zero.  Gradient per voxel:
    (2*p*num - 2*y*den) / den^2.
    """
    p = pred.probs.data
    c = len(w)
    p_flat = p.reshape(c, -1)
    y_flat = y.reshape(c, -1)
    num = 2.0 * (p_flat * y_flat).sum(axis=1)
    den = (p_flat * p_flat).sum(axis=1) + (y_flat * y_flat).sum(axis=1)
    safe = den > 0.0
    term = np.zeros(c)
    term[safe] = 1.0 - num[safe] / den[safe]
    value = float((w[:, 0, 0, 0] * term).sum())

    def grad_fn(g):
        scale = np.zeros(c)
        scale[safe] = 1.0 / (den[safe] * den[safe])
        col = lambda v: v.reshape(c, 1, 1, 1)
        d = w * col(scale) * (2.0 * p * col(num) - 2.0 * y * col(den))
        return (g * d,)

    return T.graph_node(value, (pred.probs,), grad_fn, op="dice_loss")


def _check_annotated(pred: PredictionVolume, labels: LabelVolume):
    annotated = labels.annotated
    if not annotated:
        raise EmptyAnnotationSet("label volume annotates no classes")
    missing = set(annotated) - set(pred.class_ids)
    if missing:
        raise ClassSetMismatch(
            f"prediction lacks channels for annotated classes {sorted(missing)}")
    return annotated


# ------------------------------------------------- supervised (masked) losses

def masked_bce_loss(pred: PredictionVolume, labels: LabelVolume) -> T.Tensor:
    """Cross entropy averaged over the label volume's annotated classes only.

    Unannotated prediction channels receive exactly zero gradient, so a
    client cannot perturb what it has no labels for.
    """
    annotated = _check_annotated(pred, labels)
    weight = 1.0 / len(annotated)
    channels = {cid: labels.masks[cid].astype(np.float64) for cid in annotated}
    weights = {cid: weight for cid in annotated}
    y, w = _aligned_targets(pred, channels, weights)
    return _bce_node(pred, y, w)


def masked_dice_loss(pred: PredictionVolume, labels: LabelVolume) -> T.Tensor:
    """Soft overlap loss averaged over annotated classes only."""
    annotated = _check_annotated(pred, labels)
    weight = 1.0 / len(annotated)
    channels = {cid: labels.masks[cid].astype(np.float64) for cid in annotated}
    weights = {cid: weight for cid in annotated}
    y, w = _aligned_targets(pred, channels, weights)
    return _dice_node(pred, y, w)


# -------------------------------------------------- distillation (soft) losses

def _check_soft(pred: PredictionVolume, pseudo: PseudoLabelVolume):
    if set(pred.class_ids) != set(pseudo.class_ids):
        raise ClassSetMismatch(
            f"student predicts {sorted(pred.class_ids)} but pseudo-labels "
            f"cover {sorted(pseudo.class_ids)}")


def soft_bce(pred: PredictionVolume, pseudo: PseudoLabelVolume) -> T.Tensor:
    """Cross entropy of student probabilities against soft targets."""
    _check_soft(pred, pseudo)
    weight = 1.0 / len(pred.class_ids)
    channels = {cid: pseudo.channel(cid) for cid in pred.class_ids}
    weights = {cid: weight for cid in pred.class_ids}
    y, w = _aligned_targets(pred, channels, weights)
    return _bce_node(pred, y, w)


def soft_dice(pred: PredictionVolume, pseudo: PseudoLabelVolume) -> T.Tensor:
    """Soft overlap loss of student probabilities against soft targets."""
    _check_soft(pred, pseudo)
    weight = 1.0 / len(pred.class_ids)
    channels = {cid: pseudo.channel(cid) for cid in pred.class_ids}
    weights = {cid: weight for cid in pred.class_ids}
    y, w = _aligned_targets(pred, channels, weights)
    return _dice_node(pred, y, w)


def distill_loss(pred: PredictionVolume, pseudo: PseudoLabelVolume) -> T.Tensor:
    """Unweighted sum of the two soft losses."""
    return soft_bce(pred, pseudo) + soft_dice(pred, pseudo)


# ------------------------------------------------------------ selection score

def entropy_impurity(probs: np.ndarray, class_id: int) -> ImpurityScore:
    """Total binary entropy mass of one probability channel.

    Sums -p*log(p) over voxels with the 0*log(0) := 0 convention.  The
    server keeps, per class, the candidate channel with the lowest score.
    """
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    term = np.zeros_like(p)
    inside = p > 0.0
    term[inside] = -p[inside] * np.log(p[inside])
    return ImpurityScore(class_id=class_id, value=float(term.sum()))


# ------------------------------------------------------------------- metrics

def dice_score(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Hard overlap score 2|P & G| / (|P| + |G|).

    Both masks empty scores 1.0; exactly one empty scores 0.0.
    """
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"mask shapes differ: {p.shape} vs {g.shape}")
    p_sum = int(p.sum())
    g_sum = int(g.sum())
    if p_sum == 0 and g_sum == 0:
        return 1.0
    if p_sum == 0 or g_sum == 0:
        return 0.0
    inter = int(np.logical_and(p, g).sum())
    return 2.0 * inter / (p_sum + g_sum)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Surface of a binary mask under 6-ish face connectivity.

    A mask voxel is boundary if any face neighbor along an axis with
    extent > 1 is outside the mask; voxels beyond the grid count as
    outside.  On grids where no axis has extent > 1 the mask is its own
    boundary.
    """
    m = np.asarray(mask, dtype=bool)
    axes = [a for a in range(m.ndim) if m.shape[a] > 1]
    if not axes:
        return m.copy()
    inner = np.ones(m.shape, dtype=bool)
    for a in axes:
        pad = [(0, 0)] * m.ndim
        pad[a] = (1, 1)
        padded = np.pad(m, pad, constant_values=False)
        lo = [slice(None)] * m.ndim
        hi = [slice(None)] * m.ndim
        lo[a] = slice(0, -2)
        hi[a] = slice(2, None)
        inner &= padded[tuple(lo)] & padded[tuple(hi)]
    return m & ~inner


def assd(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Average symmetric surface distance between two non-empty masks.

    Mean Euclidean distance from each boundary voxel of one mask to the
    nearest boundary voxel of the other, pooled over both directions.
    Raises EmptyMask naming which argument is empty.

    Distances come from an exact vectorized all-pairs computation:
    voxel coordinates are small integers, so squared distances are exact
    in float64 and the result does not depend on how the pair matrix is
    blocked.  The final accumulation runs in row-major voxel order, pred
    side first.
    """
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"mask shapes differ: {p.shape} vs {g.shape}")
    if not p.any():
        raise EmptyMask("pred_mask has no voxels")
    if not g.any():
        raise EmptyMask("gt_mask has no voxels")
    bp = np.argwhere(boundary_voxels(p)).astype(np.float64)
    bg = np.argwhere(boundary_voxels(g)).astype(np.float64)
    diff = bp[:, None, :] - bg[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    total = 0.0
    for v in d.min(axis=1):
        total += float(v)
    for v in d.min(axis=0):
        total += float(v)
    return total / (len(bp) + len(bg))


# ---------------------------------------------------------------- reporting

def format_float(x: float) -> str:
    """Six significant digits, '.' decimal separator, no locale surprises."""
    return f"{float(x):.6g}"


@dataclass(frozen=True)
class ClassMetrics:
    class_id: int
    name: str
    dice_mean: float
    assd_mean: float | None
    n_samples: int
    n_assd_valid: int


@dataclass
class MetricReport:
    """Per-class means plus macro averages, serializable to CSV and JSON."""
    per_class: list[ClassMetrics]
    macro_dice: float | None
    macro_assd: float | None
    excluded: dict[str, str] = field(default_factory=dict)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class_id", "class", "dice", "assd",
                         "n_samples", "n_assd_valid"])
        for row in self.per_class:
            writer.writerow([
                row.class_id, row.name, format_float(row.dice_mean),
                "" if row.assd_mean is None else format_float(row.assd_mean),
                row.n_samples, row.n_assd_valid,
            ])
        writer.writerow([
            -1, "macro",
            "" if self.macro_dice is None else format_float(self.macro_dice),
            "" if self.macro_assd is None else format_float(self.macro_assd),
            sum(r.n_samples for r in self.per_class),
            sum(r.n_assd_valid for r in self.per_class),
        ])
        return buf.getvalue()

    def to_json_obj(self) -> dict:
        return {
            "per_class": [
                {
                    "class_id": r.class_id,
                    "class": r.name,
                    "dice": r.dice_mean,
                    "assd": r.assd_mean,
                    "n_samples": r.n_samples,
                    "n_assd_valid": r.n_assd_valid,
                }
                for r in self.per_class
            ],
            "macro_dice": self.macro_dice,
            "macro_assd": self.macro_assd,
            "excluded": dict(self.excluded),
        }

    def save(self, base_path) -> None:
        base = Path(base_path)
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_suffix(".csv").write_text(self.to_csv_text(), encoding="utf-8")
        base.with_suffix(".json").write_text(
            json.dumps(self.to_json_obj(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")

    def dice_for(self, name: str) -> float:
        for row in self.per_class:
            if row.name == name:
                return row.dice_mean
        raise KeyError(name)


class MetricAccumulator:
    """Collects per-sample scores and reduces them to a MetricReport.

    ASSD is undefined when either mask is empty; such samples count
    toward n_samples but not toward the surface-distance mean.
    """

    def __init__(self, registry: ClassRegistry):
        self.registry = registry
        self._dice: dict[int, list[float]] = {}
        self._assd: dict[int, list[float]] = {}
        self._counts: dict[int, int] = {}

    def add(self, class_id: int, dice: float, assd_value: float | None) -> None:
        self.registry.name_of(class_id)
        self._dice.setdefault(class_id, []).append(float(dice))
        self._counts[class_id] = self._counts.get(class_id, 0) + 1
        if assd_value is not None:
            self._assd.setdefault(class_id, []).append(float(assd_value))

    def add_pair(self, class_id: int, pred_mask: np.ndarray,
                 gt_mask: np.ndarray) -> None:
        """Score one predicted/reference mask pair and record it."""
        d = dice_score(pred_mask, gt_mask)
        both = np.asarray(pred_mask, bool).any() and np.asarray(gt_mask, bool).any()
        a = assd(pred_mask, gt_mask) if both else None
        self.add(class_id, d, a)

    def report(self, excluded: dict[str, str] | None = None) -> MetricReport:
        rows = []
        for cid in sorted(self._counts):
            dices = self._dice[cid]
            assds = self._assd.get(cid, [])
            rows.append(ClassMetrics(
                class_id=cid,
                name=self.registry.name_of(cid),
                dice_mean=float(np.mean(dices)),
                assd_mean=float(np.mean(assds)) if assds else None,
                n_samples=len(dices),
                n_assd_valid=len(assds),
            ))
        macro_dice = float(np.mean([r.dice_mean for r in rows])) if rows else None
        with_assd = [r.assd_mean for r in rows if r.assd_mean is not None]
        macro_assd = float(np.mean(with_assd)) if with_assd else None
        return MetricReport(per_class=rows, macro_dice=macro_dice,
                            macro_assd=macro_assd, excluded=dict(excluded or {}))
