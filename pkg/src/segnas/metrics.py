"""Segmentation quality metrics and nonparametric significance tests.

Masks are 2D integer label grids with physical pixel spacing. Boundary
extraction uses 4-adjacency and treats the image edge as exposure, so
the border pixels of a region touching the edge are boundary pixels.
Distance-based metrics (HD95, surface Dice) pool the nearest
boundary-to-boundary distances from both directions into one symmetric
set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import chi2, norm, rankdata

SOFT_DICE_EPS = 1e-5


class MetricError(Exception):
    pass


class UndefinedMetricError(MetricError):
    """A distance metric was requested for an empty region."""


class DegenerateTestError(MetricError):
    """The statistical test is undefined for this input."""


@dataclass(frozen=True)
class LabelMask:
    labels: np.ndarray  # 2D integer grid, 0 = background
    spacing: tuple[float, float] = (1.0, 1.0)  # (dy, dx) physical units per pixel

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise MetricError(f"labels must be 2D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise MetricError(f"labels must be integer, got {arr.dtype}")
        if arr.min(initial=0) < 0:
            raise MetricError("labels must be non-negative")
        if len(self.spacing) != 2 or any(s <= 0 for s in self.spacing):
            raise MetricError(f"spacing must be two positive values, got {self.spacing}")
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def _check_compatible(pred: LabelMask, gt: LabelMask) -> None:
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.spacing != gt.spacing:
        raise MetricError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")


# ---------------------------------------------------------------------------
# Overlap metrics

def dsc(pred: LabelMask, gt: LabelMask, class_id: int) -> float:
    """Dice-Sorensen coefficient of one class; 1.0 when both regions are empty."""
    _check_compatible(pred, gt)
    p = pred.labels == class_id
    g = gt.labels == class_id
    p_sum = int(p.sum())
    g_sum = int(g.sum())
    if p_sum == 0 and g_sum == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / (p_sum + g_sum)


def soft_dice_loss(pred_probs: np.ndarray, gt: LabelMask) -> float:
    """Foreground soft Dice loss: 1 - mean over classes >= 1 of the soft Dice.

    pred_probs has shape (num_classes, H, W) with per-pixel probabilities.
    """
    probs = np.asarray(pred_probs, dtype=np.float64)
    if probs.ndim != 3:
        raise MetricError(f"pred_probs must be (classes, H, W), got {probs.shape}")
    if probs.shape[1:] != gt.shape:
        raise MetricError(f"shape mismatch: {probs.shape[1:]} vs {gt.shape}")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise MetricError("probabilities must lie in [0, 1]")
    num_classes = probs.shape[0]
    if num_classes < 2:
        raise MetricError("need at least one foreground class")
    dices = []
    for c in range(1, num_classes):
        p = probs[c]
        g = (gt.labels == c).astype(np.float64)
        num = 2.0 * float((p * g).sum()) + SOFT_DICE_EPS
        den = float(p.sum()) + float(g.sum()) + SOFT_DICE_EPS
        dices.append(num / den)
    return 1.0 - sum(dices) / len(dices)


# ---------------------------------------------------------------------------
# Boundary-distance metrics

def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Region pixels 4-adjacent to a non-region pixel or to the image edge."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _pooled_boundary_distances(pred: LabelMask, gt: LabelMask, class_id: int) -> np.ndarray:
    _check_compatible(pred, gt)
    p = pred.labels == class_id
    g = gt.labels == class_id
    if not p.any() or not g.any():
        raise UndefinedMetricError(
            f"class {class_id} region is empty in {'prediction' if not p.any() else 'ground truth'}")
    scale = np.array(pred.spacing, dtype=np.float64)
    p_pts = np.argwhere(boundary_pixels(p)) * scale
    g_pts = np.argwhere(boundary_pixels(g)) * scale
    d_pg, _ = cKDTree(g_pts).query(p_pts)
    d_gp, _ = cKDTree(p_pts).query(g_pts)
    return np.concatenate([d_pg, d_gp])


def hd95(pred: LabelMask, gt: LabelMask, class_id: int) -> float:
    """95th percentile (linear interpolation) of the pooled symmetric
    boundary-to-boundary nearest distances, in physical units."""
    distances = _pooled_boundary_distances(pred, gt, class_id)
    return float(np.percentile(distances, 95))


def surface_dice(pred: LabelMask, gt: LabelMask, class_id: int,
                 tolerance: float) -> float:
    """Fraction of pooled boundary elements within `tolerance` of the
    opposing boundary (physical units)."""
    if tolerance < 0:
        raise MetricError("tolerance must be non-negative")
    distances = _pooled_boundary_distances(pred, gt, class_id)
    return float(np.mean(distances <= tolerance))


# ---------------------------------------------------------------------------
# Significance tests

@dataclass(frozen=True)
class FriedmanResult:
    statistic: float
    degrees_of_freedom: int
    p_value: float


def friedman_test(table: np.ndarray) -> FriedmanResult:
    """Friedman rank test over a (blocks x models) score table.

    Ranks within each row use average ranks for ties; the statistic is the
    classic chi-square form with df = models - 1.
    """
    scores = np.asarray(table, dtype=np.float64)
    if scores.ndim != 2:
        raise DegenerateTestError(f"score table must be 2D, got shape {scores.shape}")
    n, k = scores.shape
    if k < 2:
        raise DegenerateTestError("need at least 2 models (columns)")
    if n < 2:
        raise DegenerateTestError("need at least 2 measurement blocks (rows)")
    ranks = np.apply_along_axis(rankdata, 1, scores)
    mean_ranks = ranks.mean(axis=0)
    statistic = 12.0 * n / (k * (k + 1)) * float(((mean_ranks - (k + 1) / 2.0) ** 2).sum())
    df = k - 1
    return FriedmanResult(statistic=statistic, degrees_of_freedom=df,
                          p_value=float(chi2.sf(statistic, df)))


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    p_value: float
    n: int  # pairs remaining after dropping zero differences
    method: str  # exact | normal


_EXACT_LIMIT = 25


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float]) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired scores.

    Zero differences are dropped; ranks of |d| use average ranks for ties.
    The exact null distribution is used for n <= 25, a normal approximation
    with continuity and tie corrections above.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError("x and y must be 1D of equal length")
    d = x - y
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        raise DegenerateTestError("all paired differences are zero")
    if n < 5:
        raise DegenerateTestError(f"need at least 5 nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    statistic = min(w_plus, w_minus)

    if n <= _EXACT_LIMIT:
        p = _exact_signed_rank_p(ranks, statistic)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, counts = np.unique(ranks, return_counts=True)
        tie_term = float(((counts ** 3 - counts) / 48.0).sum())
        se = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
        z = (statistic - mean + 0.5) / se
        p = min(1.0, 2.0 * float(norm.cdf(z)))
        method = "normal"
    return WilcoxonResult(statistic=statistic, p_value=p, n=n, method=method)


def _exact_signed_rank_p(ranks: np.ndarray, statistic: float) -> float:
    """Exact two-sided p-value: 2 * P(W <= statistic) under the sign-flip null.

    Works with tie-averaged (half-integer) ranks by doubling them.
    """
    doubled = np.rint(2 * ranks).astype(int)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for dr in doubled:
        counts[dr:] = counts[dr:] + counts[:-dr].copy()
    threshold = int(math.floor(2 * statistic + 1e-9))
    p_le = counts[: threshold + 1].sum() / (2.0 ** len(ranks))
    return min(1.0, 2.0 * float(p_le))


# ---------------------------------------------------------------------------
# Mask file I/O

_DTYPES = {"uint8": np.uint8, "int32": np.int32}


def write_mask(mask: LabelMask, path: Path, num_classes: int | None = None) -> None:
    """Header JSON at `path`, raw row-major label bytes at `path` + '.bin'."""
    path = Path(path)
    dtype = "uint8" if mask.labels.max(initial=0) < 256 else "int32"
    data = mask.labels.astype(_DTYPES[dtype])
    sidecar = path.name + ".bin"
    header = {
        "shape": list(mask.shape),
        "spacing": list(mask.spacing),
        "num_classes": int(num_classes if num_classes is not None
                           else mask.labels.max(initial=0) + 1),
        "dtype": dtype,
        "data": sidecar,
    }
    path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    (path.parent / sidecar).write_bytes(data.tobytes(order="C"))


def read_mask(path: Path) -> LabelMask:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
        shape = tuple(int(v) for v in header["shape"])
        spacing = tuple(float(v) for v in header["spacing"])
        dtype = _DTYPES[header["dtype"]]
        raw = (path.parent / header["data"]).read_bytes()
    except (json.JSONDecodeError, KeyError, OSError, TypeError, ValueError) as exc:
        raise MetricError(f"bad mask file {path}: {exc}") from exc
    labels = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return LabelMask(labels=labels, spacing=spacing)


def read_pgm(path: Path) -> LabelMask:
    """Binary 8-bit PGM (P5) as a label mask with unit spacing."""
    data = Path(path).read_bytes()
    try:
        tokens = []
        i = 0
        while len(tokens) < 4:
            if data[i:i + 1] == b"#":  # comment to end of line
                i = data.index(b"\n", i) + 1
                continue
            if data[i:i + 1].isspace():
                i += 1
                continue
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
        i += 1  # single whitespace after maxval
        magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
        if magic != b"P5" or maxval > 255:
            raise ValueError(f"unsupported PGM variant {magic!r}, maxval {maxval}")
        labels = np.frombuffer(data[i:i + width * height], dtype=np.uint8)
        labels = labels.reshape((height, width)).copy()
    except (ValueError, IndexError) as exc:
        raise MetricError(f"bad PGM file {path}: {exc}") from exc
    return LabelMask(labels=labels.astype(np.int32), spacing=(1.0, 1.0))


def load_mask(path: Path) -> LabelMask:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    return read_mask(path)
