"""Relaxed precision/recall with pixel slack, PR curves and break-even points."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

DEFAULT_RHO = 3
CHEBYSHEV = "chebyshev"
EUCLIDEAN = "euclidean"
CSV_HEADER = "threshold,relaxed_precision,relaxed_recall,strict_precision,strict_recall"


def default_thresholds() -> np.ndarray:
    return np.round(np.arange(1, 100) / 100, 2)


def _shift_or(m: np.ndarray, rho: int, axis: int) -> np.ndarray:
    out = m.copy()
    n = m.shape[axis]
    for d in range(1, min(rho, n - 1) + 1):
        lo = [slice(None)] * m.ndim
        hi = [slice(None)] * m.ndim
        lo[axis], hi[axis] = slice(0, n - d), slice(d, n)
        out[tuple(lo)] |= m[tuple(hi)]
        out[tuple(hi)] |= m[tuple(lo)]
    return out


def dilate(mask: np.ndarray, rho: int, distance: str = CHEBYSHEV) -> np.ndarray:
    """Set every pixel within ``rho`` of a foreground pixel. Outside the image counts as background."""
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    m = np.asarray(mask).astype(bool)
    if rho == 0 or not m.any():
        return m.copy()
    if distance == CHEBYSHEV:
        # The square structuring element is separable into a row pass and a column pass.
        return _shift_or(_shift_or(m, rho, 0), rho, 1)
    if distance == EUCLIDEAN:
        return ndimage.distance_transform_edt(~m) <= rho
    raise ValueError(f"unknown distance {distance!r}")


@dataclass(frozen=True)
class Counts:
    """Integer tallies behind one relaxed precision/recall pair. They add across images."""

    pred_hit: int = 0
    pred_total: int = 0
    gt_hit: int = 0
    gt_total: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(
            self.pred_hit + other.pred_hit, self.pred_total + other.pred_total,
            self.gt_hit + other.gt_hit, self.gt_total + other.gt_total,
        )

    @property
    def precision(self) -> float:
        if self.pred_total == 0:
            log.debug("no predicted road pixels; precision taken as 1")
            return 1.0
        return self.pred_hit / self.pred_total

    @property
    def recall(self) -> float:
        if self.gt_total == 0:
            log.debug("no ground-truth road pixels; recall taken as 1")
            return 1.0
        return self.gt_hit / self.gt_total


def relaxed_counts(pred: np.ndarray, gt: np.ndarray, rho: int, distance: str = CHEBYSHEV) -> Counts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return Counts(
        int(np.count_nonzero(pred & dilate(gt, rho, distance))), int(np.count_nonzero(pred)),
        int(np.count_nonzero(gt & dilate(pred, rho, distance))), int(np.count_nonzero(gt)),
    )


def relaxed_pr(pred: np.ndarray, gt: np.ndarray, rho: int = DEFAULT_RHO, distance: str = CHEBYSHEV):
    """(precision, recall) where a match may be up to ``rho`` pixels away."""
    c = relaxed_counts(pred, gt, rho, distance)
    return c.precision, c.recall


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    relaxed_precision: float
    relaxed_recall: float
    strict_precision: float
    strict_recall: float


@dataclass
class PRCurve:
    points: list[PRPoint]
    breakeven: float
    rho: int = DEFAULT_RHO
    distance: str = CHEBYSHEV

    def to_csv(self) -> str:
        rows = [CSV_HEADER]
        for p in self.points:
            rows.append(
                f"{p.threshold:.6g},{p.relaxed_precision:.10f},{p.relaxed_recall:.10f},"
                f"{p.strict_precision:.10f},{p.strict_recall:.10f}"
            )
        return "\n".join(rows) + "\n"

    def summary(self) -> str:
        return f"breakeven={self.breakeven:.6f}, rho={self.rho}, distance={self.distance}"


def _as_list(x) -> list[np.ndarray]:
    if isinstance(x, np.ndarray):
        return [x]
    return list(x)


def pr_curve(
    probs,
    gt,
    rho: int = DEFAULT_RHO,
    thresholds: Iterable[float] | None = None,
    distance: str = CHEBYSHEV,
) -> PRCurve:
    """One point per threshold (``probs >= t``); several images are pooled before dividing."""
    prob_list, gt_list = _as_list(probs), _as_list(gt)
    if len(prob_list) != len(gt_list):
        raise ValueError(f"{len(prob_list)} probability maps for {len(gt_list)} masks")
    ts = default_thresholds() if thresholds is None else np.asarray(list(thresholds), dtype=np.float64)
    if ts.size == 0 or np.any(np.diff(ts) <= 0):
        raise ValueError("thresholds must be a non-empty strictly increasing sequence")
    for p, g in zip(prob_list, gt_list):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"probability map shape {np.shape(p)} != mask shape {np.shape(g)}")
    gts = [np.asarray(g).astype(bool) for g in gt_list]
    gt_dil = [dilate(g, rho, distance) for g in gts]

    points = []
    for t in ts:
        relaxed, strict = Counts(), Counts()
        for p, g, gd in zip(prob_list, gts, gt_dil):
            pred = np.asarray(p) >= t
            pd = dilate(pred, rho, distance)
            relaxed += Counts(
                int(np.count_nonzero(pred & gd)), int(np.count_nonzero(pred)),
                int(np.count_nonzero(g & pd)), int(np.count_nonzero(g)),
            )
            strict += relaxed_counts(pred, g, 0)
        points.append(PRPoint(float(t), relaxed.precision, relaxed.recall, strict.precision, strict.recall))
    return PRCurve(points, breakeven(points), rho, distance)


def breakeven(points: Sequence) -> float:
    """Where the curve crosses precision == recall.

    ``points`` holds PRPoint objects or (precision, recall) pairs, in threshold
    order. The first sign change of precision - recall is linearly
    interpolated; without one, the point closest to the diagonal is used.
    """
    if len(points) == 0:
        raise ValueError("breakeven of an empty curve is undefined")
    pr = [
        (p.relaxed_precision, p.relaxed_recall) if isinstance(p, PRPoint) else (float(p[0]), float(p[1]))
        for p in points
    ]
    diffs = [p - r for p, r in pr]
    for i, d1 in enumerate(diffs):
        if d1 == 0:
            return pr[i][0]
        if i + 1 == len(pr):
            break
        d2 = diffs[i + 1]
        if d2 != 0 and (d1 > 0) != (d2 > 0):
            t = d1 / (d1 - d2)
            return pr[i][0] + t * (pr[i + 1][0] - pr[i][0])
    i = int(np.argmin(np.abs(diffs)))
    return (pr[i][0] + pr[i][1]) / 2
