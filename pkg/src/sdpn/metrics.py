"""Detection metrics: DET sweep, interpolated EER, and minimum detection cost.

Convention: the sweep places one operating point at every distinct score plus
an accept-all and a reject-all boundary. At threshold t a point counts misses
strictly below t and false alarms strictly above t — the corner of the DET
staircase at that score. Between corners the error rates are treated as
linear for the EER interpolation. The verification suite re-derives every
point with naive counting loops and must agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, SingleClassInput


@dataclass(frozen=True)
class DetPoint:
    threshold: float
    p_miss: float
    p_fa: float


def _split_scores(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels, dtype=bool)
    if s.shape != lab.shape or s.ndim != 1:
        raise InvalidConfig(
            f"scores/labels must be matching 1-d arrays, got {s.shape} vs {lab.shape}"
        )
    tar = s[lab]
    non = s[~lab]
    if tar.size == 0 or non.size == 0:
        raise SingleClassInput(
            f"need both classes, got {tar.size} targets / {non.size} nontargets"
        )
    return np.sort(tar), np.sort(non)


def det_sweep(scores, labels) -> list[DetPoint]:
    """Operating points at every distinct score plus both boundaries.

    p_miss is nondecreasing and p_fa nonincreasing in the threshold, so the
    returned list is ordered along the DET curve.
    """
    tar, non = _split_scores(scores, labels)
    distinct = np.unique(np.concatenate([tar, non]))
    thresholds = np.concatenate(
        [[distinct[0] - 1.0], distinct, [distinct[-1] + 1.0]])
    # count of targets strictly below t / nontargets strictly above t
    p_miss = np.searchsorted(tar, thresholds, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non, thresholds, side="right")) / non.size
    return [DetPoint(float(t), float(pm), float(pf))
            for t, pm, pf in zip(thresholds, p_miss, p_fa)]


def eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and its threshold, linearly interpolated.

    Scans the sweep for the first point where p_miss >= p_fa; if the
    difference is exactly zero there, that point is the EER, otherwise the
    crossing is interpolated between it and its predecessor.
    """
    points = det_sweep(scores, labels)
    for i, pt in enumerate(points):
        diff = pt.p_miss - pt.p_fa
        if diff < 0:
            continue
        if diff == 0.0 or i == 0:
            return pt.p_miss, pt.threshold
        prev = points[i - 1]
        rise = (pt.p_miss - prev.p_miss) + (prev.p_fa - pt.p_fa)
        t = (prev.p_fa - prev.p_miss) / rise
        value = prev.p_miss + t * (pt.p_miss - prev.p_miss)
        threshold = prev.threshold + t * (pt.threshold - prev.threshold)
        return value, threshold
    # unreachable: the reject-all point has p_miss=1 >= p_fa=0
    raise AssertionError("DET sweep had no crossing")


def min_dcf(scores, labels, p_target: float = 0.05, c_miss: float = 1.0,
            c_fa: float = 1.0) -> tuple[float, float]:
    """Minimum normalized detection cost over the sweep, with its threshold.

    cost(t) = [c_miss * p_miss * p_target + c_fa * p_fa * (1 - p_target)]
              / min(c_miss * p_target, c_fa * (1 - p_target)).
    The reject-all boundary always yields cost 1, so the minimum is <= 1.
    Ties go to the lowest threshold.
    """
    if not 0.0 < p_target < 1.0:
        raise InvalidConfig(f"p_target must be in (0, 1), got {p_target}")
    if c_miss <= 0 or c_fa <= 0:
        raise InvalidConfig(
            f"costs must be positive, got c_miss={c_miss} c_fa={c_fa}")
    points = det_sweep(scores, labels)
    denom = min(c_miss * p_target, c_fa * (1.0 - p_target))
    costs = np.array([
        (c_miss * pt.p_miss * p_target + c_fa * pt.p_fa * (1.0 - p_target))
        / denom
        for pt in points
    ])
    best = int(np.argmin(costs))
    return float(costs[best]), points[best].threshold


def evaluation_report(scores, labels, p_target: float = 0.05,
                      c_miss: float = 1.0, c_fa: float = 1.0) -> dict:
    """All evaluation numbers in the report layout the CLI writes."""
    lab = np.asarray(labels, dtype=bool)
    eer_value, eer_thr = eer(scores, lab)
    dcf_value, dcf_thr = min_dcf(scores, lab, p_target, c_miss, c_fa)
    return {
        "trials": int(lab.size),
        "targets": int(lab.sum()),
        "nontargets": int((~lab).sum()),
        "eer": eer_value,
        "eer_threshold": eer_thr,
        "min_dcf": dcf_value,
        "dcf_threshold": dcf_thr,
        "p_target": p_target,
        "c_miss": c_miss,
        "c_fa": c_fa,
    }
