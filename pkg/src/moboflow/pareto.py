"""Preference vectors, scalarizations, Pareto dominance, hypervolume and metrics."""

from __future__ import annotations

import numpy as np

SIMPLEX_TOL = 1e-9


class MetricError(ValueError):
    """A metric was requested on input where it is undefined."""


def validate_preference(lam) -> np.ndarray:
    """Check lam lies on the simplex (sums to 1, nonnegative) and return it."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim != 1 or lam.size < 1:
        raise ValueError("preference must be a 1-d vector")
    if np.any(lam < -SIMPLEX_TOL) or abs(float(lam.sum()) - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"preference {lam} is not on the simplex")
    return np.clip(lam, 0.0, None)


def dominates(a, b) -> bool:
    """True iff a >= b component-wise with at least one strict inequality."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("objective vectors must have equal length")
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_front(points):
    """Indices of the nondominated subset of ``points`` (rows).

    Incremental archive: each point evicts archive members it dominates and
    joins unless dominated itself. Duplicates of an identical vector are kept
    once (first occurrence).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return []
    archive: list[int] = []
    seen = set()
    for i in range(len(pts)):
        key = pts[i].tobytes()
        if key in seen:
            continue
        if any(dominates(pts[j], pts[i]) for j in archive):
            continue
        archive = [j for j in archive if not dominates(pts[i], pts[j])]
        archive.append(i)
        seen.add(key)
    return sorted(archive)


def hypervolume(points, ref) -> float:
    """Exact Lebesgue measure of the union of boxes [ref, y_i].

    Coordinate-sweep recursion: sort on the last axis, decompose into slabs,
    recurse on the remaining M-1 coordinates. Exact path supports M <= 4.
    """
    ref = np.asarray(ref, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    if pts.ndim != 2 or pts.shape[1] != ref.size:
        raise ValueError("points and reference must have equal width")
    if ref.size > 4:
        raise ValueError("exact hypervolume supports at most 4 objectives")
    for i, p in enumerate(pts):
        if np.any(p < ref):
            raise ValueError(f"point {p} (index {i}) lies below the reference point")
    keep = pareto_front(pts)
    pts = pts[keep]
    return _hv_recursive(pts - ref)


def _hv_recursive(pts: np.ndarray) -> float:
    # pts are nonnegative offsets from the reference point, nondominated.
    m = pts.shape[1]
    if m == 1:
        return float(pts.max())
    # sort descending on the last axis; ties broken by the remaining
    # coordinates (descending) for determinism
    order = np.lexsort(tuple(pts[:, k] for k in range(m - 1)) + (pts[:, -1],))[::-1]
    pts = pts[order]
    total = 0.0
    for i in range(len(pts)):
        z_hi = pts[i, -1]
        z_lo = pts[i + 1, -1] if i + 1 < len(pts) else 0.0
        if z_hi > z_lo:
            proj = pts[: i + 1, :-1]
            keep = pareto_front(proj)
            total += (z_hi - z_lo) * _hv_recursive(proj[keep])
    return total


def scalarize_ws(lam, f) -> float:
    """Weighted sum: sum_i lam_i f_i."""
    lam = validate_preference(lam)
    f = np.asarray(f, dtype=np.float64)
    if f.shape != lam.shape:
        raise ValueError("objective vector length must match the preference")
    return float(lam @ f)


def scalarize_tch(lam, f) -> float:
    """Tchebycheff in max form: max_i lam_i f_i (no utopia point)."""
    lam = validate_preference(lam)
    f = np.asarray(f, dtype=np.float64)
    if f.shape != lam.shape:
        raise ValueError("objective vector length must match the preference")
    return float(np.max(lam * f))


SCALARIZATIONS = {"ws": scalarize_ws, "tch": scalarize_tch}


def sample_dirichlet(alpha, rng) -> np.ndarray:
    """One Dirichlet draw via the Gamma-normalization construction."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0.0):
        raise ValueError("Dirichlet parameters must be positive")
    g = rng.standard_gamma(alpha)
    while g.sum() == 0.0:  # astronomically unlikely underflow guard
        g = rng.standard_gamma(alpha)
    return g / g.sum()


def _multiset_jaccard(a: dict, b: dict) -> float:
    keys = set(a) | set(b)
    if not keys:
        return 1.0  # two empty objects are identical
    inter = sum(min(a.get(k, 0), b.get(k, 0)) for k in keys)
    union = sum(max(a.get(k, 0), b.get(k, 0)) for k in keys)
    return inter / union


def diversity(multisets) -> float:
    """Mean pairwise (1 - multiset Jaccard similarity) over unordered pairs."""
    n = len(multisets)
    if n < 2:
        raise MetricError("diversity needs at least 2 objects")
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += 1.0 - _multiset_jaccard(multisets[i], multisets[j])
    return total / (n * (n - 1) / 2)


def _fractional_ranks(xs: np.ndarray) -> np.ndarray:
    order = np.argsort(xs, kind="stable")
    ranks = np.empty(len(xs))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    return ranks


def spearman_cor(xs, ys) -> float:
    """Spearman rank correlation: Pearson correlation of fractional ranks."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 3:
        raise MetricError("need two equal-length vectors with n >= 3")
    rx = _fractional_ranks(xs)
    ry = _fractional_ranks(ys)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0.0:
        raise MetricError("rank variance is zero; correlation undefined")
    return float((rx @ ry) / denom)
