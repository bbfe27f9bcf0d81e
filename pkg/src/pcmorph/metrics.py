"""Chamfer distance and the naive (index-paired) interpolation baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import GeometryError, PointCloud, build_kdtree, nearest_many, sqdist

BRUTEFORCE_LIMIT = 10**7


@dataclass(frozen=True)
class ChamferResult:
    value: float
    a_to_b: np.ndarray  # for each point of A, index of its nearest point in B
    b_to_a: np.ndarray


def ordered_mean(values: np.ndarray) -> float:
    """Mean with a reproducible accumulation.

    ``math.fsum`` is correctly rounded, so the result does not depend on how a
    caller happened to order or chunk the terms; every Chamfer code path in the
    package goes through here.
    """
    return math.fsum(np.asarray(values, dtype=np.float64).tolist()) / len(values)


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise GeometryError(f"expected a nonempty (n, 3) point set, got shape {pts.shape}")
    return pts


def chamfer_from_assignments(A: np.ndarray, B: np.ndarray, a_to_b, b_to_a) -> float:
    d_ab = sqdist(A, B[a_to_b])
    d_ba = sqdist(B, A[b_to_a])
    return ordered_mean(d_ab) + ordered_mean(d_ba)


def chamfer(A, B) -> ChamferResult:
    """Symmetric Chamfer distance with squared distances and per-side means.

    ``CD(A, B) = mean_a min_b |a - b|^2 + mean_b min_a |a - b|^2``, with nearest
    neighbors found through a kd-tree on each side.
    """
    A, B = _as_points(A), _as_points(B)
    a_to_b, _ = nearest_many(build_kdtree(PointCloud(B)), A)
    b_to_a, _ = nearest_many(build_kdtree(PointCloud(A)), B)
    return ChamferResult(chamfer_from_assignments(A, B, a_to_b, b_to_a), a_to_b, b_to_a)


def nearest_bruteforce(Q: np.ndarray, P: np.ndarray) -> np.ndarray:
    """For each row of ``Q`` the index of its nearest row of ``P`` (ties: lower index)."""
    out = np.empty(len(Q), dtype=np.int64)
    for r, q in enumerate(Q):
        out[r] = np.argmin(sqdist(P, q))
    return out


def chamfer_bruteforce(A, B) -> ChamferResult:
    """Exhaustive O(|A|·|B|) Chamfer distance; the test oracle for :func:`chamfer`."""
    A, B = _as_points(A), _as_points(B)
    if len(A) * len(B) > BRUTEFORCE_LIMIT:
        raise ValueError(f"|A|*|B| = {len(A) * len(B)} exceeds brute-force limit "
                         f"{BRUTEFORCE_LIMIT}")
    a_to_b = nearest_bruteforce(A, B)
    b_to_a = nearest_bruteforce(B, A)
    return ChamferResult(chamfer_from_assignments(A, B, a_to_b, b_to_a), a_to_b, b_to_a)


def naive_interpolate(Xa, Xb, alpha: float) -> PointCloud:
    """Straight-line blend of index-paired points: ``alpha * a_i + (1 - alpha) * b_i``."""
    A, B = _as_points(Xa), _as_points(Xb)
    if len(A) != len(B):
        raise GeometryError(f"point counts differ: {len(A)} vs {len(B)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return PointCloud(A)
    if alpha == 0.0:
        return PointCloud(B)
    return PointCloud(alpha * A + (1.0 - alpha) * B)
