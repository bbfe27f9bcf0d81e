"""Training objective: Chamfer distance to the target plus an edge-length distortion penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geom import GeometryError, NeighborGraph, sqdist
from .metrics import _as_points

TOPO_FORMS = ("squared", "raw")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    chamfer: float
    topology: float
    lam: float


def nearest_dense(Q: np.ndarray, P: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Index of the nearest row of ``P`` for each row of ``Q``, ties to the lower index.

    Vectorized exhaustive scan; distances are bit-identical to :func:`geom.sqdist`.
    """
    out = np.empty(len(Q), dtype=np.int64)
    for s in range(0, len(Q), chunk):
        d = sqdist(P[None, :, :], Q[s:s + chunk, None, :])
        out[s:s + chunk] = np.argmin(d, axis=1)
    return out


def chamfer_assignments(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return nearest_dense(A, B), nearest_dense(B, A)


def chamfer_t(Xhat: ad.Tensor, B: np.ndarray, assignments=None) -> ad.Tensor:
    """Differentiable Chamfer distance with nearest-neighbor assignments held fixed.

    The assignments are recomputed from ``Xhat`` unless given explicitly.
    """
    tape = Xhat.tape
    if assignments is None:
        assignments = chamfer_assignments(Xhat.value, B)
    a_to_b, b_to_a = assignments
    fwd = ad.row_sqnorm(Xhat - tape.constant(B[a_to_b]))
    bwd = ad.row_sqnorm(ad.take_rows(Xhat, b_to_a) - tape.constant(B))
    return ad.mean(fwd) + ad.mean(bwd)


def _edge_sqlen(X, src, dst):
    if isinstance(X, ad.Tensor):
        return ad.row_sqnorm(ad.take_rows(X, src) - ad.take_rows(X, dst))
    return sqdist(X[src], X[dst])


def topology_t(X0, XT: ad.Tensor, graph: NeighborGraph, form: str = "squared") -> ad.Tensor:
    """Mean over directed neighbor pairs of the change in squared edge length.

    ``squared`` penalizes ``(|p_i - p_j|^2 - |q_i - q_j|^2)^2``; ``raw`` keeps the
    signed difference ``|p_i - p_j|^2 - |q_i - q_j|^2``. ``X0`` may be a tensor
    or a plain array.
    """
    if form not in TOPO_FORMS:
        raise ValueError(f"unknown topology form {form!r}; expected one of {TOPO_FORMS}")
    n0 = X0.shape[0]
    if n0 != XT.shape[0]:
        raise GeometryError(f"point counts differ: {n0} vs {XT.shape[0]}")
    if len(graph) != n0:
        raise GeometryError(f"graph covers {len(graph)} points, clouds have {n0}")
    src, dst = graph.directed_edges()
    e0 = _edge_sqlen(X0, src, dst)
    e1 = _edge_sqlen(XT, src, dst)
    diff = ad.sub(e0, e1)
    return ad.mean(ad.square(diff) if form == "squared" else diff)


def loss_t(frames: list, Xb: np.ndarray, graph: NeighborGraph, lam: float,
           form: str = "squared", assignments=None) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """``(total, chamfer, topology)`` tensors. Only the first and last frames are used."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    cd = chamfer_t(frames[-1], Xb, assignments)
    topo = topology_t(frames[0], frames[-1], graph, form)
    return cd + lam * topo, cd, topo


def breakdown(total: ad.Tensor, cd: ad.Tensor, topo: ad.Tensor, lam: float) -> LossBreakdown:
    return LossBreakdown(float(total.value), float(cd.value), float(topo.value), float(lam))


def topology_term(X0, XT, graph: NeighborGraph, form: str = "squared") -> float:
    """Edge-length distortion between a source cloud and its image (row ``i`` maps to row ``i``)."""
    A, B = _as_points(X0), _as_points(XT)
    if len(A) != len(B):
        raise GeometryError(f"point counts differ: {len(A)} vs {len(B)}")
    tape = ad.Tape()
    return float(topology_t(A, tape.constant(B), graph, form).value)


def total_loss(traj, Xb, graph: NeighborGraph, lam: float = 0.1,
               form: str = "squared") -> LossBreakdown:
    """Composite loss of a trajectory's last frame against the target ``Xb``."""
    frames = traj.frames if hasattr(traj, "frames") else traj
    tape = ad.Tape()
    F = [tape.constant(_as_points(f)) for f in (frames[0], frames[-1])]
    B = _as_points(Xb)
    return breakdown(*loss_t(F, B, graph, lam, form), lam)

