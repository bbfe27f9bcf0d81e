"""Pair construction, Adam, the training loop and evaluation reports."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import geom
from .loss import breakdown, loss_t, topology_term
from .metrics import chamfer
from .model import ModelConfig, bind, init_params, save_checkpoint, unroll, unroll_t

log = logging.getLogger(__name__)

MESH_SUFFIXES = (".off", ".obj")
NEIGHBOR_SOURCES = ("knn", "mesh")


class NumericalHalt(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, iteration: int, checkpoint: Path | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 2000
    points: int = 1024
    lam: float = 0.1
    neighbors: str = "knn"
    knn_k: int = 6
    topo_form: str = "squared"
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.points < 2:
            raise ValueError("points must be >= 2")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.neighbors not in NEIGHBOR_SOURCES:
            raise ValueError(f"neighbors must be one of {NEIGHBOR_SOURCES}")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.topo_form not in ("squared", "raw"):
            raise ValueError("topo_form must be 'squared' or 'raw'")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ValueError("log_every and checkpoint_every must be >= 1")

    @classmethod
    def from_mapping(cls, kv: dict) -> "TrainConfig":
        out = {}
        for f in fields(cls):
            if f.name in kv:
                raw = str(kv[f.name]).strip()
                out[f.name] = raw if f.type == "str" else (
                    float(raw) if f.type == "float" else int(raw))
        return cls(**out)


# --------------------------------------------------------------------------
# Pairs


@dataclass
class Shape:
    """A mesh prepared for training: sampled, normalized, with its neighbor graph."""

    path: Path
    mesh: geom.TriMesh
    cloud: geom.PointCloud  # normalized
    transform: geom.NormTransform
    source_map: np.ndarray
    graph: geom.NeighborGraph | None


def prepare_shape(path, points: int | None, seed: int, neighbors: str | None = "knn", k: int = 6,
                  mesh: geom.TriMesh | None = None) -> Shape:
    """Load, sample and normalize one mesh.

    ``points=None`` uses every vertex in order, the mode required for mesh export.
    ``neighbors=None`` skips building the neighbor graph.
    """
    path = Path(path)
    if mesh is None:
        try:
            mesh = geom.load_mesh(path)
        except (OSError, ValueError) as exc:
            raise ValueError(f"{path}: {exc}") from exc
    n = len(mesh.vertices) if points is None else points
    raw, source_map = geom.sample_points(mesh, n, seed)
    cloud, tf = geom.normalize_unit_sphere(raw)
    if neighbors == "mesh":
        if not np.array_equal(source_map, np.arange(len(mesh.vertices))):
            raise ValueError(f"{path}: mesh-edge neighbors need one point per vertex "
                             f"(points={len(mesh.vertices)}), got {n}")
        graph = geom.mesh_edge_graph(mesh)
    elif neighbors == "knn":
        graph = geom.knn_graph(cloud, min(k, len(cloud) - 1))
    else:
        graph = None
    return Shape(path, mesh, cloud, tf, source_map, graph)


@dataclass
class PairSet:
    shapes: list
    mode: str = "fixed-pair"
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode not in ("fixed-pair", "random-pairs"):
            raise ValueError(f"unknown pair mode {self.mode!r}")
        if self.mode == "fixed-pair" and len(self.shapes) != 2:
            raise ValueError("fixed-pair mode needs exactly one (source, target) pair")
        if self.mode == "random-pairs" and len(self.shapes) < 2:
            raise ValueError("random-pairs mode needs at least 2 meshes")
        self._rng = np.random.default_rng(self.seed)

    def draw(self) -> tuple[Shape, Shape]:
        """Next ``(source, target)``; random mode picks ordered pairs with no self-pairs."""
        if self.mode == "fixed-pair":
            return self.shapes[0], self.shapes[1]
        m = len(self.shapes)
        i = int(self._rng.integers(m))
        j = int(self._rng.integers(m - 1))
        if j >= i:
            j += 1
        return self.shapes[i], self.shapes[j]


def make_pairs(dataset_dir=None, mode: str = "random-pairs", seed: int = 0,
               pair: tuple | None = None, config: TrainConfig | None = None) -> PairSet:
    """Build a :class:`PairSet` from a mesh directory or an explicit ``(source, target)``."""
    config = config or TrainConfig()
    if pair is not None:
        mode, paths = "fixed-pair", [Path(p) for p in pair]
    else:
        if dataset_dir is None:
            raise ValueError("either dataset_dir or pair is required")
        root = Path(dataset_dir)
        if not root.is_dir():
            raise ValueError(f"{root}: not a directory")
        paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in MESH_SUFFIXES)
        if not paths:
            raise ValueError(f"{root}: no .off/.obj meshes found")
    shapes = []
    cache = {}
    for p in paths:
        if p not in cache:
            cache[p] = prepare_shape(p, config.points, config.seed, config.neighbors,
                                     config.knn_k)
        shapes.append(cache[p])
    if mode == "fixed-pair" and pair is None:
        if len(shapes) < 1:
            raise ValueError("fixed-pair mode needs at least one mesh")
        shapes = [shapes[0], shapes[1] if len(shapes) > 1 else shapes[0]]
    return PairSet(shapes, mode, seed)


# --------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new parameter and state objects."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape "
                             f"{params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalHalt(f"non-finite gradient for {k}", state.step)
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# Training


def loss_and_grads(params: dict, model_config: ModelConfig, source: geom.PointCloud,
                   target: geom.PointCloud, graph: geom.NeighborGraph, lam: float,
                   form: str = "squared"):
    tape = ad.Tape()
    leaves = bind(tape, params)
    frames = unroll_t(leaves, model_config, tape.constant(source.points),
                      tape.constant(target.points))
    total, cd, topo = loss_t(frames, target.points, graph, lam, form)
    grads = ad.backward(tape, total)
    return breakdown(total, cd, topo, lam), {k: grads[t] for k, t in leaves.items()}


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def format_log_line(it: int, lb) -> str:
    return f"{it}\t{lb.chamfer!r}\t{lb.topology!r}\t{lb.total!r}"


LOG_HEADER = "iter\tchamfer\ttopology\ttotal"


def train(pairs: PairSet, model_config: ModelConfig, train_config: TrainConfig,
          out_dir=None, params: dict | None = None):
    """Fit the model, one pair per iteration.

    Returns ``(params, log)`` where ``log`` holds ``(iteration, LossBreakdown)``
    entries every ``log_every`` iterations plus a final entry evaluated after the
    last update. With ``out_dir`` set, ``metrics.tsv``, periodic checkpoints,
    ``last.ckpt`` and ``final.ckpt`` are written there. On a non-finite loss or
    gradient :class:`NumericalHalt` is raised and ``last.ckpt`` keeps the most
    recent finite parameters.
    """
    tc = train_config
    params = init_params(model_config) if params is None else dict(params)
    state = AdamState.zeros(params)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_atomic(out / "last.ckpt", save_checkpoint(params, model_config))
        metrics_fh = open(out / "metrics.tsv", "w")
        metrics_fh.write(LOG_HEADER + "\n")
    history = []

    def record(it, lb):
        history.append((it, lb))
        if metrics_fh is not None:
            metrics_fh.write(format_log_line(it, lb) + "\n")
            metrics_fh.flush()

    pair = None
    try:
        for it in range(tc.iterations + 1):
            # the closing evaluation reuses the last training pair
            if it < tc.iterations or pair is None:
                pair = pairs.draw()
            src, tgt = pair
            try:
                lb, grads = loss_and_grads(params, model_config, src.cloud, tgt.cloud,
                                           src.graph, tc.lam, tc.topo_form)
            except ad.NonFiniteError as exc:
                raise NumericalHalt(f"iteration {it}: {exc}", it) from exc
            if it == tc.iterations:
                record(it, lb)
                break
            if it % tc.log_every == 0:
                record(it, lb)
                log.info("iter %d chamfer %.6g topology %.6g total %.6g",
                         it, lb.chamfer, lb.topology, lb.total)
            params, state = adam_step(params, grads, state, tc.learning_rate, tc.beta1,
                                      tc.beta2, tc.eps)
            done = it + 1
            if out is not None and done % tc.checkpoint_every == 0:
                blob = save_checkpoint(params, model_config)
                (out / f"ckpt_{done:06d}.ckpt").write_bytes(blob)
                _write_atomic(out / "last.ckpt", blob)
    except NumericalHalt as exc:
        exc.checkpoint = out / "last.ckpt" if out is not None else None
        raise
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if out is not None:
        blob = save_checkpoint(params, model_config)
        _write_atomic(out / "last.ckpt", blob)
        (out / "final.ckpt").write_bytes(blob)
    return params, history


# --------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class EvalReport:
    chamfer: float  # final frame vs target
    topology: float
    frame_to_source: tuple  # Chamfer of every frame to the source
    frame_to_target: tuple

    def lines(self) -> list[str]:
        T = len(self.frame_to_source) - 1
        out = [f"chamfer_final: {self.chamfer!r}", f"topology: {self.topology!r}"]
        for t, (a, b) in enumerate(zip(self.frame_to_source, self.frame_to_target)):
            out.append(f"frame {t} (alpha={1 - t / T:.4f}): chamfer_to_source={a!r} "
                       f"chamfer_to_target={b!r}")
        return out

    def tsv_header(self) -> str:
        T = len(self.frame_to_source) - 1
        cols = ["chamfer_final", "topology"]
        cols += [f"cd_src_{t}" for t in range(T + 1)]
        cols += [f"cd_tgt_{t}" for t in range(T + 1)]
        return "\t".join(cols)

    def tsv(self) -> str:
        vals = [self.chamfer, self.topology, *self.frame_to_source, *self.frame_to_target]
        return "\t".join(repr(float(v)) for v in vals)


def evaluate(params: dict, model_config: ModelConfig, source: Shape, target: Shape,
             form: str = "squared") -> EvalReport:
    traj = unroll(params, model_config, source.cloud, target.cloud)
    to_src = tuple(chamfer(f, source.cloud).value for f in traj.frames)
    to_tgt = tuple(chamfer(f, target.cloud).value for f in traj.frames)
    topo = topology_term(traj.frames[0], traj.final, source.graph, form)
    return EvalReport(to_tgt[-1], topo, to_src, to_tgt)
