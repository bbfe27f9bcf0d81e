"""Target encoder, per-step residual point MLPs, unrolling and checkpoints.

A source cloud is moved through ``T`` residual steps,

    p <- p + h_t(p, z),    z = E(target),

where ``E`` is a Deep Sets encoder (per-point MLP, mean pooling, post-pool
MLP) and each ``h_t`` is a small MLP applied to every point independently.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .geom import GeometryError, PointCloud

MAGIC = b"PCMORPH1"
FORMAT_VERSION = 1
ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    steps: int = 4
    latent_dim: int = 128
    encoder_widths: tuple = (128, 128)
    post_widths: tuple = ()  # hidden layers after pooling; a final linear layer maps to latent_dim
    step_widths: tuple = (128, 128)
    activation: str = "tanh"
    share_weights: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("encoder_widths", "post_widths", "step_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not self.encoder_widths:
            raise ValueError("encoder needs at least one per-point layer")
        if any(w < 1 for w in self.encoder_widths + self.post_widths + self.step_widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(w) for w in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: dict) -> "ModelConfig":
        """Build from string values (config files, checkpoint headers)."""
        out = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = str(kv[f.name]).strip()
            if f.name.endswith("_widths"):
                out[f.name] = tuple(int(w) for w in raw.split(",") if w.strip())
            elif f.name == "share_weights":
                out[f.name] = raw.lower() in ("1", "true", "yes")
            elif f.name == "activation":
                out[f.name] = raw
            else:
                out[f.name] = int(raw)
        return cls(**out)

    def step_networks(self) -> int:
        return 1 if self.share_weights else self.steps


def _layer_shapes(config: ModelConfig) -> list[tuple[str, int, int]]:
    """``(prefix, fan_in, fan_out)`` for every dense layer, in checkpoint order."""
    layers = []
    widths = (3,) + config.encoder_widths
    for k in range(len(widths) - 1):
        layers.append((f"enc.point.{k}", widths[k], widths[k + 1]))
    widths = (config.encoder_widths[-1],) + config.post_widths + (config.latent_dim,)
    for k in range(len(widths) - 1):
        layers.append((f"enc.post.{k}", widths[k], widths[k + 1]))
    widths = (3 + config.latent_dim,) + config.step_widths + (3,)
    for t in range(config.step_networks()):
        for k in range(len(widths) - 1):
            layers.append((f"step.{t}.{k}", widths[k], widths[k + 1]))
    return layers


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    for prefix, fi, fo in _layer_shapes(config):
        shapes[f"{prefix}.W"] = (fi, fo)
        shapes[f"{prefix}.b"] = (fo,)
    return shapes


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and zero biases, drawn from a generator seeded by ``config.seed``.

    The last layer of every step network is all zeros, so a fresh model maps
    any cloud to itself at every step.
    """
    rng = np.random.default_rng(config.seed)
    n_step_layers = len(config.step_widths) + 1
    params = {}
    for prefix, fi, fo in _layer_shapes(config):
        last_step_layer = prefix.startswith("step.") and prefix.endswith(f".{n_step_layers - 1}")
        if last_step_layer:
            W = np.zeros((fi, fo))
        else:
            bound = np.sqrt(6.0 / (fi + fo))
            W = rng.uniform(-bound, bound, size=(fi, fo))
        params[f"{prefix}.W"] = W
        params[f"{prefix}.b"] = np.zeros(fo)
    return params


def check_params(params: dict, config: ModelConfig):
    expected = param_shapes(config)
    if list(params) != list(expected):
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        raise CheckpointError(f"parameter names do not match config "
                              f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise CheckpointError(f"{name}: non-finite values")


# --------------------------------------------------------------------------
# Differentiable forward pass


def _dense(x, leaves, prefix, act=None):
    y = ad.matmul(x, leaves[f"{prefix}.W"]) + leaves[f"{prefix}.b"]
    return act(y) if act else y


def encode_t(leaves: dict, config: ModelConfig, X: ad.Tensor) -> ad.Tensor:
    """Deep Sets encoding of the rows of ``X``; returns shape ``(1, latent_dim)``."""
    act = ACTIVATIONS[config.activation]
    h = X
    for k in range(len(config.encoder_widths)):
        h = _dense(h, leaves, f"enc.point.{k}", act)
    h = ad.mean_rows(h)
    n_post = len(config.post_widths) + 1
    for k in range(n_post):
        h = _dense(h, leaves, f"enc.post.{k}", act if k < n_post - 1 else None)
    return h


def step_t(leaves: dict, config: ModelConfig, t: int, P: ad.Tensor, z: ad.Tensor) -> ad.Tensor:
    """Displacement ``h_t(p, z)`` for every row ``p`` of ``P``."""
    if not 0 <= t < config.steps:
        raise IndexError(f"step index {t} outside [0, {config.steps})")
    net = 0 if config.share_weights else t
    act = ACTIVATIONS[config.activation]
    h = ad.concat_cols([P, ad.repeat_rows(z, P.shape[0])])
    n_layers = len(config.step_widths) + 1
    for k in range(n_layers):
        h = _dense(h, leaves, f"step.{net}.{k}", act if k < n_layers - 1 else None)
    return h


def unroll_t(leaves: dict, config: ModelConfig, Xa: ad.Tensor, Xb: ad.Tensor) -> list[ad.Tensor]:
    """All ``T + 1`` frames as tensors; the encoding of ``Xb`` is computed once."""
    z = encode_t(leaves, config, Xb)
    frames = [Xa]
    for t in range(config.steps):
        P = frames[-1]
        frames.append(P + step_t(leaves, config, t, P, z))
    return frames


def bind(tape: ad.Tape, params: dict) -> dict[str, ad.Tensor]:
    return {k: tape.leaf(v, name=k) for k, v in params.items()}


# --------------------------------------------------------------------------
# Plain (numpy-in, numpy-out) interface


@dataclass(frozen=True)
class Trajectory:
    frames: tuple  # of PointCloud, frames[0] is the source

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def final(self) -> PointCloud:
        return self.frames[-1]


def _points(X) -> np.ndarray:
    pts = X.points if isinstance(X, PointCloud) else np.asarray(X, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise GeometryError(f"expected a nonempty (n, 3) point set, got shape {pts.shape}")
    return pts


def encode(params: dict, config: ModelConfig, Xb) -> np.ndarray:
    tape = ad.Tape()
    z = encode_t(bind(tape, params), config, tape.constant(_points(Xb)))
    return z.value[0].copy()


def step(params: dict, config: ModelConfig, t: int, p, z) -> np.ndarray:
    """Displacement of a single point ``p`` at step ``t`` given latent ``z``."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != config.latent_dim:
        raise ad.ShapeError(f"step: latent has dimension {z.shape[1]}, "
                            f"model expects {config.latent_dim}")
    tape = ad.Tape()
    P = tape.constant(np.asarray(p, dtype=np.float64).reshape(1, 3))
    out = step_t(bind(tape, params), config, t, P, tape.constant(z))
    return out.value[0].copy()


def unroll(params: dict, config: ModelConfig, Xa, Xb) -> Trajectory:
    tape = ad.Tape()
    leaves = bind(tape, params)
    frames = unroll_t(leaves, config, tape.constant(_points(Xa)), tape.constant(_points(Xb)))
    return Trajectory(tuple(PointCloud(f.value) for f in frames))


# --------------------------------------------------------------------------
# Checkpoints
#
# Layout (all integers unsigned 64-bit little-endian, floats IEEE float64 LE):
#   magic "PCMORPH1"
#   header length, header bytes (UTF-8 "key=value" lines: version, then ModelConfig)
#   per tensor, in param_shapes() order: name length, name, rank, dims..., values


def save_checkpoint(params: dict, config: ModelConfig) -> bytes:
    check_params(params, config)
    out = io.BytesIO()
    out.write(MAGIC)
    header = f"version={FORMAT_VERSION}\n{config.to_text()}".encode("utf-8")
    out.write(struct.pack("<Q", len(header)))
    out.write(header)
    for name in param_shapes(config):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.write(struct.pack("<Q", len(raw)))
        out.write(raw)
        out.write(struct.pack("<Q", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(data: bytes) -> tuple[dict, ModelConfig]:
    r = _Reader(bytes(data))
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a pcmorph checkpoint (bad magic)")
    try:
        header = r.take(r.u64()).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("checkpoint header is not UTF-8") from None
    kv = dict(line.split("=", 1) for line in header.splitlines() if "=" in line)
    if kv.pop("version", None) != str(FORMAT_VERSION):
        raise CheckpointError("unsupported checkpoint version")
    try:
        config = ModelConfig.from_mapping(kv)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config in checkpoint header: {exc}") from None

    params = {}
    for name, shape in param_shapes(config).items():
        got = r.take(r.u64()).decode("utf-8", errors="replace")
        if got != name:
            raise CheckpointError(f"expected tensor {name!r}, found {got!r}")
        rank = r.u64()
        if rank > 8:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        if tuple(dims) != shape:
            raise CheckpointError(f"{name}: shape {dims} does not match config {shape}")
        count = int(np.prod(dims, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after last tensor")
    check_params(params, config)
    return params, config
