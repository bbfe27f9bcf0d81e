"""Finite-difference gradient checks for every differentiable component."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import geom
from .loss import chamfer_assignments, loss_t
from .model import ModelConfig, encode_t, init_params, step_t, unroll_t

TOLERANCE = 1e-6
SMALL_MODEL = ModelConfig(steps=2, latent_dim=6, encoder_widths=(8, 8), post_widths=(8,),
                          step_widths=(8, 8), activation="tanh")


def _weighted_sum(y: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    # random projection so every output entry contributes a distinct weight
    return ad.sum(ad.mul(y, w.reshape(y.shape)))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (margin + np.abs(x))


def primitive_cases(rng) -> dict:
    """``name -> (f, params)`` pairs, one per primitive."""
    A = rng.normal(size=(10, 10))
    B = rng.normal(size=(10, 10))
    cases = {}

    def unary(op, x):
        w = rng.normal(size=op(ad.Tape().constant(x)).shape)
        return (lambda tape, v: _weighted_sum(op(v["x"]), w)), {"x": x}

    def binary(op, x, y):
        tape = ad.Tape()
        w = rng.normal(size=op(tape.constant(x), tape.constant(y)).shape)
        return (lambda tape, v: _weighted_sum(op(v["x"], v["y"]), w)), {"x": x, "y": y}

    cases["add"] = binary(ad.add, A, B)
    cases["add_broadcast"] = binary(ad.add, A, rng.normal(size=10))
    cases["sub"] = binary(ad.sub, A, B)
    cases["mul"] = binary(ad.mul, A, B)
    cases["matmul"] = binary(ad.matmul, A, rng.normal(size=(10, 4)))
    cases["concat_rows"] = binary(lambda x, y: ad.concat_rows([x, y]), A, B)
    cases["concat_cols"] = binary(lambda x, y: ad.concat_cols([x, y]), A, rng.normal(size=(10, 2)))
    cases["relu"] = unary(ad.relu, _away_from_zero(rng, (10, 10)))
    cases["tanh"] = unary(ad.tanh, A)
    cases["square"] = unary(ad.square, A)
    cases["sum"] = (lambda tape, v: ad.sum(ad.square(v["x"])), {"x": A})
    cases["mean"] = (lambda tape, v: ad.mean(ad.square(v["x"])), {"x": A})
    cases["mean_rows"] = unary(ad.mean_rows, A)
    cases["max_rows"] = unary(ad.max_rows, A)
    cases["repeat_rows"] = unary(lambda x: ad.repeat_rows(x, 4), rng.normal(size=(1, 10)))
    idx = rng.integers(0, 10, size=15)
    cases["take_rows"] = unary(lambda x: ad.take_rows(x, idx), A)
    cases["row_sqnorm"] = unary(ad.row_sqnorm, A)
    return cases


def random_model_params(config: ModelConfig, rng) -> dict:
    """Initialized parameters with the zeroed output layers and biases randomized."""
    params = init_params(config)
    return {k: rng.normal(scale=0.5, size=v.shape) if not v.any() else v
            for k, v in params.items()}


def model_cases(rng, config: ModelConfig = SMALL_MODEL) -> dict:
    params = random_model_params(config, rng)
    X = rng.uniform(-1, 1, size=(12, 3))
    Y = rng.uniform(-1, 1, size=(10, 3))
    cases = {}

    w_enc = rng.normal(size=(1, config.latent_dim))
    cases["encoder"] = (
        lambda tape, v: _weighted_sum(encode_t(v, config, tape.constant(Y)), w_enc), params)

    z = rng.normal(size=(1, config.latent_dim))
    for t in range(config.steps):
        w = rng.normal(size=(len(X), 3))
        cases[f"step_{t}"] = (
            lambda tape, v, t=t, w=w: _weighted_sum(
                step_t(v, config, t, tape.constant(X), tape.constant(z)), w), params)

    graph = geom.knn_graph(geom.PointCloud(X), 3)
    # freeze nearest-neighbor assignments at the probe point
    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    final = unroll_t(leaves, config, tape.constant(X), tape.constant(Y))[-1]
    frozen = chamfer_assignments(final.value, Y)
    for form in ("squared", "raw"):
        cases[f"total_loss_{form}"] = (
            lambda tape, v, form=form: loss_t(
                unroll_t(v, config, tape.constant(X), tape.constant(Y)), Y, graph, 0.1, form,
                assignments=frozen)[0], params)
    return cases


def run_suite(seed: int = 0, probes: int = 100, epsilon: float = 1e-5) -> list[tuple[str, float]]:
    """Max relative error per component, each over ``probes`` random coordinates."""
    rng = np.random.default_rng(seed)
    cases = {**primitive_cases(rng), **model_cases(rng)}
    results = []
    for k, (name, (f, params)) in enumerate(cases.items()):
        err = ad.grad_check(f, params, epsilon=epsilon, probes=probes, seed=seed + k)
        results.append((name, err))
    return results
