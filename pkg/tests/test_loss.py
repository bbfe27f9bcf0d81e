import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcmorph import autodiff as ad
from pcmorph import geom, loss, metrics, model
from pcmorph.geom import NeighborGraph, PointCloud
from pcmorph.verify import SMALL_MODEL, model_cases, random_model_params

EDGE = NeighborGraph(([1], [0]))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


def test_topology_identity_zero(rng):
    X = rng.normal(size=(30, 3))
    g = geom.knn_graph(PointCloud(X), 4)
    assert loss.topology_term(X, X, g) == 0.0
    assert loss.topology_term(X, X, g, form="raw") == 0.0


def test_topology_translation_exact():
    # coordinates on a dyadic grid keep the translated differences exact
    rng = np.random.default_rng(3)
    X = rng.integers(-64, 64, size=(40, 3)) / 8.0
    g = geom.knn_graph(PointCloud(X), 4)
    assert loss.topology_term(X, X + np.array([1.0, -2.5, 3.25]), g) == 0.0


def test_topology_translation_general(rng):
    X = rng.normal(size=(40, 3))
    g = geom.knn_graph(PointCloud(X), 4)
    assert loss.topology_term(X, X + rng.normal(size=3), g) <= 1e-24


def test_topology_single_edge_stretch():
    X0 = [[0, 0, 0], [1, 0, 0]]
    XT = [[0, 0, 0], [2, 0, 0]]
    assert loss.topology_term(X0, XT, EDGE) == 9.0
    assert loss.topology_term(X0, XT, EDGE, form="raw") == -3.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_topology_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 3))
    g = geom.knn_graph(PointCloud(X), 3)
    Y = X @ random_rotation(rng).T + rng.normal(size=3)
    assert 0.0 <= loss.topology_term(X, Y, g) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_topology_nonnegative(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(15, 3))
    g = geom.knn_graph(PointCloud(X), 3)
    assert loss.topology_term(X, rng.normal(size=(15, 3)), g) >= 0.0


def test_topology_errors(rng):
    g = geom.knn_graph(PointCloud(rng.normal(size=(5, 3))), 2)
    with pytest.raises(geom.GeometryError):
        loss.topology_term(rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), g)
    with pytest.raises(ValueError):
        loss.topology_term(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), g, form="abs")


def test_total_loss_identity_zero(rng):
    cfg = SMALL_MODEL
    X = rng.normal(size=(20, 3))
    g = geom.knn_graph(PointCloud(X), 4)
    traj = model.unroll(model.init_params(cfg), cfg, X, X)
    lb = loss.total_loss(traj, X, g, 0.1)
    assert (lb.total, lb.chamfer, lb.topology) == (0.0, 0.0, 0.0)


def test_total_loss_chamfer_matches_metrics(rng):
    X, Y = rng.normal(size=(20, 3)), rng.normal(size=(33, 3))
    g = geom.knn_graph(PointCloud(X), 4)
    lb = loss.total_loss([X, X + 0.1 * rng.normal(size=X.shape)], Y, g, 0.3)
    lb0 = loss.total_loss([X, X], Y, g, 0.3)
    assert lb0.chamfer == metrics.chamfer(X, Y).value
    assert lb.total == lb.chamfer + 0.3 * lb.topology


def test_lambda_zero_is_chamfer(rng):
    X, Y = rng.normal(size=(10, 3)), rng.normal(size=(12, 3))
    g = geom.knn_graph(PointCloud(X), 3)
    lb = loss.total_loss([X, 1.5 * X], Y, g, 0.0)
    assert lb.total == lb.chamfer and lb.topology > 0


def test_negative_lambda_rejected(rng):
    X = rng.normal(size=(5, 3))
    with pytest.raises(ValueError):
        loss.total_loss([X, X], X, geom.knn_graph(PointCloud(X), 2), -1.0)


def test_nearest_dense_matches_bruteforce(rng):
    Q, P = rng.normal(size=(300, 3)), rng.normal(size=(257, 3))
    assert np.array_equal(loss.nearest_dense(Q, P), metrics.nearest_bruteforce(Q, P))
    G = rng.integers(0, 3, size=(50, 3)).astype(float)
    assert np.array_equal(loss.nearest_dense(G, G[::-1]), metrics.nearest_bruteforce(G, G[::-1]))


def test_chamfer_gradient_wrt_points(rng):
    B = rng.normal(size=(9, 3))
    X = rng.normal(size=(7, 3))
    frozen = loss.chamfer_assignments(X, B)
    err = ad.grad_check(lambda tape, v: loss.chamfer_t(v["X"], B, frozen), {"X": X})
    assert err <= 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_total_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    cases = model_cases(rng)
    for name in ("total_loss_squared", "total_loss_raw"):
        f, params = cases[name]
        assert ad.grad_check(f, params, epsilon=1e-5, probes=100, seed=seed) <= 1e-6


def test_loss_uses_only_endpoints(rng):
    cfg = SMALL_MODEL
    params = random_model_params(cfg, rng)
    X, Y = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    g = geom.knn_graph(PointCloud(X), 3)
    traj = model.unroll(params, cfg, X, Y)
    full = loss.total_loss(traj, Y, g)
    ends = loss.total_loss([traj.frames[0], traj.final], Y, g)
    assert full == ends
