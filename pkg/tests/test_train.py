import numpy as np
import pytest

from pcmorph import geom, metrics, model, shapes
from pcmorph import train as tr
from pcmorph.model import ModelConfig

TINY = ModelConfig(steps=2, latent_dim=8, encoder_widths=(16, 16), step_widths=(16, 16))
FAST = tr.TrainConfig(iterations=30, points=48, log_every=5, checkpoint_every=10)


@pytest.fixture
def dataset(tmp_path):
    d = tmp_path / "meshes"
    d.mkdir()
    (d / "a_sphere.off").write_bytes(geom.write_off(shapes.uv_sphere(5, 8)))
    (d / "b_cube.off").write_bytes(geom.write_off(shapes.cube_mesh()))
    return d


def test_make_pairs_random_two_meshes(dataset):
    ps = tr.make_pairs(dataset, "random-pairs", seed=3, config=FAST)
    names = [(a.path.name, b.path.name) for a, b in (ps.draw() for _ in range(20))]
    assert set(names) <= {("a_sphere.off", "b_cube.off"), ("b_cube.off", "a_sphere.off")}
    assert len(set(names)) == 2
    again = tr.make_pairs(dataset, "random-pairs", seed=3, config=FAST)
    assert names == [(a.path.name, b.path.name) for a, b in (again.draw() for _ in range(20))]


def test_random_pairs_never_self(tmp_path):
    for k in range(4):
        (tmp_path / f"m{k}.off").write_bytes(geom.write_off(shapes.cube_mesh(1 + k)))
    ps = tr.make_pairs(tmp_path, "random-pairs", seed=0, config=FAST)
    draws = [ps.draw() for _ in range(200)]
    assert all(a is not b for a, b in draws)
    assert len({(a.path.name, b.path.name) for a, b in draws}) == 12


def test_fixed_pair_self_allowed(dataset):
    p = dataset / "b_cube.off"
    ps = tr.make_pairs(pair=(p, p), config=FAST)
    a, b = ps.draw()
    assert a.cloud == b.cloud


def test_make_pairs_errors(tmp_path):
    with pytest.raises(ValueError, match="no .off/.obj"):
        tr.make_pairs(tmp_path, config=FAST)
    bad = tmp_path / "broken.off"
    bad.write_bytes(b"OFF\n3 1 0\n0 0 0\n")
    with pytest.raises(ValueError, match="broken.off"):
        tr.make_pairs(tmp_path, "fixed-pair", config=FAST)


def test_mesh_neighbors_need_vertex_mode(dataset):
    cfg = tr.TrainConfig(points=48, neighbors="mesh")
    with pytest.raises(ValueError, match="one point per vertex"):
        tr.make_pairs(pair=(dataset / "a_sphere.off", dataset / "b_cube.off"), config=cfg)
    sh = tr.prepare_shape(dataset / "a_sphere.off", None, 0, "mesh")
    assert sh.graph == geom.mesh_edge_graph(sh.mesh)


# --- Adam ---------------------------------------------------------------------

def test_adam_zero_gradient():
    params = {"w": np.array([1.0, -2.0])}
    state = tr.AdamState.zeros(params)
    p2, s2 = tr.adam_step(params, {"w": np.zeros(2)}, state)
    assert np.array_equal(p2["w"], params["w"])
    assert not s2.m["w"].any() and not s2.v["w"].any() and s2.step == 1


@pytest.mark.parametrize("g", [1e-3, -0.5, 7.0])
def test_adam_first_step_magnitude(g):
    # first step: m_hat = g, v_hat = g^2, so the update is lr * |g| / (|g| + eps)
    lr = 1e-3
    params = {"w": np.array([0.0])}
    p2, _ = tr.adam_step(params, {"w": np.array([g])}, tr.AdamState.zeros(params), lr=lr)
    expected = lr * abs(g) / (abs(g) + 1e-8)
    assert abs(abs(p2["w"][0]) - expected) <= 1e-15
    assert abs(abs(p2["w"][0]) - lr) <= 1e-5 * lr
    assert np.sign(p2["w"][0]) == -np.sign(g)


def test_adam_deterministic_100_steps(rng):
    w0 = rng.normal(size=(4, 4))
    gs = [rng.normal(size=(4, 4)) for _ in range(100)]

    def run():
        p, s = {"w": w0}, tr.AdamState.zeros({"w": w0})
        for g in gs:
            p, s = tr.adam_step(p, {"w": g}, s)
        return p["w"]

    assert run().tobytes() == run().tobytes()


def test_adam_rejects_non_finite():
    params = {"w": np.zeros(2)}
    with pytest.raises(tr.NumericalHalt):
        tr.adam_step(params, {"w": np.array([np.nan, 0])}, tr.AdamState.zeros(params))


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(points=1)


# --- training loop -------------------------------------------------------------

def test_identity_pair_is_noop(dataset):
    p = dataset / "a_sphere.off"
    ps = tr.make_pairs(pair=(p, p), config=FAST)
    init = model.init_params(TINY)
    params, log = tr.train(ps, TINY, FAST)
    assert all(lb.total == 0.0 for _, lb in log)
    assert all(np.array_equal(params[k], init[k]) for k in init)


def test_first_loss_is_chamfer(dataset, tmp_path):
    ps = tr.make_pairs(pair=(dataset / "a_sphere.off", dataset / "b_cube.off"), config=FAST)
    src, tgt = ps.shapes
    params, log = tr.train(ps, TINY, FAST, tmp_path / "run")
    it0, lb0 = log[0]
    assert it0 == 0
    assert lb0.chamfer == metrics.chamfer(src.cloud, tgt.cloud).value
    assert lb0.topology == 0.0 and lb0.total == lb0.chamfer
    assert log[-1][1].chamfer < lb0.chamfer
    assert [it for it, _ in log] == [0, 5, 10, 15, 20, 25, 30]
    out = tmp_path / "run"
    for name in ("metrics.tsv", "final.ckpt", "last.ckpt", "ckpt_000010.ckpt",
                 "ckpt_000030.ckpt"):
        assert (out / name).exists(), name
    rows = (out / "metrics.tsv").read_text().splitlines()
    assert rows[0] == "iter\tchamfer\ttopology\ttotal"
    assert len(rows) == 1 + len(log)
    assert rows[1].split("\t") == ["0", repr(lb0.chamfer), "0.0", repr(lb0.total)]
    saved, cfg = model.load_checkpoint((out / "final.ckpt").read_bytes())
    assert cfg == TINY
    assert all(saved[k].shape == v.shape for k, v in params.items())


def test_train_deterministic(dataset, tmp_path):
    def run(out):
        ps = tr.make_pairs(dataset, "random-pairs", seed=4, config=FAST)
        tr.train(ps, TINY, FAST, out)
        return (out / "metrics.tsv").read_bytes(), (out / "final.ckpt").read_bytes()

    assert run(tmp_path / "a") == run(tmp_path / "b")


def test_numerical_halt_keeps_last_checkpoint(dataset, tmp_path, monkeypatch):
    ps = tr.make_pairs(pair=(dataset / "a_sphere.off", dataset / "b_cube.off"), config=FAST)
    real = tr.loss_and_grads
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        lb, grads = real(*args, **kwargs)
        if calls["n"] == 15:
            grads = {k: np.full_like(g, np.inf) for k, g in grads.items()}
        return lb, grads

    monkeypatch.setattr(tr, "loss_and_grads", flaky)
    with pytest.raises(tr.NumericalHalt) as exc:
        tr.train(ps, TINY, FAST, tmp_path / "run")
    ckpt = exc.value.checkpoint
    assert ckpt == tmp_path / "run" / "last.ckpt"
    params, _ = model.load_checkpoint(ckpt.read_bytes())
    ref = (tmp_path / "run" / "ckpt_000010.ckpt").read_bytes()
    assert ckpt.read_bytes() == ref
    assert all(np.all(np.isfinite(v)) for v in params.values())


def test_evaluate_identity_and_repeatable(dataset):
    ps = tr.make_pairs(pair=(dataset / "a_sphere.off", dataset / "b_cube.off"), config=FAST)
    src, tgt = ps.shapes
    params = model.init_params(TINY)
    r1 = tr.evaluate(params, TINY, src, tgt)
    r2 = tr.evaluate(params, TINY, src, tgt)
    assert r1 == r2
    assert r1.chamfer == metrics.chamfer(src.cloud, tgt.cloud).value
    assert r1.topology == 0.0
    assert len(r1.frame_to_source) == TINY.steps + 1
    assert r1.tsv().count("\t") == r1.tsv_header().count("\t")
