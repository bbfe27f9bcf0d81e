import numpy as np
import pytest

from pcmorph import model
from pcmorph.geom import PointCloud
from pcmorph.model import CheckpointError, ModelConfig
from pcmorph.verify import random_model_params

SMALL = ModelConfig(steps=3, latent_dim=8, encoder_widths=(16, 16), step_widths=(16, 16), seed=5)


def test_init_deterministic_and_bounded():
    a, b = model.init_params(SMALL), model.init_params(SMALL)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    for name, W in a.items():
        if name.endswith(".W"):
            fi, fo = W.shape
            assert np.abs(W).max() <= np.sqrt(6.0 / (fi + fo))
    for t in range(SMALL.steps):
        assert not a[f"step.{t}.2.W"].any() and not a[f"step.{t}.2.b"].any()
    assert sum(k.endswith(".0.W") and k.startswith("step.") for k in a) == SMALL.steps


def test_different_seed_differs():
    a = model.init_params(SMALL)
    b = model.init_params(ModelConfig(**{**SMALL.__dict__, "seed": 6}))
    assert not np.array_equal(a["enc.point.0.W"], b["enc.point.0.W"])


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(steps=0)
    with pytest.raises(ValueError):
        ModelConfig(activation="gelu")


def test_identity_at_init(rng):
    X, Y = rng.normal(size=(20, 3)), rng.normal(size=(15, 3))
    traj = model.unroll(model.init_params(SMALL), SMALL, X, Y)
    assert len(traj) == SMALL.steps + 1
    for f in traj.frames:
        assert np.array_equal(f.points, X)


def test_encode_permutation_invariant(rng):
    params = model.init_params(SMALL)
    X = rng.normal(size=(50, 3))
    z = model.encode(params, SMALL, X)
    assert z.shape == (SMALL.latent_dim,)
    for _ in range(10):
        zp = model.encode(params, SMALL, X[rng.permutation(50)])
        assert np.abs(zp - z).max() <= 1e-9


def test_encode_repeated_point(rng):
    params = model.init_params(SMALL)
    p = rng.normal(size=(1, 3))
    a = model.encode(params, SMALL, np.repeat(p, 3, axis=0))
    b = model.encode(params, SMALL, p)
    assert np.abs(a - b).max() <= 1e-15


def test_encode_dim_independent_of_n(rng):
    params = model.init_params(SMALL)
    for n in (1, 7, 100):
        assert model.encode(params, SMALL, rng.normal(size=(n, 3))).shape == (8,)


def test_encode_empty():
    with pytest.raises(ValueError):
        model.encode(model.init_params(SMALL), SMALL, np.zeros((0, 3)))


def test_step_contract(rng):
    params = model.init_params(SMALL)
    z = rng.normal(size=8)
    assert model.step(params, SMALL, 0, [0.1, 0.2, 0.3], z).tolist() == [0, 0, 0]
    live = random_model_params(SMALL, rng)
    d = model.step(live, SMALL, 2, [0.1, 0.2, 0.3], z)
    assert d.shape == (3,) and np.all(np.isfinite(d))
    assert np.array_equal(d, model.step(live, SMALL, 2, [0.1, 0.2, 0.3], z))
    with pytest.raises(IndexError):
        model.step(live, SMALL, 3, [0, 0, 0], z)


def test_per_point_independence(rng):
    params = random_model_params(SMALL, rng)
    X = rng.normal(size=(10, 3))
    X[7] = X[2]
    Y = rng.normal(size=(12, 3))
    traj = model.unroll(params, SMALL, X, Y)
    for f in traj.frames:
        assert np.array_equal(f.points[7], f.points[2])
    # dropping other points leaves a point's trajectory unchanged
    sub = model.unroll(params, SMALL, X[[2]], Y)
    for f, g in zip(traj.frames, sub.frames):
        assert np.allclose(f.points[2], g.points[0], rtol=0, atol=1e-14)


def test_unroll_target_permutation(rng):
    params = random_model_params(SMALL, rng)
    X, Y = rng.normal(size=(10, 3)), rng.normal(size=(30, 3))
    a = model.unroll(params, SMALL, X, Y)
    b = model.unroll(params, SMALL, X, Y[rng.permutation(30)])
    for f, g in zip(a.frames, b.frames):
        assert np.abs(f.points - g.points).max() <= 1e-9


def test_unroll_deterministic(rng):
    params = random_model_params(SMALL, rng)
    X, Y = rng.normal(size=(10, 3)), rng.normal(size=(30, 3))
    a, b = model.unroll(params, SMALL, X, Y), model.unroll(params, SMALL, X, Y)
    assert all(f == g for f, g in zip(a.frames, b.frames))


def test_shared_weights_variant(rng):
    cfg = ModelConfig(steps=3, latent_dim=4, encoder_widths=(8,), step_widths=(8,),
                      share_weights=True)
    params = model.init_params(cfg)
    assert not any(k.startswith("step.1.") for k in params)
    traj = model.unroll(params, cfg, rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
    assert len(traj) == 4


def test_relu_variant_identity(rng):
    cfg = ModelConfig(steps=2, latent_dim=4, encoder_widths=(8,), step_widths=(8,),
                      activation="relu")
    X = rng.normal(size=(6, 3))
    assert model.unroll(model.init_params(cfg), cfg, X, X).final == PointCloud(X)


# --- checkpoints ------------------------------------------------------------

def test_checkpoint_roundtrip(rng):
    params = random_model_params(SMALL, rng)
    blob = model.save_checkpoint(params, SMALL)
    assert blob[:8] == b"PCMORPH1"
    back, cfg = model.load_checkpoint(blob)
    assert cfg == SMALL
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
    assert model.save_checkpoint(back, cfg) == blob


def test_checkpoint_default_config_unrolls_five_frames(rng):
    cfg = ModelConfig(latent_dim=8, encoder_widths=(8,), step_widths=(8,))
    params, cfg2 = model.load_checkpoint(model.save_checkpoint(model.init_params(cfg), cfg))
    assert cfg2.steps == 4
    assert len(model.unroll(params, cfg2, rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))) == 5


@pytest.mark.parametrize("cut", [3, 8, 20, 200, -1])
def test_checkpoint_truncated(cut):
    blob = model.save_checkpoint(model.init_params(SMALL), SMALL)
    with pytest.raises(CheckpointError):
        model.load_checkpoint(blob[:cut])


def test_checkpoint_bad_magic_and_version():
    blob = model.save_checkpoint(model.init_params(SMALL), SMALL)
    with pytest.raises(CheckpointError):
        model.load_checkpoint(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError):
        model.load_checkpoint(blob.replace(b"version=1", b"version=9"))


def test_checkpoint_shape_mismatch():
    blob = model.save_checkpoint(model.init_params(SMALL), SMALL)
    # header claims latent_dim 9 while the tensors were written for 8
    with pytest.raises(CheckpointError):
        model.load_checkpoint(blob.replace(b"latent_dim=8", b"latent_dim=9"))


def test_save_rejects_wrong_params():
    params = model.init_params(SMALL)
    params["enc.point.0.W"] = np.zeros((2, 2))
    with pytest.raises(CheckpointError):
        model.save_checkpoint(params, SMALL)
