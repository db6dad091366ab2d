"""Classifier tests: config validation, invariance, training behavior,
determinism, and the checkpoint container."""

import numpy as np
import pytest

from liegconv import gconv as G
from liegconv import kernelnet as kn
from liegconv import lie
from liegconv import model as M
from liegconv import tensor as T


def tiny_cfg(**kw):
    base = dict(
        group_tag="SE2",
        factorization="Separable",
        n_rotations=2,
        stencil=3,
        lift_channels=3,
        block1_channels=3,
        block2_channels=4,
        siren_hidden=(8,),
        head_hidden=8,
        n_classes=4,
        dtype="float64",
        seed=7,
    )
    base.update(kw)
    return M.GCNNConfig(**base)


def toy_bars(n_per_class=2):
    """Bars of four widths: classes are not rotations of one another."""
    imgs, labels = [], []
    for c in range(4):
        img = np.zeros((8, 8))
        img[3:5, 1 : 1 + 2 * (c + 1)] = 1.0
        for i in range(n_per_class):
            imgs.append(np.roll(img, i, axis=1)[None])
            labels.append(c)
    return np.stack(imgs).astype(np.float64), np.asarray(labels)


def l_g_feature(arr, m, n):
    return np.roll(np.rot90(arr, k=((n - m) % n) * (4 // n), axes=(-2, -1)), m, axis=2)


# ---------------------------------------------------------------------------
# configuration and construction


def test_config_rejects_invalid_combinations():
    with pytest.raises(ValueError):
        M.GCNNConfig(group_tag="SE2", factorization="HSeparable")
    with pytest.raises(ValueError):
        M.GCNNConfig(group_tag="R2xRplus", sampling="random")
    cfg = M.GCNNConfig(group_tag="R2xRplus", sampling="random", allow_noncompact_sampling=True)
    assert cfg.sampling == "random"
    with pytest.raises(ValueError):
        M.GCNNConfig(sampling="metropolis")
    with pytest.raises(ValueError):
        M.GCNNConfig(stencil=4)
    with pytest.raises(ValueError):
        M.GCNNConfig(dtype="float16")
    with pytest.raises(ValueError):
        M.GCNNConfig(group_tag="E8")
    with pytest.raises(ValueError):
        M.GCNNConfig(factorization="lift")


def test_default_channel_plan():
    cfg = M.GCNNConfig()
    model = M.build_model(cfg)
    assert model.bundles["lift"].c_out == 32
    assert model.bundles["block1.conv1"].c_in == 32
    assert model.bundles["block1.conv2"].c_out == 32
    assert model.bundles["block2.conv2"].c_out == 64
    assert model.bundles["block2.shortcut"].c_in == 32
    assert model.head["w1"].shape == (64, 64)
    assert model.head["w2"].shape == (64, 10)
    assert cfg.stencil == 5 and cfg.omega0 == 10.0 and cfg.siren_hidden == (64, 64)


def test_parameter_count_independent_of_grid_size():
    def count(n_rot):
        model = M.build_model(tiny_cfg(n_rotations=n_rot))
        return sum(p.size for p in model.parameters().values())

    assert count(2) == count(8)


def test_translation_only_model_runs():
    model = M.build_model(tiny_cfg(n_rotations=1))
    x = T.constant(np.random.default_rng(0).normal(size=(2, 1, 8, 8)))
    logits = M.forward(model, x)
    assert logits.shape == (2, 4)


@pytest.mark.parametrize(
    "kw",
    [
        dict(),
        dict(factorization="Nonseparable"),
        dict(group_tag="R2xRplus", n_scales=2),
        dict(group_tag="Sim2", factorization="HSeparable", n_rotations=2, n_scales=2),
    ],
)
def test_forward_shapes(kw):
    model = M.build_model(tiny_cfg(**kw))
    x = T.constant(np.random.default_rng(1).normal(size=(2, 1, 8, 8)))
    logits = M.forward(model, x)
    assert logits.shape == (2, 4)
    assert np.all(np.isfinite(logits.data))


def test_random_sampling_needs_rng_in_training():
    model = M.build_model(tiny_cfg(sampling="random"))
    x = T.constant(np.zeros((1, 1, 8, 8)))
    with pytest.raises(ValueError):
        M.forward(model, x, training=True)
    logits = M.forward(model, x, training=True, rng=np.random.default_rng(0))
    assert logits.shape == (1, 4)
    eval_logits = M.forward(model, x)  # rng not needed outside training
    assert eval_logits.shape == (1, 4)


# ---------------------------------------------------------------------------
# invariance and equivariance through the full network


def test_logits_invariant_to_quarter_rotations():
    model = M.build_model(tiny_cfg(n_rotations=4, padding="circular"))
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 1, 8, 8))
    base = M.forward(model, T.constant(x)).data
    for k in range(1, 4):
        rot = np.ascontiguousarray(np.rot90(x, k=k, axes=(-2, -1)))
        got = M.forward(model, T.constant(rot)).data
        np.testing.assert_allclose(got, base, atol=1e-6)


def test_residual_blocks_preserve_equivariance():
    model = M.build_model(tiny_cfg(n_rotations=4, padding="circular"))
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 1, 8, 8))
    _, base = M.forward(model, T.constant(x), return_features=True)
    for m in range(1, 4):
        rot = np.ascontiguousarray(np.rot90(x, k=((4 - m) % 4), axes=(-2, -1)))
        _, moved = M.forward(model, T.constant(rot), return_features=True)
        np.testing.assert_allclose(
            moved.data.data, l_g_feature(base.data.data, m, 4), atol=1e-9
        )


def test_group_shortcut_regrids_subgroup_axis():
    rng = np.random.default_rng(5)
    bundle = kn.make_kernel_bundle("shortcut", "SE2", 2, 3, hidden=(8,), rng=rng)
    f = G.GFeatureMap(
        T.constant(rng.normal(size=(1, 2, 4, 5, 5))), (lie.uniform_grid("SO2", 4),)
    )
    out = M.group_shortcut(f, bundle, (lie.uniform_grid("SO2", 2),))
    assert out.data.shape == (1, 3, 2, 5, 5)


def test_group_shortcut_identity_kernel_is_identity():
    rng = np.random.default_rng(6)
    grids = (lie.uniform_grid("SO2", 3),)
    f = G.GFeatureMap(T.constant(rng.normal(size=(2, 2, 3, 4, 4))), grids)
    dense = np.zeros((3, 3, 1, 1, 2, 2))
    for a in range(3):
        for i in range(2):
            dense[a, a, 0, 0, i, i] = 1.0
    out = G.group_conv_dense(f, T.constant(dense), grids, np.ones(3))
    np.testing.assert_allclose(out.data.data, f.data.data, atol=0)


# ---------------------------------------------------------------------------
# training loop


def test_training_overfits_toy_bars():
    images, labels = toy_bars()
    model = M.build_model(tiny_cfg(dtype="float32"))
    tcfg = M.TrainConfig(epochs=200, batch_size=8, lr=1e-2, weight_decay=0.0, seed=0)
    history = M.train(model, tcfg, (images, labels))
    assert len(history) == 200
    assert history[-1]["train_loss"] < history[0]["train_loss"]
    assert M.evaluate(model, (images, labels)) == 1.0


def test_zero_learning_rate_changes_nothing():
    images, labels = toy_bars(1)
    model = M.build_model(tiny_cfg(dtype="float32"))
    before = {k: v.copy() for k, v in model.state_arrays().items() if "running" not in k}
    tcfg = M.TrainConfig(epochs=3, batch_size=8, lr=0.0, weight_decay=0.0, seed=0)
    history = M.train(model, tcfg, (images, labels))
    losses = [h["train_loss"] for h in history]
    assert losses[0] == losses[1] == losses[2]
    after = model.state_arrays()
    for name, arr in before.items():
        np.testing.assert_array_equal(arr, after[name])


def test_training_deterministic_given_seed():
    images, labels = toy_bars(1)

    def run():
        model = M.build_model(tiny_cfg(dtype="float32"))
        tcfg = M.TrainConfig(epochs=2, batch_size=4, lr=1e-3, seed=11)
        hist = M.train(model, tcfg, (images, labels), val_set=(images, labels))
        return hist, model.state_arrays()

    h1, s1 = run()
    h2, s2 = run()
    for e1, e2 in zip(h1, h2):
        assert e1["train_loss"] == e2["train_loss"]
        assert e1["val_accuracy"] == e2["val_accuracy"]
    for name in s1:
        np.testing.assert_array_equal(s1[name], s2[name])


def test_random_sampling_training_runs():
    images, labels = toy_bars(1)
    model = M.build_model(tiny_cfg(dtype="float32", sampling="random"))
    tcfg = M.TrainConfig(epochs=1, batch_size=4, lr=1e-3, seed=0)
    history = M.train(model, tcfg, (images, labels))
    assert np.isfinite(history[0]["train_loss"])


def test_nan_loss_aborts_with_diagnostic():
    images, labels = toy_bars(1)
    model = M.build_model(tiny_cfg(dtype="float32"))
    model.head["w2"].data[:] = np.nan  # simulate a diverged parameter
    tcfg = M.TrainConfig(epochs=1, batch_size=8, lr=1e-3, seed=0)
    with pytest.raises(RuntimeError, match="non-finite"):
        M.train(model, tcfg, (images, labels))


def test_history_records_epoch_metrics():
    images, labels = toy_bars(1)
    model = M.build_model(tiny_cfg(dtype="float32"))
    tcfg = M.TrainConfig(epochs=2, batch_size=4, lr=1e-3, seed=0, eval_every=2)
    history = M.train(model, tcfg, (images, labels), val_set=(images, labels))
    assert "val_accuracy" not in history[0]
    assert "val_accuracy" in history[1]
    assert all(h["epoch_seconds"] > 0 for h in history)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    images, labels = toy_bars(1)
    model = M.build_model(tiny_cfg(dtype="float32"))
    M.train(model, M.TrainConfig(epochs=1, batch_size=4, lr=1e-3, seed=0), (images, labels))
    path = tmp_path / "model.ckpt"
    M.save_checkpoint(path, model)
    loaded = M.load_checkpoint(path)
    assert loaded.cfg == model.cfg
    orig, back = model.state_arrays(), loaded.state_arrays()
    for name in orig:
        np.testing.assert_array_equal(orig[name], back[name])
    x = T.constant(images.astype(np.float32))
    np.testing.assert_array_equal(
        M.forward(model, x).data, M.forward(loaded, x).data
    )


def test_checkpoint_rejects_corruption(tmp_path):
    model = M.build_model(tiny_cfg())
    path = tmp_path / "model.ckpt"
    M.save_checkpoint(path, model)
    blob = path.read_bytes()
    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(blob[: len(blob) - 40])
    with pytest.raises(ValueError, match="truncated"):
        M.load_checkpoint(truncated)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"\x02\x00\x00\x00\x00\x00\x00\x00{}" + blob[10:])
    with pytest.raises(ValueError):
        M.load_checkpoint(bad)


def test_recalibrate_batch_norm_single_batch_matches_batch_stats():
    images, labels = toy_bars(2)
    model = M.build_model(tiny_cfg(dtype="float64"))
    # scramble the running stats, then recalibrate on one batch:
    # update rate 1/1 must wipe the old state entirely.
    for gamma, beta, state in model.bn.values():
        state.mean[:] = 123.0
        state.var[:] = 456.0
    M.recalibrate_batch_norm(model, (images, labels), batch_size=len(images))
    for name, (gamma, beta, state) in model.bn.items():
        assert np.all(np.isfinite(state.mean)), name
        assert not np.allclose(state.mean, 123.0), name
        assert np.all(state.var >= 0), name


def test_recalibrate_batch_norm_restores_eval_after_random_training():
    images, labels = toy_bars(2)
    model = M.build_model(tiny_cfg(dtype="float32", sampling="random"))
    tcfg = M.TrainConfig(epochs=2, batch_size=8, lr=1e-3, seed=0, eval_every=999)
    M.train(model, tcfg, (images, labels))
    baseline = M.evaluate(model, (images, labels))
    # corrupt the stats, as random-draw averaging would; recalibration
    # must put evaluation back where post-train recalibration left it.
    for gamma, beta, state in model.bn.values():
        state.mean[:] = state.mean + 5.0
    M.recalibrate_batch_norm(model, (images, labels), batch_size=8)
    assert M.evaluate(model, (images, labels)) == baseline
