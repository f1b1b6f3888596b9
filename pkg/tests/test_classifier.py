import numpy as np
import pytest

from conftest import central_diff, random_net, rel_err
from tsef import autodiff as ad
from tsef import classifier as clf
from tsef import datagen
from tsef.autodiff import Tensor


@pytest.fixture(scope="module")
def lowvar_full():
    return datagen.generate("lowvar", 0, {"train": 2000, "val": 10, "test": 500})


def nearest_centroid_accuracy(ds) -> float:
    """Per-sensor masked-region means, classified by the nearest class centroid."""

    def feats(sp):
        m = sp.masks
        return (sp.X * m).sum(axis=1) / np.maximum(m.sum(axis=1), 1)

    ftr, fte = feats(ds.train), feats(ds.test)
    cents = np.stack([ftr[ds.train.y == c].mean(axis=0) for c in range(4)])
    pred = np.argmin(((fte[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    return float(np.mean(pred == ds.test.y))


def test_lowvar_mlp_reaches_high_accuracy(lowvar_full):
    assert nearest_centroid_accuracy(lowvar_full) >= 0.95
    cfg = clf.ClassifierConfig(T=200, D=2, architecture="mlp", hidden=(64, 64), activation="tanh", lr=0.05, epochs=20)
    ck = clf.train(lowvar_full, cfg)
    assert ck.metadata["test_accuracy"] >= 0.95
    assert len(ck.metadata["loss_history"]) == 20


def test_zero_epochs_is_chance(lowvar_full):
    cfg = clf.ClassifierConfig(T=200, D=2, epochs=0)
    ck = clf.train(lowvar_full, cfg)
    assert abs(ck.metadata["test_accuracy"] - 0.25) <= 0.1 or ck.metadata["test_accuracy"] <= 0.35
    ref = clf.init_checkpoint(cfg)
    for k in ref.params:
        assert np.array_equal(ck.params[k], ref.params[k])


def test_training_is_deterministic(tiny_lowvar):
    cfg = clf.ClassifierConfig(T=200, D=2, epochs=1, seed=3)
    a, b = clf.train(tiny_lowvar, cfg), clf.train(tiny_lowvar, cfg)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    c = clf.train(tiny_lowvar, clf.ClassifierConfig(T=200, D=2, epochs=1, seed=4))
    assert not np.array_equal(a.params["w0"], c.params["w0"])


def test_divergence_raises(tiny_lowvar):
    cfg = clf.ClassifierConfig(T=200, D=2, architecture="mlp", hidden=(8,), lr=1e6, epochs=3)
    with pytest.raises(clf.TrainingError, match="epoch"):
        clf.train(tiny_lowvar, cfg)


def test_empty_split_raises(tiny_lowvar):
    empty = datagen.Split(np.zeros((0, 200, 2)), np.zeros(0, dtype=int), None)
    ds = datagen.Dataset("x", 200, 2, 4, 0, tiny_lowvar.train, tiny_lowvar.val, empty)
    with pytest.raises(clf.TrainingError):
        clf.train(ds, clf.ClassifierConfig(T=200, D=2, epochs=1))


def test_checkpoint_roundtrip_is_bitwise(tmp_path, lowvar_mlp, tiny_lowvar):
    out = clf.save_checkpoint(lowvar_mlp, tmp_path / "m")
    back = clf.load_checkpoint(out)
    assert back.config == lowvar_mlp.config
    X = tiny_lowvar.test.X
    assert np.array_equal(back.model().logits(X), lowvar_mlp.model().logits(X))
    out2 = clf.save_checkpoint(back, tmp_path / "m2")
    for f in sorted(out.iterdir()):
        assert f.read_bytes() == (out2 / f.name).read_bytes()


@pytest.mark.parametrize("arch", clf.ARCHITECTURES)
def test_softmax_and_batch_identity(arch, tiny_uv):
    model = random_net(T=200, D=1, arch=arch, hidden=(6,), C=4)
    X = tiny_uv.test.X[:5]
    probs = ad.softmax(model.forward(X), axis=1).data
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    single = clf.predict(model, X[2]).data
    assert single.shape == (4,)
    assert np.array_equal(single, model.forward(X[2:3]).data[0])


@pytest.mark.parametrize("arch,act", [("cnn1d", "softplus"), ("cnn1d", "tanh"), ("mlp", "tanh"), ("mlp", "softplus")])
def test_input_gradient_matches_finite_differences(arch, act):
    worst = 0.0
    for seed in range(50 if arch == "mlp" else 12):
        model = random_net(T=10, D=2, arch=arch, hidden=(5,), activation=act, seed=seed)
        x0 = np.random.default_rng(seed).normal(size=(10, 2))
        c = seed % 3
        t = Tensor(x0, requires_grad=True)
        g = ad.grad(model.forward(t)[c], t).data
        num = central_diff(lambda v: model.forward(v).data[c], x0, h=1e-6)
        worst = max(worst, rel_err(g, num))
    assert worst < 1e-5


def test_parameter_gradient_matches_finite_differences():
    model = random_net(T=9, D=2, arch="cnn1d", hidden=(4,), seed=2)
    x = np.random.default_rng(0).normal(size=(3, 9, 2))
    y = np.array([0, 1, 2])
    w = model.params["w1"]
    w.requires_grad = True
    g = ad.grad(ad.mean(ad.cross_entropy(model.forward(x), y)), w).data

    def f(v):
        old = w.data
        w.data = v
        out = float(ad.mean(ad.cross_entropy(model.forward(x), y)).data)
        w.data = old
        return out

    assert rel_err(g, central_diff(f, w.data.copy())) < 1e-6


def test_shape_mismatch_and_config_errors():
    model = random_net(T=10, D=2)
    with pytest.raises(ad.ShapeError):
        model.forward(np.zeros((11, 2)))
    with pytest.raises(ValueError, match="smooth"):
        clf.ClassifierConfig(T=10, D=1, activation="relu")
    with pytest.raises(ValueError):
        clf.ClassifierConfig(T=10, D=1, architecture="transformer")


def test_presets(tiny_uv):
    cfg = clf.preset_config(tiny_uv)
    assert (cfg.T, cfg.D, cfg.architecture) == (200, 1, "cnn1d")
    assert cfg.epochs == clf.TRAINING_PRESETS["seqcomb-uv"]["epochs"]
    assert clf.preset_config(tiny_uv, epochs=2).epochs == 2
    mlp = clf.preset_config(tiny_uv, architecture="mlp", hidden=(8,))
    assert mlp.lr == clf.ClassifierConfig(T=1, D=1).lr
