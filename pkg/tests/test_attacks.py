import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_net
from tsef import attacks as atk
from tsef import autodiff as ad
from tsef import classifier as clf
from tsef import datagen
from tsef import spectral as sp
from tsef.explainers import get_explainer

IG = get_explainer("ig", steps=8)
GRAD = get_explainer("grad")


@pytest.fixture(scope="module")
def small_case():
    model = random_net(T=24, D=2, arch="cnn1d", hidden=(4,), activation="softplus", seed=1)
    rng = np.random.default_rng(8)
    X = rng.normal(size=(3, 24, 2))
    pred = model.predict_labels(X)
    target = (pred + 1) % 3
    ref = (rng.uniform(size=X.shape) < 0.2).astype(float)
    return model, X, target, ref, atk.AttackBudget.for_input(X, 0.1)


@pytest.fixture(scope="module")
def trained_lowvar():
    ds = datagen.generate("lowvar", 0, {"train": 5000, "val": 10, "test": 400})
    ck = clf.train(ds, clf.preset_config(ds))
    return ds, ck.model()


@pytest.fixture(scope="module")
def trained_uv(tiny_uv):
    ck = clf.train(tiny_uv, clf.preset_config(tiny_uv, epochs=30))
    return tiny_uv, ck.model()


# ---------------------------------------------------------------------------
# budget


def test_budget_from_instance_range():
    X = np.array([[[-1.0], [3.0], [0.5]]])
    b = atk.AttackBudget.for_input(X, 0.1)
    assert b.eps_prime[0] == pytest.approx(0.4)
    assert (b.x_min[0], b.x_max[0]) == (-1.0, 3.0)
    out = b.project(X + np.array([[[1.0], [1.0], [-1.0]]]), X)
    np.testing.assert_allclose(out[0, :, 0], [-0.6, 3.0, 0.1])
    assert not b.violations(out, X).any()
    assert b.violations(X + 0.5, X).all()
    with pytest.raises(atk.AttackError):
        atk.AttackBudget.for_input(X, -0.1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
def test_projection_always_lands_in_budget(seed, eps):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(2, 7, 3))
    b = atk.AttackBudget.for_input(X, eps)
    out = b.project(X + rng.normal(size=X.shape) * 3, X)
    assert not b.violations(out, X).any()


# ---------------------------------------------------------------------------
# references and distances


def test_top_k_counts_and_ties():
    assert atk.top_k_mask(np.random.default_rng(0).uniform(size=(200, 1)), 10).sum() == 20
    m = atk.top_k_mask(np.ones((10, 3)), 10)
    assert m.ravel().tolist() == [1.0] * 3 + [0.0] * 27
    m = atk.top_k_mask(np.ones((7, 1)), 10)  # ceil(0.7) = 1
    assert m.ravel().tolist() == [1.0] + [0.0] * 6
    s = np.array([[0.1], [0.9], [0.5], [0.9]])
    assert atk.top_k_mask(s, 50).ravel().tolist() == [0.0, 1.0, 0.0, 1.0]
    assert atk.top_k_mask(s, 0).sum() == 0


def test_make_reference_modes(tiny_uv):
    te = tiny_uv.test
    i = int(np.flatnonzero(te.y == 1)[0])
    ref = atk.make_reference(te.X[i], "ground_truth", gt_mask=te.masks[i])
    assert np.array_equal(ref, te.masks[i])
    model = random_net(T=200, D=1, arch="cnn1d", hidden=(4,))
    top = atk.make_reference(te.X[i], "top_k_clean", model=model, explainer=GRAD, k_percent=10, class_index=0)
    assert top.sum() == 20
    with pytest.raises(atk.AttackError):
        atk.make_reference(te.X[i], "ground_truth")
    with pytest.raises(atk.AttackError):
        atk.make_reference(te.X[i], "topk")
    with pytest.raises(atk.AttackError):
        atk.make_reference(te.X[i], "random")


def test_distance_examples():
    ones = np.ones((10, 2))
    assert float(atk.explanation_distance(np.full((10, 2), 0.5), ones, "mse").data) == pytest.approx(0.25)
    a = np.random.default_rng(1).uniform(size=(10, 2))
    assert float(atk.explanation_distance(a, a, "mse").data) == 0.0
    assert float(atk.explanation_distance(a, a, "kl").data) == pytest.approx(0.0, abs=1e-12)
    assert float(atk.explanation_distance(a, a, "cosine").data) == pytest.approx(0.0, abs=1e-12)
    left = np.zeros((10, 2))
    left[:5] = 1
    assert float(atk.explanation_distance(left, 1 - left, "cosine").data) == pytest.approx(1.0)
    assert float(atk.explanation_distance(np.zeros((10, 2)), left, "cosine").data) == pytest.approx(1.0)
    with pytest.raises(atk.AttackError):
        atk.explanation_distance(a, a, "l2")
    with pytest.raises(ad.ShapeError):
        atk.explanation_distance(a, a[:5], "mse")


def test_distance_is_per_sample_in_batches():
    rng = np.random.default_rng(2)
    a, r = rng.uniform(size=(2, 3, 6, 2))
    batch = atk.explanation_distance(a, r, "kl").data
    assert batch.shape == (3,)
    for i in range(3):
        assert batch[i] == pytest.approx(float(atk.explanation_distance(a[i], r[i], "kl").data), rel=1e-12)


@pytest.mark.parametrize("metric", atk.METRICS)
def test_distance_gradients(metric):
    rng = np.random.default_rng(3)
    a0 = rng.uniform(0.1, 0.9, (6, 2))
    r = (rng.uniform(size=(6, 2)) < 0.4).astype(float)
    t = ad.Tensor(a0, requires_grad=True)
    g = ad.grad(atk.explanation_distance(t, r, metric), t).data
    num = oracles.central_diff(lambda v: float(atk.explanation_distance(v, r, metric).data), a0)
    assert oracles.rel_err(g, num) < 1e-6


# ---------------------------------------------------------------------------
# regularizers


def test_kl_bernoulli_values():
    assert float(atk.kl_bernoulli(np.array(0.3), 0.3).data) == pytest.approx(0.0, abs=1e-15)
    direct = 0.5 * np.log(0.5 / 0.3) + 0.5 * np.log(0.5 / 0.7)
    v = float(atk.kl_bernoulli(np.array(0.5), 0.3).data)
    assert v == pytest.approx(0.0871, abs=1e-4) and v == pytest.approx(direct, rel=1e-12)
    rng = np.random.default_rng(0)
    p, r = rng.uniform(size=(2, 1000))
    assert all(float(atk.kl_bernoulli(np.array(pi), ri).data) >= 0 for pi, ri in zip(p, r))
    assert np.isfinite(atk.kl_bernoulli(np.array([0.0, 1.0]), 0.3).data).all()


def test_sparsity_and_connectivity():
    assert atk.sparsity_loss(np.full((1, 20, 2), 0.3), 0.3).data[0] == pytest.approx(0.0, abs=1e-15)
    assert atk.connectivity_loss(np.full((5, 3), 0.7)).data[0] == 0.0
    m = np.zeros((200, 1))
    m[100:] = 1.0
    assert atk.connectivity_loss(m).data[0] == pytest.approx(1 / 200)


# ---------------------------------------------------------------------------
# frequency filter


def test_adaptive_alpha_arithmetic():
    T = 16
    x = np.zeros((1, T, 1))
    x[0, 3] = 2.0
    W = sp.rdft(x)
    theta = np.full(W.re.shape, np.arctanh(0.5))  # base change = 0.5 * x, sup norm 1
    alpha = atk.fpf_adaptive_alpha(W, theta, np.array([0.1]), 0.98, 1e-8)
    assert alpha[0] == pytest.approx(0.098, rel=1e-7)
    zero = atk.fpf_adaptive_alpha(W, np.zeros_like(theta), np.array([0.1]), 0.98, 1e-8)
    assert zero[0] == pytest.approx(0.98 * 0.1 / 1e-8)
    with pytest.raises(atk.AttackError):
        atk.fpf_adaptive_alpha(W, theta, 0.1, gamma=1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scaled_change_stays_under_gamma_eps(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(2, 20, 2))
    m = (rng.uniform(size=X.shape) < 0.4).astype(float)
    W = sp.rdft(m * X)
    theta = rng.normal(size=W.re.shape) * 3
    eps = np.array([0.05, 0.3])
    alpha = atk.fpf_adaptive_alpha(W, theta, eps, 0.98, 1e-8, m)
    state = atk.FrequencyFilterState(theta, alpha)
    filt = state.filter()
    assert filt.min() >= 0.0 and filt.max() <= 2.0
    change = atk.reconstruct(X, m, W, filt).data - X
    # unclipped entries give exactly alpha * base, so the change is within gamma * eps'
    if np.all(np.abs(alpha[:, None, None] * np.tanh(theta)) <= 1):
        assert np.all(np.abs(change).max(axis=(1, 2)) <= 0.98 * eps + 1e-12)


def test_identity_filter_and_empty_selection(rng):
    X = rng.normal(size=(2, 12, 2))
    m = (rng.uniform(size=X.shape) < 0.5).astype(float)
    W = sp.rdft(m * X)
    out = atk.reconstruct(X, m, W, np.ones(W.re.shape)).data
    assert np.array_equal(out, X)
    st0 = atk.FrequencyFilterState.init(2, 12, 2, 0.98, 1e-8)
    assert np.array_equal(st0.filter(), np.ones(W.re.shape))
    Z = sp.rdft(np.zeros_like(X))
    wild = rng.uniform(0, 2, W.re.shape)
    for confine in (True, False):
        assert np.array_equal(atk.reconstruct(X, np.zeros_like(X), Z, wild, confine).data, X)


def test_reconstruct_equals_masked_inverse_form(rng):
    X = rng.normal(size=(1, 14, 2))
    m = (rng.uniform(size=X.shape) < 0.5).astype(float)
    W = sp.rdft(m * X)
    filt = rng.uniform(0, 2, W.re.shape)
    a = atk.reconstruct(X, m, W, filt, confine=False).data
    b = sp.irdft(sp.apply_filter(W, filt)).data + (1 - m) * X
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_fpf_step_is_confined_to_mask(small_case):
    model, X, target, ref, b = small_case
    for seed in range(5):
        m = (np.random.default_rng(seed).uniform(size=X.shape) < 0.3).astype(float)
        state = atk.FrequencyFilterState.init(3, 24, 2, 0.98, 1e-8)
        _, x_new, _ = atk.fpf_inner_optimize(model, GRAD, X, target, ref, m, state, b.eps_prime, steps=1)
        changed = np.abs(x_new - X) > 0
        assert not (changed & (m == 0)).any()
        assert changed.any()


def test_fpf_rejects_soft_mask(small_case):
    model, X, target, ref, b = small_case
    state = atk.FrequencyFilterState.init(3, 24, 2, 0.98, 1e-8)
    with pytest.raises(atk.AttackError, match="binary"):
        atk.fpf_inner_optimize(model, GRAD, X, target, ref, np.full(X.shape, 0.5), state, b.eps_prime)


# ---------------------------------------------------------------------------
# temporal mask


def test_temporal_mask_init_and_bounds(small_case):
    model, X, target, ref, _ = small_case
    rngs = atk.sample_rngs(0, range(3), 13)
    state = atk.TemporalMaskState.init(X.shape, 0.3, 0.5, rngs)
    np.testing.assert_allclose(state.m_t, 0.3, atol=1e-12)
    new = atk.tvm_inner_optimize(model, GRAD, X, target, ref, state, steps=4)
    assert np.all((new.m_t >= 0) & (new.m_t <= 1))
    assert not np.array_equal(new.theta_t, state.theta_t)
    # sign steps of size lr move each logit by an integer multiple of lr
    steps = np.round(new.theta_t - state.theta_t, 9)
    assert set(np.unique(np.abs(steps))) <= {0.0, 2.0, 4.0}
    with pytest.raises(atk.AttackError):
        atk.tvm_inner_optimize(model, GRAD, X, target, ref, state, r=1.0)


def test_hard_sample_matches_concrete_threshold():
    rngs = atk.sample_rngs(4, [0], 13)
    state = atk.TemporalMaskState.init((1, 500, 1), 0.3, 0.5, rngs)
    hard = state.sample_hard()
    assert set(np.unique(hard)) <= {0.0, 1.0}
    assert abs(hard.mean() - 0.3) < 0.06


# ---------------------------------------------------------------------------
# input-space baselines


def test_pgd_zero_iters_and_budget(small_case):
    model, X, target, _, b = small_case
    r0 = atk.pgd_targeted(model, X, target, b, iters=0)
    assert np.array_equal(r0.x_adv, X) and r0.trace.shape == (0, 3)
    r = atk.pgd_targeted(model, X, target, b, iters=15)
    assert not b.violations(r.x_adv, X).any()
    assert r.trace.shape == (15, 3)
    with pytest.raises(atk.AttackError):
        atk.pgd_targeted(model, X, target, b, iters=-1)


def test_adv2_without_explanation_term_is_pgd(small_case):
    model, X, target, ref, b = small_case
    a = atk.adv2_attack(model, IG, X, target, ref, b, iters=12, lambda_exp=0.0)
    p = atk.pgd_targeted(model, X, target, b, iters=12)
    assert np.array_equal(a.x_adv, p.x_adv)
    np.testing.assert_array_equal(a.trace, p.trace)


def test_adv2_self_reference_starts_at_zero(small_case):
    model, X, target, _, b = small_case
    cls = model.predict_labels(X)
    clean = IG(model, X, cls).normalized.data
    r = atk.adv2_attack(model, IG, X, target, clean, b, iters=3, lambda_cls=0.0, explain_class=cls)
    assert np.all(r.trace[0] < 1e-20)


def test_occlusion_is_rejected(small_case):
    model, X, target, ref, b = small_case
    occ = get_explainer("occlusion")
    with pytest.raises(atk.AttackError, match="differentiable"):
        atk.adv2_attack(model, occ, X, target, ref, b, iters=1)
    with pytest.raises(atk.AttackError):
        atk.tsef_attack(model, occ, X, target, ref, b, atk.TSEFConfig(iterations=2))


def test_random_sign_unbiased_and_deterministic():
    T = 50
    X = np.zeros((1, T, 1))
    X[0, 0], X[0, 1] = -10.0, 10.0
    Xs = np.repeat(X, 1000, axis=0)
    b = atk.AttackBudget.for_input(Xs, 0.1)
    r = atk.random_sign(Xs, b, seed=3)
    delta = (r.x_adv - Xs)[:, 2:, :]  # interior coordinates never clip
    eps = b.eps_prime[0]
    assert np.allclose(np.abs(delta), eps)
    assert abs(delta.mean()) < 0.01 * eps
    again = atk.random_sign(Xs, b, seed=3)
    assert np.array_equal(r.x_adv, again.x_adv)
    assert not np.array_equal(r.x_adv, atk.random_sign(Xs, b, seed=4).x_adv)
    assert not b.violations(r.x_adv, Xs).any()


def test_gaussian_baseline_cases():
    rng = np.random.default_rng(0)
    X = rng.uniform(-3, 3, (2, 200, 1))
    sal = rng.uniform(size=X.shape)
    stats = atk.DatasetStats(np.zeros((200, 1)), np.full((200, 1), 0.1), 0.0, 0.1)
    b = atk.AttackBudget.for_input(X, 0.1)
    same = atk.gaussian_baseline(X, sal, "local", 0, stats, b)
    assert np.array_equal(same.x_adv, X)
    full = atk.gaussian_baseline(X, sal, "global", 100, stats, b)
    assert np.all(full.x_adv != X)
    ten = atk.gaussian_baseline(X, sal, "local", 10, stats, b, seed=1)
    assert ((ten.x_adv != X).sum(axis=(1, 2)) == 20).all()
    top = atk.top_k_mask(sal, 10) > 0
    assert np.array_equal(ten.x_adv != X, top)
    with pytest.raises(atk.AttackError):
        atk.gaussian_baseline(X, sal, "local", 10, None, b)
    with pytest.raises(atk.AttackError):
        atk.gaussian_baseline(X, sal, "nearby", 10, stats, b)


def test_dataset_stats(tiny_lowvar):
    s = atk.DatasetStats.from_split(tiny_lowvar.train.X)
    assert s.local_mean.shape == (200, 2)
    assert s.global_std == pytest.approx(float(tiny_lowvar.train.X.std()))


def test_pgd_on_trained_lowvar_reaches_targets(trained_lowvar):
    ds, model = trained_lowvar
    te = ds.test
    ok = np.flatnonzero(model.predict_labels(te.X) == te.y)[:200]
    X, y = te.X[ok], te.y[ok]
    target = (y + 1 + np.random.default_rng(0).integers(0, 3, len(y))) % 4
    b = atk.AttackBudget.for_input(X, 0.1)
    r = atk.pgd_targeted(model, X, target, b, iters=100)
    assert not b.violations(r.x_adv, X).any()
    assert np.mean(r.predicted == target) >= 0.7


def test_adv2_aligns_explanations_better_than_pgd(trained_uv):
    ds, model = trained_uv
    te = ds.test
    ok = np.flatnonzero((model.predict_labels(te.X) == te.y) & (te.y > 0))[:12]
    X, y, ref = te.X[ok], te.y[ok], te.masks[ok]
    target = (y % 3) + 1
    target = np.where(target == y, (y + 1) % 4, target)
    b = atk.AttackBudget.for_input(X, 0.1)
    p = atk.pgd_targeted(model, X, target, b, iters=40)
    a = atk.adv2_attack(model, IG, X, target, ref, b, iters=40, explain_class=y)
    d_p = atk.explanation_distance(IG(model, p.x_adv, y), ref).data
    d_a = atk.explanation_distance(IG(model, a.x_adv, y), ref).data
    assert d_a.mean() < d_p.mean()


# ---------------------------------------------------------------------------
# TSEF


def test_tsef_single_iteration_is_identity(small_case):
    model, X, target, ref, b = small_case
    r = atk.tsef_attack(model, IG, X, target, ref, b, atk.TSEFConfig(iterations=1))
    assert np.array_equal(r.x_adv, X)
    assert r.trace.shape == (0, 3)


def test_tsef_budget_determinism_and_ablation(small_case):
    model, X, target, ref, b = small_case
    cfg = atk.TSEFConfig(iterations=4, k_t=2, k_f=3, seed=5)
    r1 = atk.tsef_attack(model, GRAD, X, target, ref, b, cfg)
    r2 = atk.tsef_attack(model, GRAD, X, target, ref, b, cfg)
    assert np.array_equal(r1.x_adv, r2.x_adv) and np.array_equal(r1.trace, r2.trace)
    assert not b.violations(r1.x_adv, X).any()
    assert r1.trace.shape == (3, 3) and r1.info["attack"] == "tsef"
    r3 = atk.tsef_attack(model, GRAD, X, target, ref, b, atk.TSEFConfig(iterations=4, k_t=2, k_f=3, seed=6))
    assert not np.array_equal(r1.x_adv, r3.x_adv)
    nomt = atk.tsef_attack(model, GRAD, X, target, ref, b, atk.TSEFConfig(iterations=3, k_f=3,
                                                                         use_temporal_mask=False))
    assert nomt.info["attack"] == "tsef-no-mt" and not b.violations(nomt.x_adv, X).any()


def test_tsef_sample_independent_of_batch(small_case):
    model, X, target, ref, b = small_case
    cfg = atk.TSEFConfig(iterations=3, k_t=2, k_f=2)
    full = atk.tsef_attack(model, GRAD, X, target, ref, b, cfg, sample_ids=[10, 11, 12])
    one = atk.tsef_attack(model, GRAD, X[1:2], target[1:2], ref[1:2], b.subset([1]), cfg, sample_ids=[11])
    np.testing.assert_allclose(one.x_adv[0], full.x_adv[1], atol=1e-9)


def test_single_outer_iteration_changes_only_sampled_support(small_case, monkeypatch):
    model, X, target, ref, b = small_case
    seen = {}
    orig = atk.TemporalMaskState.sample_hard

    def spy(self):
        seen["m"] = orig(self)
        return seen["m"]

    monkeypatch.setattr(atk.TemporalMaskState, "sample_hard", spy)
    monkeypatch.setattr(atk.AttackBudget, "project", lambda self, xa, x0: xa)
    r = atk.tsef_attack(model, GRAD, X, target, ref, b, atk.TSEFConfig(iterations=2, k_t=2, k_f=2))
    changed = np.abs(r.x_adv - X) > 0
    assert not (changed & (seen["m"] == 0)).any()


def test_tsef_config_validation():
    with pytest.raises(atk.AttackError):
        atk.TSEFConfig(iterations=0)
    with pytest.raises(atk.AttackError):
        atk.TSEFConfig(metric="l1")


# ---------------------------------------------------------------------------
# gradient identities of the relaxations


@pytest.mark.parametrize("seed", range(6))
def test_masking_gradient_identity(seed):
    e_auto, e_closed, same_sign = oracles.masking_identity_error(seed)
    assert e_auto < 1e-5 and e_closed < 1e-5 and same_sign


@pytest.mark.parametrize("seed", range(6))
def test_filter_gradient_identity(seed):
    e_auto, e_closed = oracles.filter_identity_error(seed)
    assert e_auto < 1e-5 and e_closed < 1e-5


def test_filter_sign_invariant_to_spectral_scale():
    assert all(oracles.filter_sign_scale_invariance(s) for s in range(10))
