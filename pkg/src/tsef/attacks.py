"""Attack procedures under an instance-wise l-infinity budget.

Every attack works on a batch (N, T, D); single series (T, D) are promoted
and the result is returned with matching shape. Losses are sums of
per-sample terms, so a sample's trajectory does not depend on which other
samples share its batch (up to floating-point reduction order). Random
draws come from one generator per sample, seeded by ``(seed, sample_id)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import spectral
from .autodiff import Tensor
from .classifier import Checkpoint, Classifier
from .explainers import Explainer, SaliencyMap

BUDGET_TOL = 1e-9
KL_CLAMP = 1e-6
METRICS = ("mse", "cosine", "kl")


class AttackError(ValueError):
    pass


def _model(m) -> Classifier:
    return m.model() if isinstance(m, Checkpoint) else m


def _as_batch(X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        return X[None], True
    if X.ndim != 3:
        raise ad.ShapeError(f"expected (T, D) or (N, T, D), got {X.shape}")
    return X, False


def _labels(v, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(v, dtype=np.int64), (n,)).copy()


def _col(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(-1, 1, 1)


def sample_rngs(seed: int, sample_ids, stream: int = 0) -> list[np.random.Generator]:
    return [np.random.default_rng([int(seed), int(stream), int(i)]) for i in sample_ids]


# ---------------------------------------------------------------------------
# budget


@dataclass
class AttackBudget:
    """Per-sample budget; arrays have one entry per sample in the batch."""

    epsilon: float
    eps_prime: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray

    @classmethod
    def for_input(cls, X, epsilon: float = 0.1) -> "AttackBudget":
        if epsilon < 0:
            raise AttackError(f"epsilon must be non-negative, got {epsilon}")
        Xb, _ = _as_batch(X)
        lo = Xb.min(axis=(1, 2))
        hi = Xb.max(axis=(1, 2))
        return cls(float(epsilon), epsilon * (hi - lo), lo, hi)

    def __len__(self) -> int:
        return len(self.eps_prime)

    def subset(self, idx) -> "AttackBudget":
        return AttackBudget(self.epsilon, self.eps_prime[idx], self.x_min[idx], self.x_max[idx])

    def project(self, X_adv: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Clip into the eps' box around the original X, then into [x_min, x_max]."""
        e = _col(self.eps_prime)
        out = np.clip(X_adv, X - e, X + e)
        return np.clip(out, _col(self.x_min), _col(self.x_max))

    def clip_range(self, X_adv: np.ndarray) -> np.ndarray:
        return np.clip(X_adv, _col(self.x_min), _col(self.x_max))

    def violations(self, X_adv, X) -> np.ndarray:
        """Boolean per sample: True where the budget or the range is broken."""
        Xa, _ = _as_batch(X_adv)
        Xo, _ = _as_batch(X)
        linf = np.abs(Xa - Xo).max(axis=(1, 2))
        out_lo = (Xa < _col(self.x_min) - BUDGET_TOL).any(axis=(1, 2))
        out_hi = (Xa > _col(self.x_max) + BUDGET_TOL).any(axis=(1, 2))
        return (linf > self.eps_prime + BUDGET_TOL) | out_lo | out_hi


@dataclass
class AttackResult:
    x_adv: np.ndarray  # (N, T, D)
    predicted: np.ndarray  # (N,)
    target: np.ndarray  # (N,)
    reference: np.ndarray | None  # (N, T, D)
    trace: np.ndarray  # (iterations, N)
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.predicted)

    def sample(self, i: int) -> "AttackResult":
        ref = None if self.reference is None else self.reference[i : i + 1]
        return AttackResult(self.x_adv[i : i + 1], self.predicted[i : i + 1], self.target[i : i + 1], ref,
                            self.trace[:, i : i + 1], dict(self.info))


def _result(model, x_adv, target, reference, trace, **info) -> AttackResult:
    trace = np.asarray(trace, dtype=np.float64).reshape(-1, len(x_adv))
    return AttackResult(x_adv, model.predict_labels(x_adv), target, reference, trace, info)


# ---------------------------------------------------------------------------
# reference explanations and distances


def top_k_mask(saliency: np.ndarray, k_percent: float) -> np.ndarray:
    """Binary mask of the ceil(k% of T*D) largest entries; ties go to the lower flat index."""
    S, single = _as_batch(saliency)
    n, T, D = S.shape
    k = int(np.ceil(k_percent * T * D / 100.0 - 1e-9))
    k = min(max(k, 0), T * D)
    flat = S.reshape(n, -1)
    order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, order, 1.0, axis=1)
    mask = mask.reshape(S.shape)
    return mask[0] if single else mask


def make_reference(X, mode: str, *, gt_mask=None, model=None, explainer: Explainer | None = None,
                   k_percent: float = 10.0, class_index=None) -> np.ndarray:
    """Binary reference explanation A' for each sample."""
    if mode == "ground_truth":
        if gt_mask is None:
            raise AttackError("ground_truth reference requested but the sample has no gt_mask")
        return (np.asarray(gt_mask, dtype=np.float64) > 0.5).astype(np.float64)
    if mode in ("top_k_clean", "topk"):
        if model is None or explainer is None:
            raise AttackError("top_k_clean reference needs a model and an explainer")
        sal = explainer(_model(model), np.asarray(X, dtype=np.float64), class_index).normalized.data
        return top_k_mask(sal, k_percent)
    raise AttackError(f"unknown reference mode {mode!r}")


def explanation_distance(A, ref, metric: str = "mse") -> Tensor:
    """Distance between a normalized saliency and A'; one value per sample for batches."""
    a = A.normalized if isinstance(A, SaliencyMap) else ad.as_tensor(A)
    ref = np.asarray(ref.data if isinstance(ref, Tensor) else ref, dtype=np.float64)
    if a.shape != ref.shape:
        raise ad.ShapeError(f"explanation_distance: saliency {a.shape} vs reference {ref.shape}")
    single = a.ndim == 2
    n = 1 if single else a.shape[0]
    af = ad.reshape(a, (n, -1))
    rf = ref.reshape(n, -1)
    if metric == "mse":
        out = ad.mean(ad.square(ad.sub(af, rf)), axis=1)
    elif metric == "cosine":
        dot = ad.sum_(ad.mul(af, rf), axis=1)
        norms = ad.mul(ad.sum_(ad.square(af), axis=1), Tensor(np.sum(rf * rf, axis=1)))
        denom = ad.add(ad.sqrt(ad.maximum(norms, 1e-300)), 1e-12)
        out = ad.sub(1.0, ad.div(dot, denom))
    elif metric == "kl":
        p_ref = np.exp(rf - rf.max(axis=1, keepdims=True))
        p_ref /= p_ref.sum(axis=1, keepdims=True)
        log_ref = np.log(np.clip(p_ref, 1e-12, None))
        log_a = ad.maximum(ad.log_softmax(af, axis=1), float(np.log(1e-12)))
        out = ad.sum_(ad.mul(Tensor(p_ref), ad.sub(Tensor(log_ref), log_a)), axis=1)
    else:
        raise AttackError(f"unknown metric {metric!r}; choose from {METRICS}")
    return ad.reshape(out, ()) if single else out


def _check_explainer(explainer) -> None:
    if explainer is None or not getattr(explainer, "differentiable", False):
        name = getattr(explainer, "name", explainer)
        raise AttackError(f"explainer {name!r} is not differentiable; use ig, grad or gxi for attacks")


def _attack_loss(model, explainer, x: Tensor, target, ref, explain_class, metric,
                 lambda_cls: float, lambda_exp: float) -> Tensor:
    """Per-sample lambda_cls * CE(f(x), y') + lambda_exp * d(H(x), A')."""
    terms = []
    if lambda_cls:
        terms.append(ad.mul(ad.cross_entropy(model.forward(x), target), lambda_cls))
    if lambda_exp:
        d = explanation_distance(explainer(model, x, explain_class), ref, metric)
        terms.append(ad.mul(ad.reshape(d, (x.shape[0],)), lambda_exp))
    if not terms:
        return ad.zeros((x.shape[0],))
    return terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])


# ---------------------------------------------------------------------------
# input-space baselines


def pgd_targeted(model, X, target, budget: AttackBudget, iters: int = 100, step=None) -> AttackResult:
    """Targeted sign-gradient descent on CE(f(X), y'), projected every step.

    ``step`` defaults to eps'/10 per sample; a scalar or per-sample array is used as given.
    """
    return adv2_attack(model, None, X, target, None, budget, iters, step, lambda_cls=1.0, lambda_exp=0.0)


def random_sign(X, budget: AttackBudget, seed: int = 0, sample_ids=None) -> AttackResult:
    Xb, _ = _as_batch(X)
    ids = range(len(Xb)) if sample_ids is None else sample_ids
    s = np.stack([r.choice(np.array([-1.0, 1.0]), size=Xb.shape[1:]) for r in sample_rngs(seed, ids, 11)])
    x_adv = budget.clip_range(Xb + _col(budget.eps_prime) * s)
    n = len(Xb)
    return AttackResult(x_adv, np.full(n, -1), np.full(n, -1), None, np.zeros((0, n)), {"attack": "random"})


@dataclass
class DatasetStats:
    """Training-split statistics for the Gaussian replacement baselines."""

    local_mean: np.ndarray  # (T, D)
    local_std: np.ndarray  # (T, D)
    global_mean: float
    global_std: float

    @classmethod
    def from_split(cls, X: np.ndarray) -> "DatasetStats":
        X = np.asarray(X, dtype=np.float64)
        return cls(X.mean(axis=0), X.std(axis=0), float(X.mean()), float(X.std()))


def gaussian_baseline(X, saliency, scope: str, k_percent: float, stats: DatasetStats | None,
                      budget: AttackBudget, seed: int = 0, sample_ids=None) -> AttackResult:
    """Replace the top-k% salient entries with Gaussian draws; range-clipped only."""
    if stats is None:
        raise AttackError("gaussian_baseline needs training-split statistics")
    if scope not in ("local", "global"):
        raise AttackError(f"scope must be local or global, got {scope!r}")
    Xb, _ = _as_batch(X)
    sal, _ = _as_batch(saliency)
    sel = top_k_mask(sal, k_percent) > 0.5
    ids = range(len(Xb)) if sample_ids is None else sample_ids
    z = np.stack([r.standard_normal(Xb.shape[1:]) for r in sample_rngs(seed, ids, 12)])
    if scope == "local":
        draws = stats.local_mean + stats.local_std * z
    else:
        draws = stats.global_mean + stats.global_std * z
    x_adv = budget.clip_range(np.where(sel, draws, Xb))
    n = len(Xb)
    return AttackResult(x_adv, np.full(n, -1), np.full(n, -1), None, np.zeros((0, n)),
                        {"attack": f"gauss-{scope}"})


def adv2_attack(model, explainer, X, target, ref, budget: AttackBudget, iters: int = 100, step=None,
                lambda_cls: float = 1.0, lambda_exp: float = 1.0, metric: str = "mse",
                explain_class=None) -> AttackResult:
    """Sign-gradient descent on lambda_cls * CE + lambda_exp * d(H(X), A')."""
    model = _model(model)
    if iters < 0:
        raise AttackError(f"iters must be >= 0, got {iters}")
    use_exp = lambda_exp != 0.0
    if use_exp:
        _check_explainer(explainer)
    X0, _ = _as_batch(X)
    n = len(X0)
    target = _labels(target, n)
    if explain_class is None and use_exp:
        explain_class = model.predict_labels(X0)
    step = _col(budget.eps_prime / 10.0 if step is None else np.broadcast_to(step, (n,)))
    x = X0.copy()
    trace = []
    for _ in range(iters):
        with ad.enable_grad():
            xt = Tensor(x, requires_grad=True)
            per = _attack_loss(model, explainer, xt, target, ref, explain_class, metric, lambda_cls, lambda_exp)
            g = ad.grad(ad.sum_(per), xt).data
        trace.append(per.data)
        x = budget.project(x - step * np.sign(g), X0)
    name = "adv2" if use_exp else "pgd"
    return _result(model, x, target, ref, np.array(trace).reshape(iters, n), attack=name)


# ---------------------------------------------------------------------------
# TSEF building blocks


def kl_bernoulli(p, r: float) -> Tensor:
    """Elementwise KL(Bern(p) || Bern(r)) with p and r clamped to [1e-6, 1 - 1e-6]."""
    p = ad.clamp(ad.as_tensor(p), KL_CLAMP, 1.0 - KL_CLAMP)
    r = float(np.clip(r, KL_CLAMP, 1.0 - KL_CLAMP))
    q = ad.sub(1.0, p)
    return ad.add(ad.mul(p, ad.log(ad.mul(p, 1.0 / r))), ad.mul(q, ad.log(ad.mul(q, 1.0 / (1.0 - r)))))


def sparsity_loss(m: Tensor, r: float) -> Tensor:
    """Mean Bernoulli KL over (T, D); one value per sample."""
    kl = kl_bernoulli(m, r)
    n = kl.shape[0] if kl.ndim == 3 else 1
    return ad.mean(ad.reshape(kl, (n, -1)), axis=1)


def connectivity_loss(m: Tensor) -> Tensor:
    """(1 / TD) * sum of squared first differences over time; one value per sample."""
    m = ad.as_tensor(m)
    if m.ndim == 2:
        m = ad.reshape(m, (1,) + m.shape)
    n, T, D = m.shape
    diff = ad.sub(m[:, 1:, :], m[:, :-1, :])
    return ad.mul(ad.sum_(ad.reshape(ad.square(diff), (n, -1)), axis=1), 1.0 / (T * D))


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


@dataclass
class TemporalMaskState:
    theta_t: np.ndarray  # (N, T, D) logits
    temperature: float
    rngs: list

    @property
    def m_t(self) -> np.ndarray:
        return ad._sigmoid_np(self.theta_t)

    @classmethod
    def init(cls, shape, r: float, temperature: float, rngs) -> "TemporalMaskState":
        return cls(np.full(shape, logit(r)), float(temperature), rngs)

    def logistic_noise(self) -> np.ndarray:
        u = np.stack([g.random(self.theta_t.shape[1:]) for g in self.rngs])
        u = np.clip(u, 1e-12, 1.0 - 1e-12)
        return np.log(u) - np.log1p(-u)

    def sample_hard(self) -> np.ndarray:
        # the hard Concrete sample thresholds (theta + noise) at 0 for any temperature
        return (self.theta_t + self.logistic_noise() > 0.0).astype(np.float64)


@dataclass
class FrequencyFilterState:
    theta_f: np.ndarray  # (N, K, D)
    alpha: np.ndarray  # (N,)
    gamma: float = 0.98
    tau: float = 1e-8

    @classmethod
    def init(cls, n: int, T: int, D: int, gamma: float, tau: float) -> "FrequencyFilterState":
        return cls(np.zeros((n, spectral.n_bins(T), D)), np.zeros(n), gamma, tau)

    def filter(self) -> np.ndarray:
        return np.clip(1.0 + _col(self.alpha) * np.tanh(self.theta_f), 0.0, 2.0)


def tvm_inner_optimize(model, explainer, X, target, ref, state: TemporalMaskState, steps: int = 10,
                       lr: float = 1.0, lambda_exp: float = 1.0, lambda_cls: float = 1.0,
                       lambda_spa: float = 1.0, lambda_con: float = 1.0, r: float = 0.3,
                       metric: str = "mse", explain_class=None) -> TemporalMaskState:
    """Sign steps on the mask logits for the masked-input objective X' = X * (1 - M~)."""
    if not 0.0 < r < 1.0:
        raise AttackError(f"prior rate r must lie in (0, 1), got {r}")
    model = _model(model)
    if lambda_exp:
        _check_explainer(explainer)
    Xb, _ = _as_batch(X)
    n = len(Xb)
    target = _labels(target, n)
    if explain_class is None:
        explain_class = model.predict_labels(Xb)
    theta = state.theta_t.copy()
    for _ in range(steps):
        noise = state.logistic_noise()
        with ad.enable_grad():
            th = Tensor(theta, requires_grad=True)
            soft = ad.sigmoid(ad.mul(ad.add(th, noise), 1.0 / state.temperature))
            m_tilde = ad.straight_through(soft, (soft.data > 0.5).astype(np.float64))
            x_masked = ad.mul(Tensor(Xb), ad.sub(1.0, m_tilde))
            m = ad.sigmoid(th)
            per = ad.add(
                _attack_loss(model, explainer, x_masked, target, ref, explain_class, metric, lambda_cls, lambda_exp),
                ad.add(ad.mul(sparsity_loss(m, r), lambda_spa), ad.mul(connectivity_loss(m), lambda_con)),
            )
            g = ad.grad(ad.sum_(per), th).data
        theta = theta - lr * np.sign(g)
    return replace(state, theta_t=theta)


def fpf_adaptive_alpha(W_hat: spectral.Spectrum, theta_f, eps_prime, gamma: float = 0.98, tau: float = 1e-8,
                       m_t_hard=None) -> np.ndarray:
    """alpha = gamma * eps' / (||Delta X_base||_inf + tau), with Delta X_base = F^-1(W_hat * tanh(theta_f)).

    With ``m_t_hard`` the base change is confined to the selected support
    before taking the norm. The result is a plain array (no gradient).
    """
    if not 0.0 < gamma < 1.0 or tau <= 0.0:
        raise AttackError("need gamma in (0, 1) and tau > 0")
    th = np.tanh(np.asarray(theta_f.data if isinstance(theta_f, Tensor) else theta_f, dtype=np.float64))
    with ad.no_grad():
        base = spectral.irdft(spectral.Spectrum(ad.mul(W_hat.re.data, th), ad.mul(W_hat.im.data, th),
                                                W_hat.source_length)).data
    if m_t_hard is not None:
        base = base * m_t_hard
    axes = tuple(range(1, base.ndim)) if base.ndim == 3 else None
    norm = np.abs(base).max(axis=axes)
    return gamma * np.asarray(eps_prime, dtype=np.float64) / (norm + tau)


def reconstruct(X: np.ndarray, m_t_hard: np.ndarray, W_hat: spectral.Spectrum, filt, confine: bool = True) -> Tensor:
    """X~ = X + [m *] F^-1(W_hat * (M_f - 1)).

    Equal to M~ F^-1(W_hat M_f) + (1 - M~) X up to roundoff, exact at M_f = 1.
    ``confine`` re-applies the hard mask so the change stays on the selected support.
    """
    f1 = ad.sub(ad.as_tensor(filt), 1.0)
    delta = spectral.irdft(spectral.Spectrum(ad.mul(W_hat.re, f1), ad.mul(W_hat.im, f1), W_hat.source_length))
    if confine:
        delta = ad.mul(delta, m_t_hard)
    return ad.add(Tensor(X), delta)


def fpf_inner_optimize(model, explainer, X, target, ref, m_t_hard, state: FrequencyFilterState,
                       eps_prime, steps: int = 20, lr: float = 1.0, lambda_exp: float = 1.0,
                       lambda_cls: float = 1.0, metric: str = "mse", explain_class=None,
                       confine: bool = True) -> tuple[FrequencyFilterState, np.ndarray, np.ndarray]:
    """Sign steps on the filter logits.

    Returns the final state, the reconstruction under the final filter, and
    the per-sample objective at the last step.
    """
    model = _model(model)
    if lambda_exp:
        _check_explainer(explainer)
    Xb, single = _as_batch(X)
    mh, _ = _as_batch(m_t_hard)
    if not np.all((mh == 0.0) | (mh == 1.0)):
        raise AttackError("m_t_hard must be binary")
    n = len(Xb)
    target = _labels(target, n)
    if explain_class is None:
        explain_class = model.predict_labels(Xb)
    eps_prime = np.broadcast_to(np.asarray(eps_prime, dtype=np.float64), (n,))
    W_hat = spectral.rdft(mh * Xb)
    W_hat = spectral.Spectrum(Tensor(W_hat.re.data), Tensor(W_hat.im.data), W_hat.source_length)
    theta = state.theta_f.copy()
    last = np.zeros(n)
    for _ in range(steps):
        alpha = fpf_adaptive_alpha(W_hat, theta, eps_prime, state.gamma, state.tau, mh if confine else None)
        with ad.enable_grad():
            th = Tensor(theta, requires_grad=True)
            filt = ad.clamp(ad.add(1.0, ad.mul(ad.tanh(th), np.broadcast_to(_col(alpha), theta.shape))), 0.0, 2.0)
            x_rec = reconstruct(Xb, mh, W_hat, filt, confine)
            per = _attack_loss(model, explainer, x_rec, target, ref, explain_class, metric, lambda_cls, lambda_exp)
            g = ad.grad(ad.sum_(per), th).data
        last = per.data
        theta = theta - lr * np.sign(g)
    alpha = fpf_adaptive_alpha(W_hat, theta, eps_prime, state.gamma, state.tau, mh if confine else None)
    out = FrequencyFilterState(theta, alpha, state.gamma, state.tau)
    with ad.no_grad():
        x_final = reconstruct(Xb, mh, W_hat, out.filter(), confine).data
    return out, (x_final[0] if single else x_final), last


@dataclass
class TSEFConfig:
    iterations: int = 100
    k_t: int = 10
    k_f: int = 20
    lr_t: float = 1.0
    lr_f: float = 1.0
    lambda_exp: float = 1.0
    lambda_cls: float = 1.0
    lambda_spa: float = 1.0
    lambda_con: float = 1.0
    lambda_fpf: float = 1.0
    lambda_fpf_exp: float = 1.0
    r: float = 0.3
    temperature: float = 0.5
    gamma: float = 0.98
    tau: float = 1e-8
    metric: str = "mse"
    use_temporal_mask: bool = True
    confine: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise AttackError("TSEF needs iterations >= 1")
        if self.metric not in METRICS:
            raise AttackError(f"unknown metric {self.metric!r}")


def tsef_attack(model, explainer, X, target, ref, budget: AttackBudget, config: TSEFConfig | None = None,
                explain_class=None, sample_ids=None) -> AttackResult:
    """Alternate temporal-mask search and spectral filtering for I - 1 outer iterations."""
    cfg = config or TSEFConfig()
    model = _model(model)
    _check_explainer(explainer)
    X0, _ = _as_batch(X)
    n, T, D = X0.shape
    target = _labels(target, n)
    ref = np.asarray(ref, dtype=np.float64).reshape(X0.shape)
    if explain_class is None:
        explain_class = model.predict_labels(X0)
    ids = range(n) if sample_ids is None else sample_ids
    rngs = sample_rngs(cfg.seed, ids, 13)
    x = X0.copy()
    trace = []
    for _ in range(cfg.iterations - 1):
        if cfg.use_temporal_mask:
            tstate = TemporalMaskState.init(x.shape, cfg.r, cfg.temperature, rngs)
            tstate = tvm_inner_optimize(model, explainer, x, target, ref, tstate, cfg.k_t, cfg.lr_t,
                                        cfg.lambda_exp, cfg.lambda_cls, cfg.lambda_spa, cfg.lambda_con,
                                        cfg.r, cfg.metric, explain_class)
            m_hard = tstate.sample_hard()
        else:
            m_hard = np.ones_like(x)
        fstate = FrequencyFilterState.init(n, T, D, cfg.gamma, cfg.tau)
        _, x_rec, last = fpf_inner_optimize(model, explainer, x, target, ref, m_hard, fstate, budget.eps_prime,
                                      cfg.k_f, cfg.lr_f, cfg.lambda_fpf_exp, cfg.lambda_fpf, cfg.metric,
                                      explain_class, cfg.confine)
        x = budget.project(x_rec, X0)
        trace.append(last)
    name = "tsef" if cfg.use_temporal_mask else "tsef-no-mt"
    return _result(model, x, target, ref, np.array(trace).reshape(max(cfg.iterations - 1, 0), n), attack=name)
