"""Gradient-based attribution methods, differentiable w.r.t. their input.

All functions accept a single series (T, D) or a batch (N, T, D). When the
input tensor is itself on a graph (an attack differentiating through the
explanation), first-order gradients are recorded so the saliency can be
backpropagated again.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .classifier import Checkpoint, Classifier

NORM_EPS = 1e-12


@dataclass
class SaliencyMap:
    raw: Tensor
    normalized: Tensor


def normalize(raw) -> Tensor:
    """Min-max of |raw| over the (T, D) axes of each map."""
    raw = ad.as_tensor(raw)
    a = ad.abs_(raw)
    axes = (-2, -1)
    lo = ad.broadcast_to(ad.amin(a, axis=axes, keepdims=True), a.shape)
    hi = ad.broadcast_to(ad.amax(a, axis=axes, keepdims=True), a.shape)
    return ad.div(ad.sub(a, lo), ad.add(ad.sub(hi, lo), NORM_EPS))


def _model(m) -> Classifier:
    return m.model() if isinstance(m, Checkpoint) else m


def _batch(X) -> tuple[Tensor, bool]:
    X = ad.as_tensor(X)
    if X.ndim == 2:
        return ad.reshape(X, (1,) + X.shape), True
    return X, False


def _classes(model: Classifier, Xb: Tensor, class_index) -> np.ndarray:
    n = Xb.shape[0]
    if class_index is None:
        return model.predict_labels(Xb.data)
    cls = np.broadcast_to(np.asarray(class_index, dtype=np.int64), (n,)).copy()
    if np.any(cls < 0) or np.any(cls >= model.config.C):
        raise ValueError(f"class index out of range [0, {model.config.C})")
    return cls


def _finish(raw: Tensor, single: bool) -> SaliencyMap:
    if single:
        raw = ad.reshape(raw, raw.shape[1:])
    return SaliencyMap(raw, normalize(raw))


def _input_gradient(model: Classifier, Xb: Tensor, cls: np.ndarray) -> Tensor:
    create = Xb.requires_grad
    with ad.enable_grad():
        x = Xb if create else Tensor(Xb.data, requires_grad=True)
        out = ad.sum_(ad.select(model.forward(x), cls))
        g = ad.grad(out, x, create_graph=create)
    return g if g is not None else ad.zeros(Xb.shape)


def saliency_grad(model, X, class_index=None) -> SaliencyMap:
    """raw = d f(X)[c] / dX."""
    model = _model(model)
    Xb, single = _batch(X)
    return _finish(_input_gradient(model, Xb, _classes(model, Xb, class_index)), single)


def grad_times_input(model, X, class_index=None) -> SaliencyMap:
    model = _model(model)
    Xb, single = _batch(X)
    g = _input_gradient(model, Xb, _classes(model, Xb, class_index))
    return _finish(ad.mul(Xb, g), single)


def _path_gradient_sum(model: Classifier, diff: Tensor, base: Tensor, cls: np.ndarray, steps: int) -> Tensor:
    """Sum over i=1..m of grad f at base + (i/m) diff, using one batched head call.

    The first layer is linear, so its output along the path is
    project(base) + alpha * project(diff); a shared zero offset ``c`` added to
    every path point collects the summed input gradient.
    """
    create = diff.requires_grad
    n = diff.shape[0]
    with ad.enable_grad():
        c = ad.zeros(diff.shape, requires_grad=True)
        u = model.project(diff)
        shift = ad.add(model.project(base), model.project(c))
        rep = (steps,) + u.shape
        alphas = (np.arange(1, steps + 1, dtype=np.float64) / steps).reshape((steps,) + (1,) * u.ndim)
        z = ad.add(
            ad.mul(ad.broadcast_to(u, rep), Tensor(np.broadcast_to(alphas, rep))),
            ad.broadcast_to(shift, rep),
        )
        z = ad.reshape(z, (steps * n,) + u.shape[1:])
        out = ad.sum_(ad.select(model.head(z), np.tile(cls, steps)))
        g = ad.grad(out, c, create_graph=create)
    return g if g is not None else ad.zeros(diff.shape)


def _path_gradient_sum_reference(model, diff, base, cls, steps) -> Tensor:
    # plain evaluation at every path point; kept as an independent check
    n = diff.shape[0]
    with ad.enable_grad():
        pts = [Tensor(base.data + (i / steps) * diff.data, requires_grad=True) for i in range(1, steps + 1)]
        out = ad.sum_(ad.select(model.forward(ad.concatenate(pts, axis=0)), np.tile(cls, steps)))
        grads = ad.grad(out, pts)
    return Tensor(sum(g.data for g in grads).reshape((n,) + diff.shape[1:]))


def integrated_gradients(model, X, class_index=None, baseline=None, steps: int = 20,
                         reference: bool = False) -> SaliencyMap:
    """Right-endpoint Riemann IG: (X - b) * mean_i grad f(b + (i/m)(X - b))."""
    if steps < 1:
        raise ValueError(f"IG needs steps >= 1, got {steps}")
    model = _model(model)
    Xb, single = _batch(X)
    cls = _classes(model, Xb, class_index)
    if baseline is None:
        base = ad.zeros(Xb.shape)
    else:
        base = ad.as_tensor(baseline)
        if base.ndim == 2 and base.shape == Xb.shape[1:]:
            base = Tensor(np.broadcast_to(base.data, Xb.shape))
        if base.shape != Xb.shape:
            raise ad.ShapeError(f"baseline shape {base.shape} != input shape {Xb.shape}")
    diff = ad.sub(Xb, base)
    if reference:
        gsum = _path_gradient_sum_reference(model, diff, base, cls, steps)
    else:
        gsum = _path_gradient_sum(model, diff, base, cls, steps)
    return _finish(ad.mul(diff, ad.mul(gsum, 1.0 / steps)), single)


def occlusion(model, X, class_index=None, batch_size: int = 512) -> SaliencyMap:
    """raw[t, d] = f(X)[c] - f(X with X[t, d] = 0)[c]. Not differentiable."""
    model = _model(model)
    Xb, single = _batch(X)
    Xn = Xb.data
    cls = _classes(model, Xb, class_index)
    n, T, D = Xn.shape
    base = model.logits(Xn)[np.arange(n), cls]
    raw = np.zeros_like(Xn)
    eye = np.arange(T * D)
    for i in range(n):
        occ = np.repeat(Xn[i][None], T * D, axis=0).reshape(T * D, T * D)
        occ[eye, eye] = 0.0
        scores = model.logits(occ.reshape(T * D, T, D), batch_size)[:, cls[i]]
        raw[i] = (base[i] - scores).reshape(T, D)
    return _finish(Tensor(raw), single)


@dataclass(frozen=True)
class Explainer:
    """A configured attribution method."""

    name: str
    steps: int = 20

    @property
    def differentiable(self) -> bool:
        return self.name != "occlusion"

    def __call__(self, model, X, class_index=None) -> SaliencyMap:
        if self.name == "ig":
            return integrated_gradients(model, X, class_index, steps=self.steps)
        if self.name == "grad":
            return saliency_grad(model, X, class_index)
        if self.name == "gxi":
            return grad_times_input(model, X, class_index)
        if self.name == "occlusion":
            return occlusion(model, X, class_index)
        raise ValueError(f"unknown explainer {self.name!r}")


EXPLAINER_NAMES = ("ig", "grad", "gxi", "occlusion")


def get_explainer(name: str, steps: int = 20) -> Explainer:
    if name not in EXPLAINER_NAMES:
        raise ValueError(f"unknown explainer {name!r}; choose from {EXPLAINER_NAMES}")
    return Explainer(name, steps)
