"""Attribution diffusion under a dense l-infinity step, measured across input sizes."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import classifier as clf
from . import datagen
from .explainers import get_explainer


class ScanError(ValueError):
    pass


def dense_step(model, X, target, eps: float) -> np.ndarray:
    """X - eps * sign(grad_X CE(f(X), y')); no clipping, sign(0) = 0."""
    model = model.model() if isinstance(model, clf.Checkpoint) else model
    X = np.asarray(X, dtype=np.float64)
    if eps == 0:
        return X.copy()
    Xb = X[None] if X.ndim == 2 else X
    t = np.broadcast_to(np.asarray(target, dtype=np.int64), (len(Xb),))
    with ad.enable_grad():
        x = ad.Tensor(Xb, requires_grad=True)
        g = ad.grad(ad.sum_(ad.cross_entropy(model.forward(x), t)), x).data
    out = Xb - eps * np.sign(g)
    return out[0] if X.ndim == 2 else out


def attribution(model, X, cls, explainer: str = "grad", normalization: str = "minmax") -> np.ndarray:
    """Non-negative attribution maps for the diffusion measurements."""
    sal = get_explainer(explainer)(model, X, cls)
    if normalization == "minmax":
        return sal.normalized.data
    a = np.abs(sal.raw.data)
    if normalization == "l1":
        return a / (a.sum(axis=(1, 2), keepdims=True) + 1e-12)
    if normalization == "none":
        return a
    raise ScanError(f"unknown normalization {normalization!r}")


@dataclass
class DiffusionReport:
    dims: list[int]
    omega_sizes: list[int]
    off_target_mass: list[float]
    clean_off_target_mass: list[float]
    mismatch: list[float]
    slope: float
    dominance_violations: int
    n_instances: int
    test_accuracy: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def strictly_increasing(self) -> bool:
        m = np.asarray(self.off_target_mass)
        return bool(np.all(np.diff(m) > 0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strictly_increasing"] = self.strictly_increasing
        return d

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["d", "omega", "off_target_mass", "clean_off_target_mass", "mismatch"])
        for row in zip(self.dims, self.omega_sizes, self.off_target_mass, self.clean_off_target_mass, self.mismatch):
            w.writerow([row[0], row[1]] + [f"{v:.8f}" for v in row[2:]])
        return buf.getvalue()


def sized_lowvar(d: int, omega_fraction: float, n_train: int, n_test: int, seed: int) -> datagen.Dataset:
    """LowVar with D = 2, T = d / 2 and one segment of round(omega_fraction * d) steps."""
    if d % 2 or d < 40:
        raise ScanError(f"d must be even and >= 40, got {d}")
    L = max(1, int(round(omega_fraction * d)))
    if L > d // 2 - 2:
        raise ScanError(f"omega fraction {omega_fraction} leaves no room for a segment at d={d}")
    ds = datagen.gen_lowvar({"train": n_train, "val": 1, "test": n_test}, seed, T=d // 2, seg_range=(L, L))
    return datagen.zscore(ds)


def diffusion_scan(dims, omega_fraction: float = 0.1, eps: float = 0.1, n_samples: int = 100, explainer: str = "grad",
                   seed: int = 0, hidden=(32,), activation: str = "tanh", epochs: int = 10, lr: float = 0.1,
                   n_train: int = 1000, normalization: str = "minmax") -> DiffusionReport:
    """Train a small MLP per size d, take one dense step per test sample, measure attribution spread."""
    dims = [int(d) for d in dims]
    if len(dims) < 3:
        raise ScanError("need at least 3 dims to fit a slope")
    if any(b <= a for a, b in zip(dims, dims[1:])):
        raise ScanError("dims must be strictly increasing")
    omegas, mass, clean_mass, mism, accs = [], [], [], [], []
    violations = count = 0
    for d in dims:
        ds = sized_lowvar(d, omega_fraction, n_train, n_samples, seed)
        cfg = clf.ClassifierConfig(T=ds.T, D=ds.D, C=ds.C, architecture="mlp", hidden=tuple(hidden),
                                   activation=activation, lr=lr, epochs=epochs, seed=seed)
        ck = clf.train(ds, cfg)
        model = ck.model()
        accs.append(ck.metadata["test_accuracy"])
        X, y, Q = ds.test.X, ds.test.y, ds.test.masks
        rng = np.random.default_rng([seed, d, 7])
        target = (y + rng.integers(1, ds.C, size=len(y))) % ds.C
        X_adv = dense_step(model, X, target, eps)
        A_adv = attribution(model, X_adv, target, explainer, normalization)
        A_clean = attribution(model, X, target, explainer, normalization)
        off = 1.0 - Q
        m_adv = (A_adv * off).sum(axis=(1, 2))
        m_clean = (A_clean * off).sum(axis=(1, 2))
        mis = np.abs(A_adv - Q).sum(axis=(1, 2))
        violations += int(np.sum(mis < m_adv - 1e-12))
        count += len(X)
        omegas.append(int(Q[0].sum()))
        mass.append(float(m_adv.mean()))
        clean_mass.append(float(m_clean.mean()))
        mism.append(float(mis.mean()))
    x = np.asarray(dims, dtype=np.float64) - np.asarray(omegas)
    slope = float(np.polyfit(x, np.asarray(mass), 1)[0])
    config = {"omega_fraction": omega_fraction, "eps": eps, "n_samples": n_samples, "explainer": explainer,
              "seed": seed, "hidden": list(hidden), "activation": activation, "epochs": epochs, "lr": lr,
              "n_train": n_train, "normalization": normalization}
    return DiffusionReport(dims, omegas, mass, clean_mass, mism, slope, violations, count, accs, config)
