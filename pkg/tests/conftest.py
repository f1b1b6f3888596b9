import numpy as np
import pytest

from tsef import autodiff as ad
from tsef.classifier import Classifier, ClassifierConfig, init_checkpoint


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


class LinearModel(Classifier):
    """f(X) = <W_c, X> per class; duck-types the Classifier interface."""

    def __init__(self, W: np.ndarray):
        C, T, D = W.shape
        cfg = ClassifierConfig(T=T, D=D, C=C, architecture="mlp")
        w0 = W.reshape(C, T * D).T.copy()
        super().__init__(cfg, {"w0": w0, "b0": np.zeros(C)})


class ConstantModel(Classifier):
    def __init__(self, T: int, D: int, C: int = 4):
        cfg = ClassifierConfig(T=T, D=D, C=C, architecture="mlp")
        super().__init__(cfg, {"w0": np.zeros((T * D, C)), "b0": np.arange(C, dtype=float)})


def random_net(T=16, D=1, arch="mlp", hidden=(8,), activation="tanh", seed=0, C=3) -> Classifier:
    cfg = ClassifierConfig(T=T, D=D, C=C, architecture=arch, hidden=hidden, activation=activation, seed=seed)
    ck = init_checkpoint(cfg)
    # lift the biases off zero so the nets are not odd functions
    rng = np.random.default_rng(seed + 100)
    params = {k: (v + 0.3 * rng.standard_normal(v.shape) if k.startswith("b") else v) for k, v in ck.params.items()}
    return Classifier(cfg, params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_uv():
    from tsef import datagen

    return datagen.generate("seqcomb-uv", 3, {"train": 400, "val": 20, "test": 100})


@pytest.fixture(scope="session")
def tiny_lowvar():
    from tsef import datagen

    return datagen.generate("lowvar", 3, {"train": 400, "val": 20, "test": 100})


@pytest.fixture(scope="session")
def lowvar_mlp(tiny_lowvar):
    from tsef import classifier as clf

    cfg = ClassifierConfig(T=200, D=2, architecture="mlp", hidden=(32,), activation="tanh", lr=0.05, epochs=10)
    return clf.train(tiny_lowvar, cfg)


__all__ = ["ad", "central_diff", "rel_err", "LinearModel", "ConstantModel", "random_net", "ACCEPTANCE"]


# acceptance criteria register a one-line verdict here; printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
