"""Synthetic time series benchmarks with ground-truth explanation masks.

All three datasets sit on a NARMA-10 background. Each sample draws from its
own seed stream, keyed by (seed, split, index), so splits are disjoint by
construction and regeneration is bitwise reproducible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tsr

GENERATOR_VERSION = "1"
NARMA_BURN_IN = 50
NARMA_BOUND = 10.0
NARMA_MAX_REDRAWS = 100
BACKGROUND_STD = 0.15  # SeqComb: the trend patterns must stand out
LOWVAR_BACKGROUND_STD = 1.0  # LowVar: segment means sit inside the background's amplitude range
SPLITS = ("train", "val", "test")
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
DEFAULT_SIZES = {"train": 5000, "val": 100, "test": 1000}


class DataError(ValueError):
    pass


@dataclass
class LabeledSeries:
    values: np.ndarray  # (T, D)
    label: int
    gt_mask: np.ndarray | None = None


@dataclass
class Split:
    X: np.ndarray  # (N, T, D)
    y: np.ndarray  # (N,) int
    masks: np.ndarray | None = None  # (N, T, D) in {0, 1}

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> LabeledSeries:
        m = None if self.masks is None else self.masks[i]
        return LabeledSeries(self.X[i], int(self.y[i]), m)


@dataclass
class Dataset:
    name: str
    T: int
    D: int
    C: int
    seed: int | None
    train: Split
    val: Split
    test: Split
    normalization: dict | None = None
    extra: dict = field(default_factory=dict)

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


# ---------------------------------------------------------------------------
# NARMA background


def _narma_recurrence(u: np.ndarray) -> np.ndarray:
    """NARMA-10 over rows of a drive array u (S, L); x[0..9] = 0."""
    s, length = u.shape
    x = np.zeros((s, length))
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(9, length - 1):
            window = x[:, t - 9 : t + 1].sum(axis=1)
            x[:, t + 1] = 0.3 * x[:, t] + 0.05 * x[:, t] * window + 1.5 * u[:, t - 9] * u[:, t] + 0.1
    return x


def _narma_streams(seeds: list[np.random.SeedSequence], T: int) -> np.ndarray:
    """One bounded NARMA-10 stream of length T per seed, shape (S, T)."""
    length = T + NARMA_BURN_IN
    if not seeds:
        return np.zeros((0, T))
    rngs = [np.random.default_rng(s) for s in seeds]
    u = np.stack([r.uniform(0.0, 0.5, length) for r in rngs])
    x = _narma_recurrence(u)
    for _ in range(NARMA_MAX_REDRAWS):
        bad = ~(np.isfinite(x).all(axis=1) & (np.abs(x).max(axis=1) <= NARMA_BOUND))
        if not bad.any():
            break
        idx = np.flatnonzero(bad)
        x[idx] = _narma_recurrence(np.stack([rngs[i].uniform(0.0, 0.5, length) for i in idx]))
    else:
        raise DataError("NARMA stream kept diverging")
    return x[:, NARMA_BURN_IN:]


def narma_background(T: int, D: int, seed: int) -> np.ndarray:
    """Raw NARMA-10 background of shape (T, D); channel d uses sub-seed (seed, d)."""
    if T < 20:
        raise DataError(f"NARMA background needs T >= 20, got {T}")
    seeds = [np.random.SeedSequence([seed, d]) for d in range(D)]
    return _narma_streams(seeds, T).T.copy()


def _standardize_rows(x: np.ndarray, std: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / np.where(sd > 0, sd, 1.0) * std


def _backgrounds(seed: int, split: str, n: int, T: int, D: int, std: float = BACKGROUND_STD) -> np.ndarray:
    code = SPLIT_CODES[split]
    seeds = [np.random.SeedSequence([seed, code, i, 0, d]) for i in range(n) for d in range(D)]
    raw = _narma_streams(seeds, T).reshape(n, D, T)
    return _standardize_rows(raw, std).transpose(0, 2, 1).copy()


# ---------------------------------------------------------------------------
# pattern placement


def _balanced_labels(n: int, C: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % C)


def _place_segments(rng, T: int, lengths: list[int], max_tries: int = 1000) -> list[int]:
    """Starts for non-overlapping segments separated by at least one step."""
    for _ in range(max_tries):
        starts = [int(rng.integers(0, T - L + 1)) for L in lengths]
        spans = sorted(zip(starts, lengths))
        if all(s0 + l0 < s1 for (s0, l0), (s1, _) in zip(spans, spans[1:])):
            return starts
    raise DataError(f"could not place segments {lengths} in T={T}")


def trend_pattern(L: int, wavelength: float, amplitude: float, increasing: bool) -> np.ndarray:
    """Monotone stretch of a sinusoid centred on its zero crossing."""
    u = np.arange(L) - (L - 1) / 2.0
    p = amplitude * np.sin(2.0 * np.pi * u / wavelength)
    return p if increasing else -p


# class -> shapes of the (earlier, later) subsequences
SEQCOMB_SHAPES = {1: (True, True), 2: (False, False), 3: (True, False)}


def _gen_seqcomb(split, n, seed, T, D, amplitude, seg_range, wl_range):
    C = 4
    code = SPLIT_CODES[split]
    X = _backgrounds(seed, split, n, T, D)
    masks = np.zeros_like(X)
    y = _balanced_labels(n, C, np.random.default_rng([seed, code, 99]))
    for i in range(n):
        c = int(y[i])
        if c == 0:
            continue
        rng = np.random.default_rng([seed, code, i, 1])
        lengths = [int(rng.integers(seg_range[0], seg_range[1] + 1)) for _ in range(2)]
        starts = _place_segments(rng, T, lengths)
        order = np.argsort(starts)
        channels = [int(rng.integers(0, D)) for _ in range(2)]
        for rank, j in enumerate(order):
            L, s, ch = lengths[j], starts[j], channels[j]
            wl = rng.uniform(max(wl_range[0], 2.0 * (L - 1)), wl_range[1])
            X[i, s : s + L, ch] += trend_pattern(L, wl, amplitude, SEQCOMB_SHAPES[c][rank])
            masks[i, s : s + L, ch] = 1.0
    return Split(tsr.f32_round(X), y.astype(np.int64), masks)


def _gen_lowvar(split, n, seed, T, seg_range, noise_std, level, background_std):
    C, D = 4, 2
    code = SPLIT_CODES[split]
    X = _backgrounds(seed, split, n, T, D, background_std)
    masks = np.zeros_like(X)
    y = _balanced_labels(n, C, np.random.default_rng([seed, code, 99]))
    for i in range(n):
        c = int(y[i])
        mean = -level if c % 2 == 0 else level
        sensor = c // 2
        rng = np.random.default_rng([seed, code, i, 1])
        L = int(rng.integers(seg_range[0], seg_range[1] + 1))
        (s,) = _place_segments(rng, T, [L])
        X[i, s : s + L, sensor] = rng.normal(mean, noise_std, L)
        masks[i, s : s + L, sensor] = 1.0
    return Split(tsr.f32_round(X), y.astype(np.int64), masks)


def _sizes(n_per_split) -> dict[str, int]:
    if n_per_split is None:
        return dict(DEFAULT_SIZES)
    if isinstance(n_per_split, dict):
        return {s: int(n_per_split[s]) for s in SPLITS}
    return dict(zip(SPLITS, (int(v) for v in n_per_split)))


def _finish(name, T, D, seed, splits, normalize, extra=None) -> Dataset:
    ds = Dataset(name, T, D, 4, seed, splits["train"], splits["val"], splits["test"], extra=extra or {})
    return zscore(ds) if normalize else ds


def gen_seqcomb_uv(n_per_split=None, seed: int = 0, *, T: int = 200, amplitude: float = 1.0,
                   seg_range=(10, 20), wavelength_range=(20.0, 60.0), normalize: bool = False) -> Dataset:
    sizes = _sizes(n_per_split)
    splits = {s: _gen_seqcomb(s, sizes[s], seed, T, 1, amplitude, seg_range, wavelength_range) for s in SPLITS}
    return _finish("seqcomb-uv", T, 1, seed, splits, normalize, {"amplitude": amplitude})


def gen_seqcomb_mv(n_per_split=None, seed: int = 0, *, T: int = 200, D: int = 4, amplitude: float = 1.0,
                   seg_range=(10, 20), wavelength_range=(20.0, 60.0), normalize: bool = False) -> Dataset:
    sizes = _sizes(n_per_split)
    splits = {s: _gen_seqcomb(s, sizes[s], seed, T, D, amplitude, seg_range, wavelength_range) for s in SPLITS}
    return _finish("seqcomb-mv", T, D, seed, splits, normalize, {"amplitude": amplitude})


def gen_lowvar(n_per_split=None, seed: int = 0, *, T: int = 200, seg_range=(10, 20),
               noise_std: float = 0.1, level: float = 1.5, background_std: float = LOWVAR_BACKGROUND_STD,
               normalize: bool = False) -> Dataset:
    """LowVar; ``seg_range=(L, L)`` pins the segment length (used by the scaling scan)."""
    sizes = _sizes(n_per_split)
    splits = {s: _gen_lowvar(s, sizes[s], seed, T, seg_range, noise_std, level, background_std) for s in SPLITS}
    return _finish("lowvar", T, 2, seed, splits, normalize, {"background_std": background_std})


GENERATORS = {
    "seqcomb-uv": gen_seqcomb_uv,
    "seqcomb-mv": gen_seqcomb_mv,
    "lowvar": gen_lowvar,
}


def generate(name: str, seed: int, n_per_split=None, normalize: bool = True) -> Dataset:
    try:
        fn = GENERATORS[name]
    except KeyError:
        raise DataError(f"unknown dataset {name!r}; choose from {sorted(GENERATORS)}") from None
    return fn(n_per_split, seed, normalize=normalize)


# ---------------------------------------------------------------------------
# normalization and persistence


def zscore(ds: Dataset) -> Dataset:
    """Per-channel z-normalization with training-split statistics."""
    mu = ds.train.X.mean(axis=(0, 1))
    sd = ds.train.X.std(axis=(0, 1))
    sd = np.where(sd > 0, sd, 1.0)

    def apply(sp: Split) -> Split:
        return Split(tsr.f32_round((sp.X - mu) / sd), sp.y.copy(), None if sp.masks is None else sp.masks.copy())

    norm = {"mean": mu.tolist(), "std": sd.tolist()}
    return Dataset(ds.name, ds.T, ds.D, ds.C, ds.seed, apply(ds.train), apply(ds.val), apply(ds.test),
                   normalization=norm, extra=dict(ds.extra))


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "name": ds.name,
        "T": ds.T,
        "D": ds.D,
        "C": ds.C,
        "seed": ds.seed,
        "splits": {s: len(ds.split(s)) for s in SPLITS},
        "generator_version": GENERATOR_VERSION,
        "normalization": ds.normalization,
        "has_masks": ds.train.masks is not None,
        "extra": ds.extra,
    }
    for s in SPLITS:
        sp = ds.split(s)
        tsr.save(out / f"{s}_values.tsr", sp.X)
        tsr.save(out / f"{s}_labels.tsr", sp.y.astype(np.float64))
        if sp.masks is not None:
            tsr.save(out / f"{s}_masks.tsr", sp.masks)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(path) -> Dataset:
    """Load a dataset directory; external data may omit masks and the seed."""
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise DataError(f"no manifest.json in {root}")
    meta = json.loads(mf.read_text())
    splits = {}
    for s in SPLITS:
        vf = root / f"{s}_values.tsr"
        if not vf.exists():
            raise DataError(f"missing {vf.name} in {root}")
        X = tsr.load(vf)
        if X.ndim == 2:
            X = X[:, :, None]
        y = tsr.load(root / f"{s}_labels.tsr").astype(np.int64).reshape(-1)
        mfile = root / f"{s}_masks.tsr"
        masks = tsr.load(mfile).reshape(X.shape) if mfile.exists() else None
        if X.shape[1:] != (meta["T"], meta["D"]) or len(y) != len(X):
            raise DataError(f"split {s}: shape {X.shape} / {len(y)} labels disagree with manifest")
        if len(y) and (y.min() < 0 or y.max() >= meta["C"]):
            raise DataError(f"split {s}: labels outside [0, {meta['C']})")
        splits[s] = Split(X, y, masks)
    return Dataset(meta["name"], int(meta["T"]), int(meta["D"]), int(meta["C"]), meta.get("seed"),
                   splits["train"], splits["val"], splits["test"],
                   normalization=meta.get("normalization"), extra=meta.get("extra", {}))
