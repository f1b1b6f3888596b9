"""Real DFT over the time axis, per channel, as differentiable matrix products.

Signals are (T, D) or batched (N, T, D); spectra keep the same layout with
T replaced by K = T // 2 + 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class SpectralError(ValueError):
    pass


@dataclass
class Spectrum:
    re: Tensor
    im: Tensor
    source_length: int

    @property
    def n_bins(self) -> int:
        return self.re.shape[-2]


def n_bins(T: int) -> int:
    return T // 2 + 1


def _angles(T: int) -> np.ndarray:
    k = np.arange(n_bins(T))[:, None]
    t = np.arange(T)[None, :]
    # reduce k*t mod T in integers first to keep the angle exact-ish for large T
    return 2.0 * np.pi * ((k * t) % T) / T


@lru_cache(maxsize=32)
def _forward_mats(T: int) -> tuple[np.ndarray, np.ndarray]:
    ang = _angles(T)
    cos = np.cos(ang)
    sin = -np.sin(ang)
    sin[0] = 0.0
    if T % 2 == 0:
        sin[-1] = 0.0
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def bin_weights(T: int) -> np.ndarray:
    """Multiplicity of each half-spectrum bin in the full spectrum."""
    w = np.full(n_bins(T), 2.0)
    w[0] = 1.0
    if T % 2 == 0:
        w[-1] = 1.0
    return w


@lru_cache(maxsize=32)
def _inverse_mats(T: int) -> tuple[np.ndarray, np.ndarray]:
    ang = _angles(T).T  # (T, K)
    w = bin_weights(T)[None, :] / T
    ci = w * np.cos(ang)
    si = -w * np.sin(ang)
    si[:, 0] = 0.0
    if T % 2 == 0:
        si[:, -1] = 0.0
    ci.setflags(write=False)
    si.setflags(write=False)
    return ci, si


def _apply_time_matrix(mat: np.ndarray, x: Tensor) -> Tensor:
    """Multiply ``mat`` (R, L) into axis -2 of x (.., L, D)."""
    if x.ndim == 2:
        return ad.matmul(Tensor(mat), x)
    n, length, d = x.shape
    flat = ad.reshape(ad.transpose(x, (1, 0, 2)), (length, n * d))
    out = ad.matmul(Tensor(mat), flat)
    return ad.transpose(ad.reshape(out, (mat.shape[0], n, d)), (1, 0, 2))


def rdft(signal) -> Spectrum:
    x = ad.as_tensor(signal)
    if x.ndim not in (2, 3):
        raise SpectralError(f"rdft expects (T, D) or (N, T, D), got {x.shape}")
    T = x.shape[-2]
    if T < 2:
        raise SpectralError(f"rdft needs T >= 2, got {T}")
    cos, sin = _forward_mats(T)
    return Spectrum(_apply_time_matrix(cos, x), _apply_time_matrix(sin, x), T)


def irdft(spec: Spectrum) -> Tensor:
    T = int(spec.source_length)
    if spec.re.shape != spec.im.shape:
        raise SpectralError(f"re/im shapes differ: {spec.re.shape} vs {spec.im.shape}")
    if T < 2 or spec.n_bins != n_bins(T):
        raise SpectralError(f"{spec.n_bins} bins inconsistent with source_length {T}")
    ci, si = _inverse_mats(T)
    return ad.add(_apply_time_matrix(ci, spec.re), _apply_time_matrix(si, spec.im))


def rdft_adjoint(spec: Spectrum) -> Tensor:
    """Adjoint of :func:`rdft` applied to a (re, im) pair, as a time signal."""
    cos, sin = _forward_mats(spec.source_length)
    return ad.add(_apply_time_matrix(cos.T, spec.re), _apply_time_matrix(sin.T, spec.im))


def apply_filter(spec: Spectrum, filt) -> Spectrum:
    """Scale re and im by a real filter in [0, 2] of the spectrum's shape."""
    f = ad.as_tensor(filt)
    if f.shape != spec.re.shape:
        raise SpectralError(f"filter shape {f.shape} != spectrum shape {spec.re.shape}")
    if np.any(f.data < 0.0) or np.any(f.data > 2.0):
        raise SpectralError("filter entries must lie in [0, 2]; project before applying")
    return Spectrum(ad.mul(spec.re, f), ad.mul(spec.im, f), spec.source_length)


def energy(spec: Spectrum) -> float:
    """Signal energy implied by the half-spectrum (Parseval)."""
    w = bin_weights(spec.source_length)
    shape = [1] * spec.re.ndim
    shape[-2] = w.size
    power = spec.re.data**2 + spec.im.data**2
    return float((power * w.reshape(shape)).sum() / spec.source_length)
