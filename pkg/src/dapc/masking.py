"""Random time/dimension band masks and masked reconstruction losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


class MaskConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    """Counts and maximum widths of the time and dimension bands.

    Widths are drawn from ``0..w`` inclusive, so a band can be empty.
    """

    n_T: int = 0
    w_T: int = 0
    n_F: int = 0
    w_F: int = 0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_T, self.w_T, self.n_F, self.w_F) < 0:
            raise MaskConfigError(f"mask counts/widths must be >= 0: {self}")

    @property
    def is_empty(self) -> bool:
        return self.n_T * self.w_T == 0 and self.n_F * self.w_F == 0


# Lorenz setting: up to 2 dimension bands of width <= 5, up to 2 time bands of width <= 40
LORENZ_MASK = MaskSpec(n_T=2, w_T=40, n_F=2, w_F=5)


@dataclass
class Mask:
    """Binary mask of shape ``(n_dims, length)``; 1 keeps, 0 masks."""

    m: np.ndarray

    @property
    def time_major(self) -> np.ndarray:
        return self.m.T

    @property
    def masked_fraction(self) -> float:
        return float(1.0 - self.m.mean())


def sample_mask(spec: MaskSpec, n_dims: int, length: int, rng: np.random.Generator) -> Mask:
    """Draw ``n_T`` time bands and ``n_F`` dimension bands; bands may overlap."""
    if n_dims < 1 or length < 1:
        raise MaskConfigError(f"mask needs n_dims, length >= 1, got {n_dims}, {length}")
    if spec.w_T > length or spec.w_F > n_dims:
        raise MaskConfigError(
            f"mask widths (w_T={spec.w_T}, w_F={spec.w_F}) exceed data ({length}, {n_dims})")
    m = np.ones((n_dims, length))
    for _ in range(spec.n_T):
        w = int(rng.integers(0, spec.w_T + 1))
        start = int(rng.integers(0, length - w + 1))
        m[:, start:start + w] = 0.0
    for _ in range(spec.n_F):
        w = int(rng.integers(0, spec.w_F + 1))
        start = int(rng.integers(0, n_dims - w + 1))
        m[start:start + w, :] = 0.0
    return Mask(m)


def sample_batch_masks(spec: MaskSpec, batch: int, length: int, n_dims: int,
                       rng: np.random.Generator) -> np.ndarray:
    """One fresh mask per sequence, returned time-major ``(batch, length, n_dims)``."""
    return np.stack([sample_mask(spec, n_dims, length, rng).time_major for _ in range(batch)])


def _as_time_major(M, shape: tuple) -> np.ndarray:
    M = M.m if isinstance(M, Mask) else np.asarray(M, dtype=float)
    if M.shape == shape:
        return M
    # a single (n_dims, length) mask against a (length, n_dims) sequence
    if M.ndim == 2 and M.T.shape == shape[-2:]:
        return np.broadcast_to(M.T, shape)
    if M.ndim == 3 and M.transpose(0, 2, 1).shape == shape:
        return M.transpose(0, 2, 1)
    raise DimensionError(f"mask shape {M.shape} incompatible with data shape {shape}")


def shifted_masked_recon_loss(X: np.ndarray, M, recon: Tensor, s: int = 0,
                              normalize: bool = True) -> Tensor:
    """Masked reconstruction where step ``i`` of ``recon`` targets step ``i+s`` of ``X``.

    Parameters
    ----------
    X : array, shape (..., length, n)
        Clean (unmasked) inputs, time-major.
    M : Mask or array
        1 = kept, 0 = masked.  Time-major arrays of X's shape are accepted,
        as is a single ``(n, length)`` mask.
    recon : Tensor, shape of X
        Decoder output computed from the masked inputs.
    s : int
        Shift in steps.  The last ``s`` recon steps have no target.
    normalize : bool
        Divide the squared error by the count of scored entries (at least 1).
    """
    X = np.asarray(X, dtype=float)
    recon = ad.as_tensor(recon)
    if recon.shape != X.shape:
        raise DimensionError(f"recon shape {recon.shape} != data shape {X.shape}")
    length = X.shape[-2]
    if not 0 <= s < length:
        raise MaskConfigError(f"shift s={s} must satisfy 0 <= s < length={length}")
    Mt = _as_time_major(M, X.shape)
    # score recon[i] against X[i+s] wherever X[i+s] was hidden from the encoder
    weight = 1.0 - Mt[..., s:, :]
    target = X[..., s:, :]
    pred = recon[(Ellipsis, slice(0, length - s), slice(None))]
    n_scored = float(weight.sum())
    if n_scored == 0:
        warnings.warn("mask hides nothing; reconstruction loss is identically zero",
                      RuntimeWarning, stacklevel=2)
    loss = ad.frobenius_sq((pred - target) * weight)
    if normalize:
        loss = ad.scale(loss, 1.0 / max(1.0, n_scored))
    return loss


def masked_recon_loss(X: np.ndarray, M, recon: Tensor, normalize: bool = True) -> Tensor:
    """``||(1-M) * (X - recon)||_F^2``, optionally per masked entry."""
    return shifted_masked_recon_loss(X, M, recon, 0, normalize)


def full_recon_loss(X: np.ndarray, recon: Tensor, s: int = 0, normalize: bool = True) -> Tensor:
    """Plain autoencoder error: every entry scored (no masking)."""
    X = np.asarray(X, dtype=float)
    return shifted_masked_recon_loss(X, np.zeros_like(X), recon, s, normalize)
