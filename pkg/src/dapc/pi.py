"""Gaussian predictive information of latent sequences.

Windows of ``2T`` consecutive latent steps are flattened time-major and their
sample covariance ``sigma_2T`` is estimated once.  Every quantity downstream
(``I_T``, ``I_{T/2}``, the single-step covariance used by the orthogonality
penalty) is read off a top-left block of that one matrix.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PIConfig:
    T: int = 4
    alpha: float = 0.0
    jitter: float = DEFAULT_JITTER
    window_stride: int = 1
    # "batch" estimates the covariance from the current batch only;
    # "corpus" lets callers pass a precomputed full-data covariance instead
    estimate: str = "batch"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.alpha != 0 and self.T % 2:
            raise ConfigError(f"multi-scale PI needs an even T, got T={self.T}")
        if self.window_stride < 1:
            raise ConfigError("window_stride must be >= 1")
        if self.jitter < 0:
            raise ConfigError("jitter must be >= 0")
        if self.estimate not in ("batch", "corpus"):
            raise ConfigError(f"unknown estimate mode {self.estimate!r}")


@dataclass
class WindowCovariance:
    """Covariance of flattened ``2T``-step latent windows.

    ``sigma_2T`` has shape ``(2*T*d, 2*T*d)``; the top-left ``T*d`` block
    estimates the ``T``-window covariance and the top-left ``d`` block the
    single-step covariance.
    """

    sigma_2T: Tensor
    T: int
    d: int
    n_windows: int
    jitter: float = 0.0

    def block(self, steps: int) -> Tensor:
        k = steps * self.d
        return ad.slice_rows_cols(self.sigma_2T, (0, k), (0, k))

    @classmethod
    def from_matrix(cls, sigma, T: int, d: int, n_windows: int = 0) -> "WindowCovariance":
        """Wrap a known (e.g. analytic) covariance."""
        sigma = ad.as_tensor(sigma)
        if sigma.shape != (2 * T * d, 2 * T * d):
            raise ContractError(
                f"covariance shape {sigma.shape} does not match 2*T*d = {2 * T * d}")
        return cls(sigma, T, d, n_windows)


def estimate_window_covariance(Z, T: int, stride: int = 1,
                               jitter: float = DEFAULT_JITTER) -> WindowCovariance:
    """Sample covariance of all ``2T``-step windows in a latent batch.

    Parameters
    ----------
    Z : Tensor or array, shape (batch, length, d)
        Latent sequences; differentiable.
    T : int
        Past/future window length.
    stride : int
        Steps between consecutive windows.
    jitter : float
        Added to the diagonal after symmetrization.

    Notes
    -----
    Windows are pooled across sequences and centered on the batch-global
    window mean.  The divisor is the window count (Gaussian MLE).
    """
    Z = ad.as_tensor(Z)
    if Z.ndim == 2:
        Z = ad.reshape(Z, (1,) + Z.shape)
    b, length, d = Z.shape
    width = 2 * T
    if length < width:
        raise ContractError(
            f"sequence length {length} is shorter than the window 2T={width} "
            f"(all {b} sequences in the batch share this length)")
    windows = ad.time_windows(Z, width, stride)
    n = windows.shape[0]
    if n < width * d:
        warnings.warn(
            f"only {n} windows for a {width * d}-dim covariance; estimate is "
            "rank-deficient and relies on jitter", RuntimeWarning, stacklevel=2)
    centered = windows - ad.mean(windows, axis=0, keepdims=True)
    cov = ad.scale(centered.T @ centered, 1.0 / n)
    cov = ad.scale(cov + cov.T, 0.5)
    if jitter:
        if logger.isEnabledFor(logging.DEBUG) and not ad.cholesky_ok(cov.values):
            logger.debug("window covariance singular without jitter; adding %g", jitter)
        cov = cov + jitter * np.eye(width * d)
    return WindowCovariance(cov, T, d, n, jitter)


def _pi_from_blocks(cov: WindowCovariance, half: int) -> Tensor:
    # I = ln|Sigma_half| - 0.5 ln|Sigma_{2 half}|
    small = ad.logdet_spd(cov.block(half))
    big = ad.logdet_spd(cov.block(2 * half))
    return small - ad.scale(big, 0.5)


def predictive_information(cov: WindowCovariance) -> Tensor:
    """Gaussian PI between the past and future ``T``-step windows."""
    return _pi_from_blocks(cov, cov.T)


def multiscale_pi(cov: WindowCovariance, alpha: float) -> Tensor:
    """``I_T + alpha * I_{T/2}``, both read from the same ``sigma_2T``."""
    i_t = predictive_information(cov)
    if alpha == 0:
        return i_t
    if cov.T % 2:
        raise ConfigError(f"multi-scale PI needs an even T, got T={cov.T}")
    return i_t + ad.scale(_pi_from_blocks(cov, cov.T // 2), alpha)


def ortho_penalty(cov: WindowCovariance) -> Tensor:
    """Squared Frobenius distance of the single-step covariance from identity."""
    sigma_1 = cov.block(1)
    return ad.frobenius_sq(sigma_1 - np.eye(cov.d))


def gaussian_entropy(sigma, jitter: float = 0.0) -> Tensor:
    """``0.5 * ln((2 pi e)^N |sigma|)`` via the Cholesky log-determinant."""
    sigma = ad.as_tensor(sigma)
    n = sigma.shape[0]
    return ad.scale(ad.logdet_spd(sigma, jitter) + n * math.log(2 * math.pi * math.e), 0.5)


def pi_numpy(Z: np.ndarray, T: int, jitter: float = DEFAULT_JITTER, stride: int = 1) -> float:
    """Convenience: PI of a plain array, no graph."""
    return float(predictive_information(
        estimate_window_covariance(np.asarray(Z, dtype=float), T, stride, jitter)).values)


def ar1_pi(rho: float, T: int = 1) -> float:
    """Closed-form PI of a unit-variance scalar AR(1).

    Past and future of a Markov chain share information only through the
    boundary pair, so ``I_T`` equals ``-0.5 ln(1 - rho^2)`` for every T.
    """
    return -0.5 * math.log1p(-rho * rho)


def toeplitz_ar1_cov(rho: float, size: int) -> np.ndarray:
    idx = np.arange(size)
    return rho ** np.abs(idx[:, None] - idx[None, :])
