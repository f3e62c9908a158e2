"""Baseline feature extractors: PCA, DCA (and SFA as DCA with T=1), CPC."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import pi
from .autodiff import ContractError
from .encoders import DecoderSpec, EncoderSpec
from .train import (AdamState, Model, ObjectiveWeights, StepResult, TrainConfig, adam_update,
                    clip_by_global_norm, train)

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


class BaselineConfigError(ValueError):
    pass


@dataclass
class LinearEncoder:
    """Frozen affine projection ``z = (x - mean) @ W``; causal by construction."""

    weight: np.ndarray
    mean: np.ndarray
    info: dict = field(default_factory=dict)
    causal: bool = True

    def features(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) @ self.weight

    __call__ = features


def _train_x(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data
    return np.asarray(data["train"]["x"], dtype=float)


def _flat(X: np.ndarray) -> np.ndarray:
    return X.reshape(-1, X.shape[-1])


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of every column positive, so the output is unique
    idx = np.abs(vecs).argmax(axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def pca_baseline(data, d: int, jitter: float = 1e-8) -> LinearEncoder:
    """Top-``d`` eigenvectors of the training covariance.

    ``data`` is a bundle or a raw ``(..., n)`` array.  Rank deficiency among the
    kept directions is flagged with a warning and ``jitter`` is added to the
    covariance diagonal.
    """
    F = _flat(_train_x(data))
    n = F.shape[1]
    if not 1 <= d <= n:
        raise BaselineConfigError(f"need 1 <= d <= {n}, got d={d}")
    mean = F.mean(axis=0)
    C = np.cov(F, rowvar=False, bias=True).reshape(n, n)
    evals, evecs = np.linalg.eigh(C)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    rank_deficient = evals[d - 1] <= RANK_TOL * max(evals[0], 1.0)
    if rank_deficient:
        warnings.warn(f"covariance is rank deficient within the top {d} directions; "
                      f"adding jitter {jitter:g}", RuntimeWarning, stacklevel=2)
        evals, evecs = np.linalg.eigh(C + jitter * np.eye(n))
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
    W = _fix_signs(evecs[:, :d])
    return LinearEncoder(W, mean, {"method": "pca", "eigenvalues": evals.tolist(),
                                   "rank_deficient": bool(rank_deficient)})


def _kron_eye(W, m: int) -> ad.Tensor:
    """``kron(I_m, W)``: ``W`` repeated down the block diagonal."""
    W = ad.as_tensor(W)
    n, d = W.shape

    def back(g):
        return (np.einsum("inid->nd", g.reshape(m, n, m, d)),)

    return ad.record(np.kron(np.eye(m), W.values), (W,), back, "kron_eye")


def projected_window_covariance(S: np.ndarray, W, T: int, jitter: float) -> pi.WindowCovariance:
    """Window covariance of ``z = x @ W`` from the input window covariance ``S``."""
    Wb = _kron_eye(W, 2 * T)
    sz = Wb.T @ ad.matmul(S, Wb)
    sz = ad.scale(sz + sz.T, 0.5)
    if jitter:
        sz = sz + jitter * np.eye(sz.shape[0])
    return pi.WindowCovariance(sz, T, W.shape[1], 0, jitter)


def _dca_ascent(S: np.ndarray, W0: np.ndarray, T: int, iters: int, lr: float, gamma: float,
                jitter: float) -> tuple[np.ndarray, list]:
    W = ad.Tensor(W0.copy(), requires_grad=True, name="dca.W")
    params = {"dca.W": W}
    state = AdamState()
    history = []
    for _ in range(iters):
        cov = projected_window_covariance(S, W, T, jitter)
        i_t = pi.predictive_information(cov)
        loss = -i_t + ad.scale(pi.ortho_penalty(cov), gamma)
        grads = ad.backward(loss)
        g, _, _ = clip_by_global_norm({"dca.W": grads[W]}, 5.0)
        adam_update(params, g, state, lr)
        history.append(float(i_t.values))
    return W.values.copy(), history


def dca_baseline(data, d: int, T: int, iters: int = 500, lr: float = 1e-2, gamma: float = 0.1,
                 jitter: float = pi.DEFAULT_JITTER, init: str = "random", n_init: int = 3,
                 seed: int = 0) -> LinearEncoder:
    """Maximize the windowed PI of a linear projection, with the ortho penalty.

    The ``2T``-step window covariance of the inputs is estimated once; the
    latent covariance is then an exact projection of it, so each Adam step
    is cheap and uses all training windows.  ``init="random"`` runs
    ``n_init`` seeded random restarts and keeps the one with the highest
    final PI; ``init="pca"`` starts once from the PCA projection.  The PCA
    start can sit on a stationary point (a loud white-noise direction has
    zero PI gradient), which is why restarts are the default.  With ``T=1``
    this is the SFA-like baseline.
    """
    X = _train_x(data)
    if X.ndim == 2:
        X = X[None]
    n = X.shape[-1]
    if not 1 <= d <= n:
        raise BaselineConfigError(f"need 1 <= d <= {n}, got d={d}")
    if iters < 1 or n_init < 1:
        raise BaselineConfigError("iters and n_init must be >= 1")
    mean = _flat(X).mean(axis=0)
    S = pi.estimate_window_covariance(X - mean, T, jitter=0.0).sigma_2T.values
    if init == "pca":
        starts = [pca_baseline(X, d).weight]
    elif init == "random":
        rng = np.random.default_rng(seed)
        starts = [np.linalg.qr(rng.normal(size=(n, d)))[0] for _ in range(n_init)]
    else:
        raise BaselineConfigError(f"unknown init {init!r}")
    best = None
    for W0 in starts:
        W, history = _dca_ascent(S, W0, T, iters, lr, gamma, jitter)
        final = float(pi.predictive_information(
            projected_window_covariance(S, W, T, jitter)).values)
        if best is None or final > best[1]:
            best = (W, final, history)
    W, final_pi, history = best
    return LinearEncoder(W, mean, {"method": "sfa" if T == 1 else "dca", "T": T, "init": init,
                                   "pi": final_pi, "pi_history": history})


def sfa_baseline(data, d: int, **kwargs) -> LinearEncoder:
    return dca_baseline(data, d, T=1, **kwargs)


# ----------------------------------------------------------------------------
# CPC


@dataclass
class CPCConfig:
    k: int = 4
    n_negatives: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise BaselineConfigError(f"k must be >= 1, got {self.k}")
        if self.n_negatives < 1:
            raise BaselineConfigError("n_negatives must be >= 1")


def sample_negatives(n_total: int, positives: np.ndarray, n_negatives: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Uniform draws from ``range(n_total)`` that never hit the row's positive."""
    if n_total < 2:
        raise BaselineConfigError("batch too small to draw negatives")
    draws = rng.integers(0, n_total - 1, size=(len(positives), n_negatives))
    return draws + (draws >= positives[:, None])


def infonce_logits(Z, W, X: np.ndarray, k: int, n_negatives: int,
                   rng: np.random.Generator) -> tuple[ad.Tensor, np.ndarray]:
    """Bilinear scores ``z_t^T W^T x`` for the positive ``x_{t+k}`` and sampled negatives.

    Column 0 of the returned logits is the positive.
    """
    B, L, n = X.shape
    if k >= L:
        raise BaselineConfigError(f"k={k} is not shorter than the sequence length {L}")
    d = Z.shape[-1]
    if B * L < n_negatives + 1:
        raise BaselineConfigError(f"batch of {B * L} steps is too small for {n_negatives} negatives")
    anchors = ad.reshape(ad.index(Z, (slice(None), slice(0, L - k))), (B * (L - k), 1, d))
    b_idx, t_idx = np.meshgrid(np.arange(B), np.arange(L - k), indexing="ij")
    pos = (b_idx * L + t_idx + k).ravel()
    neg = sample_negatives(B * L, pos, n_negatives, rng)
    cand = _flat(X)[np.concatenate([pos[:, None], neg], axis=1)]   # (N, 1+K, n)
    proj = ad.matmul(cand, W)                                        # (N, 1+K, d)
    logits = ad.sum(ad.mul(proj, anchors), axis=2)
    return logits, np.zeros(len(pos), dtype=np.intp)


def cpc_step(cfg: CPCConfig):
    """A ``step_fn`` for :func:`train` computing the InfoNCE loss."""

    def step(batch, model: Model, weights, mask_spec, rng, train_mode: bool = True) -> StepResult:
        X = np.asarray(batch, dtype=float)
        Z = model.encode(X, train_mode, rng)
        logits, target = infonce_logits(Z, model.params["cpc.W"], X, cfg.k, cfg.n_negatives, rng)
        loss = ad.softmax_cross_entropy(logits, target)
        acc = float(np.mean(logits.values.argmax(axis=1) == 0))
        return StepResult(loss, {"infonce": float(loss.values), "accuracy": acc,
                                 "loss": float(loss.values)})

    return step


def cpc_model(encoder: EncoderSpec, seed: int) -> Model:
    """Encoder plus the bilinear score matrix (zero init, so initial scores are uniform)."""
    model = Model.create(encoder, None, seed)
    model.params.add("cpc.W", np.zeros((encoder.input_dim, encoder.latent_dim)))
    return model


def cpc_baseline(data, encoder: EncoderSpec, cpc: CPCConfig, cfg: TrainConfig):
    """Train an encoder with InfoNCE; returns ``(model, log)`` with best params loaded."""
    model = cpc_model(encoder, cfg.seed)
    weights = ObjectiveWeights.for_variant("pi_only")  # unused by the CPC step; kept for logging
    best, log = train(cfg, data, model, weights, step_fn=cpc_step(cpc))
    log.info["cpc"] = {"k": cpc.k, "n_negatives": cpc.n_negatives}
    model.params = best
    return model, log


__all__ = ["LinearEncoder", "pca_baseline", "dca_baseline", "sfa_baseline", "CPCConfig",
           "cpc_baseline", "cpc_step", "cpc_model", "infonce_logits", "sample_negatives",
           "BaselineConfigError", "ContractError", "DecoderSpec"]
