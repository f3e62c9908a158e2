"""R^2 scoring, linear alignment and the forecasting-with-linear-regression protocol."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

RIDGE_EPS = 1e-8


class ProtocolError(ValueError):
    pass


@dataclass
class LinearReadout:
    """Affine map fit by (ridge-stabilized) least squares."""

    weight: np.ndarray
    bias: np.ndarray
    train_r2: float = float("nan")
    ridge: float = RIDGE_EPS

    @classmethod
    def fit(cls, features: np.ndarray, targets: np.ndarray, ridge: float = RIDGE_EPS) -> "LinearReadout":
        F = _flat(features)
        Y = _flat(targets)
        if len(F) != len(Y):
            raise ProtocolError(f"feature/target sample counts differ: {len(F)} vs {len(Y)}")
        fm, ym = F.mean(axis=0), Y.mean(axis=0)
        Fc, Yc = F - fm, Y - ym
        gram = Fc.T @ Fc
        gram[np.diag_indices_from(gram)] += ridge * max(1.0, np.trace(gram) / len(gram))
        W = np.linalg.solve(gram, Fc.T @ Yc)
        out = cls(W, ym - fm @ W, ridge=ridge)
        out.train_r2 = r2_score(out.predict(F), Y).aggregate
        return out

    def predict(self, features: np.ndarray) -> np.ndarray:
        F = np.asarray(features, dtype=float)
        return F @ self.weight + self.bias


@dataclass
class R2Report:
    per_dim: np.ndarray
    aggregate: float
    n_samples: int
    lag: int | None = None
    excluded: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"aggregate": self.aggregate, "per_dim": [float(v) for v in self.per_dim],
                "n_samples": self.n_samples, "lag": self.lag, "excluded": self.excluded}


def _flat(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return a[:, None]
    return a.reshape(-1, a.shape[-1])


def r2_score(pred, target) -> R2Report:
    """``1 - SS_res / SS_tot`` per dimension plus the variance-weighted aggregate.

    Target dimensions with zero variance are excluded (and listed).
    """
    P, Y = _flat(pred), _flat(target)
    if P.shape != Y.shape:
        raise ProtocolError(f"prediction shape {P.shape} != target shape {Y.shape}")
    ss_res = ((Y - P) ** 2).sum(axis=0)
    ss_tot = ((Y - Y.mean(axis=0)) ** 2).sum(axis=0)
    ok = ss_tot > 0
    excluded = [int(i) for i in np.flatnonzero(~ok)]
    if excluded:
        warnings.warn(f"zero-variance target dims {excluded} excluded from R^2",
                      RuntimeWarning, stacklevel=2)
    per_dim = np.full(Y.shape[1], np.nan)
    per_dim[ok] = 1.0 - ss_res[ok] / ss_tot[ok]
    aggregate = float(1.0 - ss_res[ok].sum() / ss_tot[ok].sum()) if ok.any() else float("nan")
    return R2Report(per_dim, aggregate, len(Y), excluded=excluded)


def align_and_score(Z_fit, G_fit, Z_eval=None, G_eval=None, ridge: float = RIDGE_EPS) -> R2Report:
    """Fit a linear readout latent -> ground truth on one split, score on another.

    With only ``(Z_fit, G_fit)`` given the fit data is also scored.
    """
    readout = LinearReadout.fit(Z_fit, G_fit, ridge)
    if Z_eval is None:
        Z_eval, G_eval = Z_fit, G_fit
    Ze, Ge = _flat(Z_eval), _flat(G_eval)
    if len(Ze) != len(Ge):
        raise ProtocolError("latent and ground-truth lengths differ")
    return r2_score(readout.predict(Ze), Ge)


def lagged_pairs(Z: np.ndarray, Y: np.ndarray, lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Pairs ``(z_i, y_{i+lag})`` within each sequence, flattened over sequences."""
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Z.ndim == 2:
        Z, Y = Z[None], Y[None]
    length = Z.shape[1]
    if lag < 1:
        raise ProtocolError(f"lag must be >= 1, got {lag}")
    if lag >= length:
        raise ProtocolError(f"lag {lag} is not shorter than the sequence length {length}")
    return _flat(Z[:, :length - lag]), _flat(Y[:, lag:])


def forecast_protocol(features, data, lags=(5, 10, 15), target_kind: str = "clean",
                      causal: bool = True, ridge: float = RIDGE_EPS) -> dict:
    """Forecast ``y_{i+lag}`` from frozen features ``z_i``; fit on train, score on test.

    Parameters
    ----------
    features : callable or dict
        Either a function mapping an input array ``(n_seq, length, n)`` to
        features ``(n_seq, length, d)``, or a precomputed ``{split: array}``.
    data : DatasetBundle or dict
        Provides ``data[split]["x"]`` and ``data[split][target_kind]``.
    causal : bool
        Must be True; bidirectional feature extractors leak the future.
    """
    if not causal:
        raise ProtocolError("forecasting needs a causal (uni-directional) encoder; "
                            "a bidirectional encoder leaks future inputs into z_i")
    feats = {}
    for split in ("train", "test"):
        if callable(features):
            feats[split] = features(data[split]["x"])
        else:
            feats[split] = features[split]
    reports = {}
    for lag in lags:
        Ztr, Ytr = lagged_pairs(feats["train"], data["train"][target_kind], lag)
        Zte, Yte = lagged_pairs(feats["test"], data["test"][target_kind], lag)
        readout = LinearReadout.fit(Ztr, Ytr, ridge)
        rep = r2_score(readout.predict(Zte), Yte)
        rep.lag = lag
        reports[lag] = rep
    return reports


def leakage_probe(encode_fn, X: np.ndarray, t0: int, rng: np.random.Generator | None = None) -> bool:
    """True iff features before ``t0`` are bitwise unchanged when inputs from ``t0`` on change."""
    rng = rng or np.random.default_rng(0)
    X = np.asarray(X, dtype=float)
    base = encode_fn(X)
    Xp = X.copy()
    Xp[:, t0:] += rng.normal(size=Xp[:, t0:].shape)
    pert = encode_fn(Xp)
    return bool(np.array_equal(base[:, :t0], pert[:, :t0]))


def improvement_over(reports: dict, baseline: dict) -> dict:
    """``R^2(method) - R^2(baseline)`` per lag."""
    return {lag: reports[lag].aggregate - baseline[lag].aggregate for lag in reports}
