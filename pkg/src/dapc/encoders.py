"""Encoder and decoder families.

Encoders map ``(batch, length, n)`` inputs to ``(batch, length, d)`` latents:
``linear`` and ``mlp`` act per step, ``gru_uni`` is causal and ``gru_bi`` runs
a forward and a time-reversed GRU per layer and concatenates them.  Every
encoder ends in a linear projection to ``d`` with no activation.  The decoder
is a per-step MLP.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

try:
    from . import _gru_kernels as _kernels
except ImportError:  # pragma: no cover
    _kernels = None

# Backward recurrence: compiled when numba is available, else the numpy loop.
GRU_BACKEND = "numba" if _kernels is not None else "numpy"

ENCODER_KINDS = ("linear", "mlp", "gru_uni", "gru_bi")
ACTIVATIONS = {"elu": ad.elu, "tanh": ad.tanh, "relu": ad.relu, "sigmoid": ad.sigmoid}
CHECKPOINT_FORMAT = "dapc-params"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    kind: str
    input_dim: int
    latent_dim: int
    hidden_size: int = 64
    n_layers: int = 1
    dropout: float = 0.0
    activation: str = "elu"
    init: str = "uniform"

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ContractError(f"unknown encoder kind {self.kind!r}")
        if min(self.input_dim, self.latent_dim, self.hidden_size, self.n_layers) < 1:
            raise ContractError(f"encoder dims must be >= 1: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.init == "identity" and (self.kind != "linear" or self.input_dim != self.latent_dim):
            raise ContractError("identity init needs a square linear encoder")

    @property
    def causal(self) -> bool:
        return self.kind in ("linear", "mlp", "gru_uni")


@dataclass(frozen=True)
class DecoderSpec:
    latent_dim: int
    output_dim: int
    hidden_sizes: tuple = (128,)
    activation: str = "elu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


class ParamStore(OrderedDict):
    """Ordered ``name -> Tensor`` map of trainable parameters."""

    def __init__(self, *args, seed: int | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.seed = seed

    def add(self, name: str, values) -> Tensor:
        if name in self:
            raise ContractError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(values, dtype=float), requires_grad=True, name=name)
        self[name] = t
        return t

    def merged(self, other: "ParamStore") -> "ParamStore":
        out = ParamStore(seed=self.seed)
        for name, t in list(self.items()) + list(other.items()):
            out.add(name, t.values.copy())
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore(seed=self.seed)
        for name, t in self.items():
            out.add(name, t.values.copy())
        return out

    def arrays(self) -> dict:
        return {name: t.values for name, t in self.items()}

    def load_arrays(self, arrays: dict) -> None:
        for name, t in self.items():
            new = np.asarray(arrays[name], dtype=float)
            if new.shape != t.shape:
                raise ContractError(f"{name}: shape {new.shape} != {t.shape}")
            t.values = new.copy()

    def n_params(self) -> int:
        return int(sum(t.values.size for t in self.values()))


def save_params(params: ParamStore, path, extra: dict | None = None) -> None:
    """Write a versioned JSON checkpoint: name -> shape + row-major values."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": params.seed,
        "params": {name: {"shape": list(t.shape), "values": t.values.ravel().tolist()}
                   for name, t in params.items()},
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> tuple[ParamStore, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = ParamStore(seed=doc.get("seed"))
    for name, entry in doc["params"].items():
        params.add(name, np.asarray(entry["values"], dtype=float).reshape(entry["shape"]))
    return params, doc.get("extra", {})


# ----------------------------------------------------------------------------
# initialization


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)  # variance 1 / fan_in
    return rng.uniform(-bound, bound, size=shape)


def _add_dense(params: ParamStore, rng, name: str, n_in: int, n_out: int) -> None:
    params.add(f"{name}.W", _uniform(rng, n_in, (n_in, n_out)))
    params.add(f"{name}.b", np.zeros(n_out))


def _add_gru(params: ParamStore, rng, name: str, n_in: int, hidden: int) -> None:
    params.add(f"{name}.W_ih", _uniform(rng, n_in, (n_in, 3 * hidden)))
    params.add(f"{name}.W_hh", _uniform(rng, hidden, (hidden, 3 * hidden)))
    params.add(f"{name}.b_ih", np.zeros(3 * hidden))
    params.add(f"{name}.b_hh", np.zeros(3 * hidden))


def init_params(spec, seed: int, prefix: str | None = None) -> ParamStore:
    """Deterministic fan-in-scaled uniform init for an encoder or decoder spec."""
    rng = np.random.default_rng(seed)
    params = ParamStore(seed=seed)
    if isinstance(spec, DecoderSpec):
        prefix = prefix or "dec"
        sizes = [spec.latent_dim, *spec.hidden_sizes, spec.output_dim]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            _add_dense(params, rng, f"{prefix}.fc{i}", a, b)
        return params

    prefix = prefix or "enc"
    n, d, h = spec.input_dim, spec.latent_dim, spec.hidden_size
    if spec.kind == "linear":
        if spec.init == "identity":
            params.add(f"{prefix}.proj.W", np.eye(n))
            params.add(f"{prefix}.proj.b", np.zeros(d))
        else:
            _add_dense(params, rng, f"{prefix}.proj", n, d)
    elif spec.kind == "mlp":
        sizes = [n] + [h] * spec.n_layers
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            _add_dense(params, rng, f"{prefix}.fc{i}", a, b)
        _add_dense(params, rng, f"{prefix}.proj", h, d)
    else:
        dirs = ("fwd", "bwd") if spec.kind == "gru_bi" else ("fwd",)
        n_in = n
        for layer in range(spec.n_layers):
            for dname in dirs:
                _add_gru(params, rng, f"{prefix}.gru{layer}.{dname}", n_in, h)
            n_in = h * len(dirs)
        _add_dense(params, rng, f"{prefix}.proj", n_in, d)
    return params


# ----------------------------------------------------------------------------
# GRU as one traced op with hand-written BPTT


def _resolve_backend(backend):
    backend = backend or GRU_BACKEND
    if backend not in ("numpy", "numba"):
        raise ValueError(f"unknown GRU backend {backend!r}")
    if backend == "numba" and _kernels is None:
        raise ImportError("numba is not installed")
    return backend


def gru_forward_arrays(x, W_ih, W_hh, b_ih, b_hh, reverse=False):
    """Run a GRU over ``x`` (batch, length, n_in); returns outputs and a cache.

    The per-step work is done in place on preallocated buffers; the sigmoid
    is evaluated as ``(1 + tanh(a / 2)) / 2``, which stays finite for any
    input.
    """
    b, length, _ = x.shape
    H = W_hh.shape[0]
    xp = x @ W_ih + b_ih
    out = np.empty((b, length, H))
    gates = np.empty((b, length, 2 * H))   # reset, update
    cand = np.empty((b, length, H))
    hn = np.empty((b, length, H))          # recurrent part of the candidate pre-activation
    h_prev_all = np.empty((b, length, H))
    h = np.zeros((b, H))
    hp = np.empty((b, 3 * H))
    ru = np.empty((b, 2 * H))
    n = np.empty((b, H))
    steps = range(length - 1, -1, -1) if reverse else range(length)
    for t in steps:
        np.matmul(h, W_hh, out=hp)
        hp += b_hh
        np.add(xp[:, t, :2 * H], hp[:, :2 * H], out=ru)
        ru *= 0.5
        np.tanh(ru, out=ru)
        ru *= 0.5
        ru += 0.5
        np.multiply(ru[:, :H], hp[:, 2 * H:], out=n)
        n += xp[:, t, 2 * H:]
        np.tanh(n, out=n)
        h_prev_all[:, t] = h
        h = h - n
        h *= ru[:, H:]
        h += n
        out[:, t] = h
        gates[:, t] = ru
        cand[:, t] = n
        hn[:, t] = hp[:, 2 * H:]
    return out, (xp, gates, cand, hn, h_prev_all)


def gru_backward_arrays(g_out, x, W_ih, W_hh, cache, reverse=False, backend=None):
    _, gates, cand, hn, h_prev_all = cache
    b, length, _ = x.shape
    H = W_hh.shape[0]
    W_hh_T = W_hh.T
    dxp = np.empty((b, length, 3 * H))
    dhp = np.empty((b, length, 3 * H))
    if _resolve_backend(backend) == "numba":
        _kernels.gru_backward_kernel(np.ascontiguousarray(g_out), np.ascontiguousarray(W_hh_T),
                                     bool(reverse), gates, cand, hn, h_prev_all, dxp, dhp)
        steps = ()
    else:
        steps = range(length) if reverse else range(length - 1, -1, -1)
    dh_next = np.zeros((b, H))
    for t in steps:
        dh = g_out[:, t] + dh_next
        r = gates[:, t, :H]
        u = gates[:, t, H:]
        n = cand[:, t]
        du = dh * (h_prev_all[:, t] - n)
        dn_pre = dh * (1.0 - u) * (1.0 - n * n)
        dr_pre = dn_pre * hn[:, t] * r * (1.0 - r)
        du_pre = du * u * (1.0 - u)
        dxp[:, t, :H] = dr_pre
        dxp[:, t, H:2 * H] = du_pre
        dxp[:, t, 2 * H:] = dn_pre
        dhp[:, t, :2 * H] = dxp[:, t, :2 * H]
        dhp[:, t, 2 * H:] = dn_pre * r
        dh_next = dh * u + dhp[:, t] @ W_hh_T
    n_in = x.shape[-1]
    dW_ih = x.reshape(-1, n_in).T @ dxp.reshape(-1, 3 * H)
    db_ih = dxp.sum(axis=(0, 1))
    dW_hh = h_prev_all.reshape(-1, H).T @ dhp.reshape(-1, 3 * H)
    db_hh = dhp.sum(axis=(0, 1))
    dx = dxp @ W_ih.T
    return dx, dW_ih, dW_hh, db_ih, db_hh


def gru(x, W_ih, W_hh, b_ih, b_hh, reverse: bool = False) -> Tensor:
    """Standard GRU (reset/update gates, tanh candidate), zero initial state.

    ``reverse`` runs from the last step to the first; outputs stay aligned
    with input time.  Gate column order in the weights is reset, update,
    candidate.
    """
    x, W_ih, W_hh, b_ih, b_hh = map(ad.as_tensor, (x, W_ih, W_hh, b_ih, b_hh))
    if x.ndim != 3 or x.shape[-1] != W_ih.shape[0]:
        raise ad.DimensionError(f"gru input {x.shape} vs W_ih {W_ih.shape}")
    out, cache = gru_forward_arrays(x.values, W_ih.values, W_hh.values,
                                    b_ih.values, b_hh.values, reverse)

    def back(g):
        return gru_backward_arrays(g, x.values, W_ih.values, W_hh.values, cache, reverse)

    return ad.record(out, (x, W_ih, W_hh, b_ih, b_hh), back, "gru")


# ----------------------------------------------------------------------------
# forward passes


def _dense(params, name, x):
    return x @ params[f"{name}.W"] + params[f"{name}.b"]


def _dropout(h: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
    return h * keep


def encode(spec: EncoderSpec, params: ParamStore, X, train_mode: bool = False,
           rng: np.random.Generator | None = None, prefix: str = "enc") -> Tensor:
    """Latent sequences ``(batch, length, d)`` for inputs ``(batch, length, n)``."""
    X = ad.as_tensor(X)
    squeeze = X.ndim == 2
    if squeeze:
        X = ad.reshape(X, (1,) + X.shape)
    if X.ndim != 3 or X.shape[-1] != spec.input_dim:
        raise ContractError(f"input shape {X.shape} does not match input_dim={spec.input_dim}")
    use_dropout = train_mode and spec.dropout > 0
    if use_dropout and rng is None:
        raise ContractError("dropout in train mode needs an rng")
    act = ACTIVATIONS[spec.activation]

    if spec.kind == "linear":
        h = X
    elif spec.kind == "mlp":
        h = X
        for i in range(spec.n_layers):
            h = act(_dense(params, f"{prefix}.fc{i}", h))
            if use_dropout and i < spec.n_layers - 1:
                h = _dropout(h, spec.dropout, rng)
    else:
        h = X
        for layer in range(spec.n_layers):
            name = f"{prefix}.gru{layer}"
            outs = [gru(h, *(params[f"{name}.fwd.{k}"] for k in ("W_ih", "W_hh", "b_ih", "b_hh")))]
            if spec.kind == "gru_bi":
                outs.append(gru(h, *(params[f"{name}.bwd.{k}"]
                                     for k in ("W_ih", "W_hh", "b_ih", "b_hh")), reverse=True))
            h = outs[0] if len(outs) == 1 else ad.concat(-1, outs)
            if use_dropout and layer < spec.n_layers - 1:
                h = _dropout(h, spec.dropout, rng)
    Z = _dense(params, f"{prefix}.proj", h)
    return ad.reshape(Z, Z.shape[1:]) if squeeze else Z


def decode(spec: DecoderSpec, params: ParamStore, Z, prefix: str = "dec") -> Tensor:
    """Per-step MLP; no mixing across time."""
    Z = ad.as_tensor(Z)
    if Z.shape[-1] != spec.latent_dim:
        raise ContractError(f"latent shape {Z.shape} does not match latent_dim={spec.latent_dim}")
    act = ACTIVATIONS[spec.activation]
    h = Z
    n_layers = len(spec.hidden_sizes) + 1
    for i in range(n_layers):
        h = _dense(params, f"{prefix}.fc{i}", h)
        if i < n_layers - 1:
            h = act(h)
    return h


def encode_numpy(spec: EncoderSpec, params: ParamStore, X: np.ndarray, prefix: str = "enc",
                 chunk: int = 64) -> np.ndarray:
    """Frozen-parameter inference on a plain array (no graph, eval mode)."""
    frozen = ParamStore({k: Tensor(v.values) for k, v in params.items()})
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        return encode(spec, frozen, X[None], prefix=prefix).values[0]
    parts = [encode(spec, frozen, X[i:i + chunk], prefix=prefix).values
             for i in range(0, len(X), chunk)]
    return np.concatenate(parts, axis=0)


def spec_to_dict(spec) -> dict:
    return asdict(spec)


def encoder_spec_from_dict(d: dict) -> EncoderSpec:
    return EncoderSpec(**d)


def decoder_spec_from_dict(d: dict) -> DecoderSpec:
    return DecoderSpec(**d)
