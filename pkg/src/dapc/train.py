"""DAPC objective, Adam and the training loop.

The objective for one batch is::

    loss = -(I_T + alpha * I_{T/2}) + beta * R_s + gamma * R_ortho

with ``Z = e(X * M)`` for a fresh mask ``M`` per sequence.  Ablations switch
terms off: ``pi_only`` drops reconstruction, ``mr_only`` drops the PI term,
``fr``/``fr_pi`` reconstruct every entry of unmasked inputs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import masking, pi
from .autodiff import ContractError, Tensor
from .encoders import (DecoderSpec, EncoderSpec, ParamStore, decode, encode, encode_numpy,
                       init_params, load_params, save_params)
from .evaluation import align_and_score

logger = logging.getLogger(__name__)

VARIANTS = ("dapc", "pi_only", "mr_only", "fr", "fr_pi")


class NonFiniteLossError(ArithmeticError):
    """Training hit a non-finite value; carries the last good state."""

    def __init__(self, component: str, step: int, params: ParamStore, log: "TrainLog"):
        self.component = component
        self.step = step
        self.params = params
        self.log = log
        super().__init__(f"non-finite {component} at step {step}")


@dataclass(frozen=True)
class ObjectiveWeights:
    T: int = 4
    alpha: float = 0.0
    beta: float = 0.1
    gamma: float = 0.1
    s: int = 0
    use_pi: bool = True
    use_mask: bool = True
    jitter: float = pi.DEFAULT_JITTER
    window_stride: int = 1

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma)
        if not all(math.isfinite(v) for v in vals):
            raise ContractError(f"objective weights must be finite: {self}")
        if self.beta < 0 or self.gamma < 0:
            raise ContractError("beta and gamma must be >= 0")
        if self.s < 0:
            raise ContractError("shift s must be >= 0")
        pi.PIConfig(self.T, self.alpha if self.use_pi else 0.0, self.jitter, self.window_stride)

    @property
    def needs_decoder(self) -> bool:
        return self.beta > 0

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ObjectiveWeights":
        """Weights for a named ablation, starting from the Lorenz optimum."""
        base = dict(T=4, alpha=0.0, beta=0.1, gamma=0.1, s=0)
        if variant == "dapc":
            flags = dict(use_pi=True, use_mask=True)
        elif variant == "pi_only":
            flags = dict(use_pi=True, use_mask=True)
            base["beta"] = 0.0
        elif variant == "mr_only":
            flags = dict(use_pi=False, use_mask=True)
        elif variant == "fr":
            flags = dict(use_pi=False, use_mask=False)
        elif variant == "fr_pi":
            flags = dict(use_pi=True, use_mask=False)
        else:
            raise ContractError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        base.update(flags)
        base.update(overrides)
        if variant == "pi_only":
            base["beta"] = 0.0
        return cls(**base)


@dataclass
class Model:
    encoder: EncoderSpec
    decoder: DecoderSpec | None
    params: ParamStore

    @classmethod
    def create(cls, encoder: EncoderSpec, decoder: DecoderSpec | None, seed: int) -> "Model":
        params = init_params(encoder, seed)
        if decoder is not None:
            params = params.merged(init_params(decoder, seed + 7919))
        params.seed = seed
        return cls(encoder, decoder, params)

    def encode(self, X, train_mode=False, rng=None) -> Tensor:
        return encode(self.encoder, self.params, X, train_mode, rng)

    def features(self, X: np.ndarray) -> np.ndarray:
        return encode_numpy(self.encoder, self.params, X)


@dataclass
class StepResult:
    loss: Tensor
    components: dict


def dapc_step(batch: np.ndarray, model: Model, weights: ObjectiveWeights,
              mask_spec: masking.MaskSpec, rng: np.random.Generator,
              train_mode: bool = True) -> StepResult:
    """Build the loss graph for one batch ``(n_seq, length, n)``.

    Returns the scalar loss and a float breakdown with keys ``I_T``,
    ``I_T2``, ``R_s``, ``R_ortho`` and ``loss``.
    """
    X = np.asarray(batch, dtype=float)
    if X.shape[1] < 2 * weights.T:
        raise ContractError(f"sequences of length {X.shape[1]} are shorter than 2T={2 * weights.T}")
    masked = weights.use_mask and not mask_spec.is_empty
    if masked:
        M = masking.sample_batch_masks(mask_spec, X.shape[0], X.shape[1], X.shape[2], rng)
        X_in = X * M
    else:
        M = None
        X_in = X
    Z = model.encode(X_in, train_mode, rng)
    cov = pi.estimate_window_covariance(Z, weights.T, weights.window_stride, weights.jitter)

    comps = {}
    i_t = pi.predictive_information(cov)
    comps["I_T"] = float(i_t.values)
    total = None
    if weights.use_pi:
        total = -i_t
        if weights.alpha:
            i_half = pi.multiscale_pi(cov, weights.alpha) - i_t
            comps["I_T2"] = float(i_half.values) / weights.alpha
            total = total - i_half
        else:
            comps["I_T2"] = 0.0
    else:
        comps["I_T2"] = 0.0

    if weights.needs_decoder:
        if model.decoder is None:
            raise ContractError("beta > 0 needs a decoder")
        recon = decode(model.decoder, model.params, Z)
        if masked:
            r_s = masking.shifted_masked_recon_loss(X, M, recon, weights.s)
        else:
            r_s = masking.full_recon_loss(X, recon, weights.s)
        comps["R_s"] = float(r_s.values)
        term = ad.scale(r_s, weights.beta)
        total = term if total is None else total + term
    else:
        comps["R_s"] = 0.0

    r_o = pi.ortho_penalty(cov)
    comps["R_ortho"] = float(r_o.values)
    if weights.gamma:
        term = ad.scale(r_o, weights.gamma)
        total = term if total is None else total + term
    if total is None:
        raise ContractError("objective has no active terms")
    comps["loss"] = float(total.values)
    return StepResult(total, comps)


# ----------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_update(params: ParamStore, grads: dict, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam step, in place on ``params``.

    ``grads`` maps parameter name (or Tensor) to gradient; missing entries
    count as zero.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.values)
        elif g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float, bool]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        return {k: g * factor for k, g in grads.items()}, norm, True
    return grads, norm, False


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 20
    n_epochs: int = 30
    seed: int = 0
    mask: masking.MaskSpec = masking.LORENZ_MASK
    eval_every: int = 1
    clip_norm: float = 5.0
    select_metric: str = "r2"   # "r2" (needs ground truth) or "loss"
    readout_segments: int = 50  # train segments used to fit the validation readout
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError("lr must be > 0")
        if self.batch_size < 1 or self.n_epochs < 0 or self.eval_every < 1:
            raise ContractError("batch_size, eval_every >= 1 and n_epochs >= 0 required")
        if self.select_metric not in ("r2", "loss"):
            raise ContractError(f"unknown select_metric {self.select_metric!r}")


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def fieldnames(self) -> list:
        names = []
        for rec in self.steps:
            names += [k for k in rec if k not in names]
        return names

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.fieldnames() or ["step"])
            w.writeheader()
            for rec in self.steps:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})

    def to_dict(self) -> dict:
        return {"steps": self.steps, "evals": self.evals, "info": self.info}

    @classmethod
    def from_dict(cls, d) -> "TrainLog":
        return cls(list(d["steps"]), list(d["evals"]), dict(d.get("info", {})))

    def summary(self) -> dict:
        best = max(self.evals, key=lambda e: e["score"]) if self.evals else None
        return {"n_steps": len(self.steps), "n_evals": len(self.evals), "best": best,
                "n_clipped": sum(1 for s in self.steps if s.get("clipped")), **self.info}


def validation_score(model: Model, data, weights: ObjectiveWeights, cfg: TrainConfig,
                     metric: str) -> float:
    """Higher is better: R^2 on the validation split, or minus the validation loss."""
    if metric == "r2":
        ztr = model.features(data["train"]["x"][:cfg.readout_segments])
        zva = model.features(data["valid"]["x"])
        return align_and_score(ztr, data["train"]["clean"][:cfg.readout_segments],
                               zva, data["valid"]["clean"]).aggregate
    rng = np.random.default_rng(cfg.seed + 104729)
    res = dapc_step(data["valid"]["x"], model, weights, cfg.mask, rng, train_mode=False)
    return -res.components["loss"]


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def train(cfg: TrainConfig, data, model: Model, weights: ObjectiveWeights,
          resume: bool = False, stop_after_epochs: int | None = None,
          step_fn=None) -> tuple[ParamStore, TrainLog]:
    """Train ``model`` in place; return the best-scoring parameters and the log.

    Batches group whole training segments, reshuffled each epoch with a
    seeded generator.  After every ``eval_every`` epochs the validation score
    is computed and the best parameters so far are kept.  With
    ``checkpoint_dir`` set, a resumable state is written after every epoch;
    ``resume=True`` continues from it.  ``stop_after_epochs`` simulates an
    interruption.  ``step_fn`` replaces :func:`dapc_step` (used by CPC).
    """
    step_fn = step_fn or dapc_step
    X = data["train"]["x"]
    n_seg = len(X)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    log = TrainLog(info={"variant_weights": asdict(weights), "seed": cfg.seed})
    best_params = model.params.copy()
    best_score = -math.inf
    start_epoch = 0
    step = 0
    ckpt = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if resume:
        if ckpt is None or not (ckpt / "resume.json").exists():
            raise ContractError("resume requested but no resumable checkpoint found")
        start_epoch, step, best_score, rng, state, log = _load_resume(ckpt, model, best_params)

    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.n_epochs):
        order = rng.permutation(n_seg)
        for i in range(0, n_seg, cfg.batch_size):
            batch = X[order[i:i + cfg.batch_size]]
            res = step_fn(batch, model, weights, cfg.mask, rng)
            bad = [k for k, v in res.components.items() if not math.isfinite(v)]
            if bad:
                raise NonFiniteLossError(bad[0], step, best_params, log)
            leaf_grads = ad.backward(res.loss)
            grads = {name: leaf_grads[p] for name, p in model.params.items() if p in leaf_grads}
            grads, norm, clipped = clip_by_global_norm(grads, cfg.clip_norm)
            if not math.isfinite(norm):
                raise NonFiniteLossError("gradient", step, best_params, log)
            if clipped:
                logger.debug("step %d: gradient norm %.3g clipped to %g", step, norm, cfg.clip_norm)
            adam_update(model.params, grads, state, cfg.lr)
            log.steps.append({"step": step, "epoch": epoch, **res.components,
                              "beta": weights.beta, "gamma": weights.gamma,
                              "grad_norm": norm, "clipped": int(clipped)})
            step += 1
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.n_epochs:
            score = validation_score(model, data, weights, cfg, cfg.select_metric)
            log.evals.append({"epoch": epoch, "step": step, "metric": cfg.select_metric,
                              "score": score})
            logger.info("epoch %d  loss %.4f  val %s %.4f", epoch,
                        log.steps[-1]["loss"], cfg.select_metric, score)
            if score > best_score:
                best_score = score
                best_params = model.params.copy()
        if ckpt is not None:
            _save_resume(ckpt, epoch + 1, step, best_score, rng, state, log, model, best_params)
        if stop_after_epochs is not None and epoch + 1 - start_epoch >= stop_after_epochs:
            break
    log.info["train_seconds"] = time.perf_counter() - t0
    log.info["best_score"] = best_score if math.isfinite(best_score) else None
    if ckpt is not None:
        save_params(best_params, ckpt / "best.json", extra={"score": best_score})
    return best_params, log


def _save_resume(ckpt: Path, epoch, step, best_score, rng, state: AdamState, log: TrainLog,
                 model: Model, best_params: ParamStore) -> None:
    ckpt.mkdir(parents=True, exist_ok=True)
    save_params(model.params, ckpt / "current.json")
    save_params(best_params, ckpt / "best.json", extra={"score": best_score})
    doc = {
        "epoch": epoch, "step": step, "best_score": best_score, "rng": _rng_state(rng),
        "adam": {"t": state.t, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
                 "m": {k: v.tolist() for k, v in state.m.items()},
                 "v": {k: v.tolist() for k, v in state.v.items()}},
        "log": log.to_dict(),
    }
    tmp = ckpt / "resume.json.tmp"
    tmp.write_text(json.dumps(doc))
    tmp.replace(ckpt / "resume.json")


def _load_resume(ckpt: Path, model: Model, best_params: ParamStore):
    doc = json.loads((ckpt / "resume.json").read_text())
    cur, _ = load_params(ckpt / "current.json")
    model.params.load_arrays(cur.arrays())
    best, _ = load_params(ckpt / "best.json")
    best_params.load_arrays(best.arrays())
    a = doc["adam"]
    state = AdamState({k: np.asarray(v) for k, v in a["m"].items()},
                      {k: np.asarray(v) for k, v in a["v"].items()},
                      a["t"], a["beta1"], a["beta2"], a["eps"])
    best_score = doc["best_score"] if doc["best_score"] is not None else -math.inf
    return (doc["epoch"], doc["step"], best_score, _rng_from_state(doc["rng"]), state,
            TrainLog.from_dict(doc["log"]))
