"""Run one configured method on one seed, and sweep grids of such runs."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import baselines
from .config import ExperimentConfig, set_dotted, from_dict
from .data import DatasetBundle, ingest_csv, load_bundle, make_ar_bundle, make_lorenz_bundle
from .encoders import (EncoderSpec, ParamStore, encoder_spec_from_dict, load_params,
                       save_params, spec_to_dict)
from .evaluation import align_and_score, forecast_protocol, improvement_over
from .train import VARIANTS, Model, train

logger = logging.getLogger(__name__)


@dataclass
class RunResult:
    method: str
    seed: int
    snr: float | None
    config_hash: str
    status: str = "ok"
    val_r2: float = float("nan")
    test_r2: float = float("nan")
    forecast: dict = field(default_factory=dict)
    seconds: float = 0.0
    error: str | None = None
    axes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# data


def build_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    d = cfg.data
    if d.path and (Path(d.path) / "metadata.json").exists():
        return load_bundle(d.path)
    if d.system == "lorenz":
        return make_lorenz_bundle(cfg.bundle_config())
    if d.system == "ar1":
        return make_ar_bundle(d.rho, d.segment_len, tuple(d.counts), d.seed)
    return ingest_csv(d.path, d.segment_len, tuple(d.counts))


class BundleCache:
    """Bundles keyed by their data section, so sweeps build each dataset once."""

    def __init__(self):
        self._store = {}

    def get(self, cfg: ExperimentConfig) -> DatasetBundle:
        key = json.dumps(cfg.to_dict()["data"], sort_keys=True)
        if key not in self._store:
            self._store[key] = build_bundle(cfg)
        return self._store[key]


# ----------------------------------------------------------------------------
# single run


def fit_method(cfg: ExperimentConfig, bundle: DatasetBundle, seed: int, out_dir=None,
               resume: bool = False):
    """Train or fit the configured method; returns ``(featurizer, info)``.

    ``featurizer`` has ``features(X)`` and a ``causal`` flag.  ``resume``
    continues an interrupted run from ``out_dir/checkpoint``.
    """
    method = cfg.objective.variant
    n = bundle.input_dim
    if method in ("pca", "dca", "sfa"):
        if method == "pca":
            enc = baselines.pca_baseline(bundle, cfg.model.latent_dim)
        else:
            T = 1 if method == "sfa" else cfg.objective.T
            enc = baselines.dca_baseline(bundle, cfg.model.latent_dim, T, iters=cfg.eval.dca_iters,
                                         gamma=cfg.objective.gamma, jitter=cfg.objective.jitter,
                                         seed=seed)
        model = linear_model(enc, seed)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            _save_model(model, cfg, seed, out_dir)
        return enc, {"method": method, "pi": enc.info.get("pi")}

    ckpt = None
    if out_dir is not None:
        ckpt = Path(out_dir) / "checkpoint"
        ckpt.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config(seed, ckpt)
    encoder = cfg.encoder_spec(n)
    if method == "cpc":
        model, log = baselines.cpc_baseline(
            bundle, encoder, baselines.CPCConfig(cfg.eval.cpc_k, cfg.eval.n_negatives), tcfg)
    else:
        model = Model.create(encoder, cfg.decoder_spec(n), seed)
        best, log = train(tcfg, bundle, model, cfg.weights(), resume=resume)
        model.params = best
    info = {"method": method, "log": log}
    if out_dir is not None:
        _save_model(model, cfg, seed, out_dir)
        log.to_csv(Path(out_dir) / "train_log.csv")
        (Path(out_dir) / "train_summary.json").write_text(
            json.dumps(_jsonable(log.summary()), indent=2, sort_keys=True))
    return ModelFeatures(model), info


def linear_model(enc: baselines.LinearEncoder, seed: int = 0) -> Model:
    """The same affine map as a ``linear`` encoder model (``b = -mean @ W``)."""
    n, d = enc.weight.shape
    params = ParamStore(seed=seed)
    params.add("enc.proj.W", enc.weight)
    params.add("enc.proj.b", -enc.mean @ enc.weight)
    return Model(EncoderSpec("linear", n, d), None, params)


def _save_model(model: Model, cfg: ExperimentConfig, seed: int, out_dir) -> None:
    extra = {"encoder": spec_to_dict(model.encoder), "config_hash": cfg.config_hash(),
             "seed": seed, "config": cfg.to_dict()}
    save_params(model.params, Path(out_dir) / "model.json", extra=extra)


def load_model(path) -> tuple[Model, dict]:
    params, extra = load_params(path)
    if "encoder" not in extra:
        raise ValueError(f"{path}: checkpoint carries no encoder spec")
    return Model(encoder_spec_from_dict(extra["encoder"]), None, params), extra


class ModelFeatures:
    def __init__(self, model: Model):
        self.model = model
        self.causal = model.encoder.causal

    def features(self, X):
        return self.model.features(X)

    __call__ = features


def recovery_scores(feat, bundle: DatasetBundle, readout_segments: int = 50) -> tuple[float, float]:
    """Validation R^2 (readout fit on train) and test R^2 (readout fit on valid)."""
    ztr = feat.features(bundle["train"]["x"][:readout_segments])
    zva = feat.features(bundle["valid"]["x"])
    zte = feat.features(bundle["test"]["x"])
    val = align_and_score(ztr, bundle["train"]["clean"][:readout_segments],
                          zva, bundle["valid"]["clean"]).aggregate
    test = align_and_score(zva, bundle["valid"]["clean"], zte, bundle["test"]["clean"]).aggregate
    return val, test


def forecast_scores(feat, bundle: DatasetBundle, lags, latent_dim: int) -> dict:
    reports = forecast_protocol(feat.features, bundle, lags, causal=feat.causal)
    pca = baselines.pca_baseline(bundle, min(latent_dim, bundle.input_dim))
    base = forecast_protocol(pca.features, bundle, lags)
    gain = improvement_over(reports, base)
    return {str(lag): {"r2": reports[lag].aggregate, "pca_r2": base[lag].aggregate,
                       "delta_r2": gain[lag]} for lag in lags}


def run_one(cfg: ExperimentConfig, seed: int, bundle: DatasetBundle | None = None,
            out_dir=None, axes: dict | None = None, resume: bool = False) -> RunResult:
    """Fit and score; exceptions propagate (``run_sweep`` records them per cell)."""
    bundle = bundle if bundle is not None else build_bundle(cfg)
    t0 = time.perf_counter()
    feat, _ = fit_method(cfg, bundle, seed, out_dir, resume)
    res = RunResult(cfg.objective.variant, seed, bundle.snr, cfg.config_hash(), axes=axes or {})
    if cfg.eval.task == "recover":
        res.val_r2, res.test_r2 = recovery_scores(feat, bundle, cfg.train.readout_segments)
    else:
        res.forecast = forecast_scores(feat, bundle, cfg.eval.lags, cfg.model.latent_dim)
    res.seconds = time.perf_counter() - t0
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "result.json").write_text(json.dumps(_jsonable(res.to_dict()), indent=2,
                                                              sort_keys=True))
    return res


# ----------------------------------------------------------------------------
# sweeps


def expand_grid(cfg: ExperimentConfig, axes: dict) -> list[tuple[dict, ExperimentConfig]]:
    """Cross product of ``{dotted.key: [values]}``, in sorted-key order."""
    keys = sorted(axes)
    out = []
    for combo in itertools.product(*(list(axes[k]) for k in keys)):
        d = cfg.to_dict()
        point = dict(zip(keys, combo))
        for k, v in point.items():
            set_dotted(d, k, v)
        out.append((point, from_dict(d)))
    return out


def run_sweep(cfg: ExperimentConfig, axes: dict, out_dir=None, cache: BundleCache | None = None,
              progress=None) -> list[RunResult]:
    """Every grid cell times every seed in ``cfg.seeds``; failures are recorded, not raised."""
    cache = cache or BundleCache()
    results = []
    for point, cell in expand_grid(cfg, axes):
        for seed in cell.seeds:
            run_dir = None
            if out_dir is not None:
                tag = "_".join(f"{k.split('.')[-1]}={v}" for k, v in point.items()) or "base"
                run_dir = Path(out_dir) / "runs" / f"{tag}_seed={seed}"
            try:
                res = run_one(cell, seed, cache.get(cell), run_dir, axes=point)
            except Exception as err:  # noqa: BLE001 - a failed cell must not stop the sweep
                logger.warning("cell %s seed %d failed: %s", point, seed, err)
                res = RunResult(cell.objective.variant, seed, cell.data.snr, cell.config_hash(),
                                status="failed", error=f"{type(err).__name__}: {err}", axes=point)
            results.append(res)
            if progress is not None:
                progress(res)
    if out_dir is not None:
        write_sweep_outputs(cfg, axes, results, out_dir)
    return results


def aggregate(results: list[RunResult]) -> list[dict]:
    """Mean and std of test R^2 over seeds per grid cell, sorted by cell key."""
    cells = {}
    for r in results:
        key = tuple(sorted((k, json.dumps(v)) for k, v in r.axes.items()))
        cells.setdefault(key, []).append(r)
    rows = []
    for key in sorted(cells):
        runs = cells[key]
        ok = [r.test_r2 for r in runs if r.status == "ok" and math.isfinite(r.test_r2)]
        rows.append({**{k: json.loads(v) for k, v in key},
                     "mean": float(np.mean(ok)) if ok else float("nan"),
                     "std": float(np.std(ok)) if ok else float("nan"),
                     "n_ok": len(ok), "n_failed": sum(r.status != "ok" for r in runs),
                     "seeds": [r.seed for r in runs]})
    return rows


def results_table(rows: list[dict], row_key: str = "objective.variant",
                  col_key: str = "data.snr") -> str:
    """Methods down, SNRs across, ``mean ± std`` cells (markdown)."""
    row_vals = sorted({r.get(row_key) for r in rows}, key=str)
    col_vals = sorted({r.get(col_key) for r in rows}, key=lambda v: (v is None, v))
    lookup = {(r.get(row_key), r.get(col_key)): r for r in rows}
    head = f"| {row_key} | " + " | ".join(f"{col_key}={c}" for c in col_vals) + " |"
    lines = [head, "|" + "---|" * (len(col_vals) + 1)]
    for rv in row_vals:
        cells = []
        for cv in col_vals:
            r = lookup.get((rv, cv))
            if r is None:
                cells.append("")
            elif r["n_ok"] == 0:
                cells.append("failed")
            else:
                cells.append(f"{r['mean']:.3f} ± {r['std']:.3f}")
        lines.append(f"| {rv} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


RESULT_FIELDS = ("method", "variant", "snr", "seed", "status", "val_r2", "test_r2",
                 "config_hash", "error")


def write_results_csv(results: list[RunResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in results:
            variant = r.axes.get("objective.variant", r.method)
            w.writerow([r.method, variant, r.snr, r.seed, r.status, repr(r.val_r2),
                        repr(r.test_r2), r.config_hash, r.error or ""])


def write_sweep_outputs(cfg: ExperimentConfig, axes: dict, results: list[RunResult], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = aggregate(results)
    write_results_csv(results, out / "results.csv")
    (out / "table.md").write_text(results_table(rows))
    manifest = {"config": cfg.to_dict(), "config_hash": cfg.config_hash(),
                "axes": {k: list(v) for k, v in sorted(axes.items())}, "seeds": list(cfg.seeds),
                "cells": rows, "runs": [r.to_dict() for r in results]}
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


__all__ = ["RunResult", "BundleCache", "build_bundle", "fit_method", "run_one", "run_sweep",
           "expand_grid", "aggregate", "results_table", "write_results_csv", "VARIANTS"]
