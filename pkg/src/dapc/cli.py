"""Command-line driver: ``dapc {gen,train,eval,sweep,plot}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (non-finite loss, singular covariance), 5 file-system error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import plotting
from .autodiff import ContractError, NotPositiveDefiniteError
from .baselines import BaselineConfigError
from .config import ConfigError, ExperimentConfig, from_dict, load_config, preset
from .data import DataError, IntegrationError, bundle_hash, load_bundle, save_bundle, write_csv
from .evaluation import LinearReadout, ProtocolError, r2_score
from .masking import MaskConfigError
from .pi import ConfigError as PIConfigError
from .runner import (BundleCache, ModelFeatures, aggregate, build_bundle, forecast_scores,
                     load_model, results_table, run_one, run_sweep)
from .train import NonFiniteLossError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

logger = logging.getLogger("dapc")


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------------------
# config assembly


def _base_config(args) -> ExperimentConfig:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise CLIError("use either --config or --preset, not both", EXIT_CONFIG)
    if getattr(args, "config", None):
        return load_config(args.config)
    if getattr(args, "preset", None):
        return preset(args.preset)
    return ExperimentConfig()


def _parse_value(text: str):
    return yaml.safe_load(text)


def _apply_sets(cfg: ExperimentConfig, sets) -> ExperimentConfig:
    overrides = {}
    for item in sets or ():
        if "=" not in item:
            raise CLIError(f"--set expects key=value, got {item!r}", EXIT_CONFIG)
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(value)
    return cfg.replace(**overrides)


FLAG_KEYS = {
    "variant": "objective.variant", "T": "objective.T", "alpha": "objective.alpha",
    "beta": "objective.beta", "gamma": "objective.gamma", "s": "objective.s",
    "epochs": "train.n_epochs", "lr": "train.lr", "batch_size": "train.batch_size",
    "hidden": "model.hidden_size", "layers": "model.n_layers", "encoder": "model.encoder",
    "snr": "data.snr", "data": "data.path", "k": "eval.cpc_k", "task": "eval.task",
}


def _config_from_args(args) -> ExperimentConfig:
    cfg = _apply_sets(_base_config(args), getattr(args, "set", None))
    flags = {FLAG_KEYS[k]: v for k, v in vars(args).items() if k in FLAG_KEYS and v is not None}
    if getattr(args, "seeds", None):
        flags["seeds"] = list(args.seeds)
    d = cfg.to_dict()
    if "seeds" in flags:
        d["seeds"] = flags.pop("seeds")
    # flags win over file values
    return from_dict(d).replace(**flags)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = _config_from_args(args)
    overrides = {"data.system": args.system, "data.rho": args.rho}
    if args.seed is not None:
        key = "data.seed" if (args.system or cfg.data.system) == "ar1" else "data.noise_seed"
        overrides[key] = args.seed
        if (args.system or cfg.data.system) == "lorenz":
            overrides["data.lorenz_seed"] = args.seed
    cfg = cfg.replace(**overrides)
    bundle = build_bundle(cfg)
    out = Path(args.out) if args.out else Path(f"bundle_{cfg.config_hash()}")
    bundle.metadata["config_hash"] = cfg.config_hash()
    save_bundle(bundle, out, args.format)
    summary = {"path": str(out), "hash": bundle_hash(out), "system": bundle.metadata.get("system"),
               "snr": bundle.metadata.get("snr"), "config_hash": cfg.config_hash(),
               "shapes": {s: list(bundle[s]["x"].shape) for s in ("train", "valid", "test")}}
    if "measured_snr" in bundle.metadata:
        summary["measured_snr"] = bundle.metadata["measured_snr"]
    _print_json(summary)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    _print_json({"config_hash": cfg.config_hash(), "seed": seed,
                 "objective": cfg.to_dict()["objective"], "train": cfg.to_dict()["train"]})
    bundle = build_bundle(cfg)
    res = run_one(cfg, seed, bundle, out, resume=args.resume)
    _print_json(res.to_dict())
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CLIError(f"checkpoint not found: {ckpt}", EXIT_IO)
    model, extra = load_model(ckpt)
    bundle = load_bundle(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"checkpoint": str(ckpt), "config_hash": extra.get("config_hash"),
              "seed": extra.get("seed"), "task": args.task,
              "bundle_seeds": {k: bundle.metadata.get(k) for k in
                               ("lorenz_seed", "lifting_seed", "noise_seed", "seed")}}
    if args.task == "recover":
        zva = model.features(bundle["valid"]["x"])
        zte = model.features(bundle["test"]["x"])
        readout = LinearReadout.fit(zva, bundle["valid"]["clean"])
        pred = readout.predict(zte)
        rep = r2_score(pred, bundle["test"]["clean"])
        report.update(rep.to_dict())
        k = pred.shape[-1]
        write_csv(out / "trajectory_test0.csv",
                  np.concatenate([pred[0], bundle["test"]["clean"][0]], axis=1),
                  header=[f"rec{i}" for i in range(k)] + [f"true{i}" for i in range(k)])
    else:
        lags = tuple(args.lags)
        report["forecast"] = forecast_scores(ModelFeatures(model), bundle, lags,
                                             model.encoder.latent_dim)
        with open(out / "forecast.csv", "w", newline="") as fh:
            fh.write("method,lag,r2,pca_r2,delta_r2\r\n")
            for lag, row in report["forecast"].items():
                fh.write(f"model,{lag},{row['r2']!r},{row['pca_r2']!r},{row['delta_r2']!r}\r\n")
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=str))
    _print_json(report)
    return EXIT_OK


def _parse_axis(text: str):
    if "=" not in text:
        raise CLIError(f"--axis expects key=v1,v2,..., got {text!r}", EXIT_CONFIG)
    key, values = text.split("=", 1)
    return key.strip(), [_parse_value(v) for v in values.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    axes = dict(_parse_axis(a) for a in args.axis or ())
    n_cells = 1
    for v in axes.values():
        n_cells *= len(v)
    print(f"sweep: {n_cells} cells x {len(cfg.seeds)} seeds = {n_cells * len(cfg.seeds)} runs",
          file=sys.stderr)

    def progress(r):
        print(f"  {r.axes} seed={r.seed} {r.status} test_r2={r.test_r2:.4f}", file=sys.stderr)

    results = run_sweep(cfg, axes, args.out, BundleCache(), progress=progress)
    print(results_table(aggregate(results)), end="")
    return EXIT_OK if all(r.status == "ok" for r in results) or args.allow_failures else EXIT_NUMERIC


def cmd_plot(args) -> int:
    out = Path(args.out)
    written = []
    for path in args.trajectory or ():
        arr = plotting.read_trajectory_csv(path)
        if arr.size and arr.shape[1] >= 6 and arr.shape[1] % 2 == 0:
            half = arr.shape[1] // 2
            series = {"recovered": arr[:, :half], "ground truth": arr[:, half:]}
        else:
            series = {Path(path).stem: arr if arr.size else np.zeros((0, 3))}
        svg = plotting.trajectory_svg(series)
        written.append(plotting.write_svg(svg, out / f"{Path(path).stem}.svg"))
    for path in args.report or ():
        labels, values = plotting.read_delta_csv(path, args.value_col)
        svg = plotting.bar_chart_svg(labels, values, title=args.title)
        written.append(plotting.write_svg(svg, out / f"{Path(path).stem}_bars.svg"))
    for w in written:
        print(w)
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing


def _add_config_args(p):
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--preset", help="named preset (lorenz-snr03, lorenz-snr10, lorenz-snr50, ar1-oracle)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. train.n_epochs=5 (repeatable)")


def _add_model_flags(p):
    p.add_argument("--variant", choices=("dapc", "pi_only", "mr_only", "fr", "fr_pi",
                                         "cpc", "dca", "sfa", "pca"))
    p.add_argument("--T", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--s", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--encoder", choices=("linear", "mlp", "gru_uni", "gru_bi"))
    p.add_argument("--snr", type=float)
    p.add_argument("--data", help="existing bundle directory")
    p.add_argument("--k", type=int, help="CPC lag")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dapc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset bundle")
    _add_config_args(p)
    p.add_argument("--system", choices=("lorenz", "ar1"))
    p.add_argument("--snr", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("raw", "csv"), default="raw")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one method on one seed")
    _add_config_args(p)
    _add_model_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a bundle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--task", choices=("recover", "forecast"), default="recover")
    p.add_argument("--lags", type=int, nargs="+", default=[5, 10, 15])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a grid of configs over seeds")
    _add_config_args(p)
    _add_model_flags(p)
    p.add_argument("--axis", action="append", metavar="KEY=V1,V2",
                   help="grid axis over a config key (repeatable)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out")
    p.add_argument("--allow-failures", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="emit SVG plots from CSV files")
    p.add_argument("--trajectory", action="append", help="trajectory CSV (header row)")
    p.add_argument("--report", action="append", help="report CSV with a delta_r2 column")
    p.add_argument("--value-col", default="delta_r2")
    p.add_argument("--title", default="delta R^2 vs PCA")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except (ConfigError, PIConfigError, MaskConfigError, BaselineConfigError, ContractError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ProtocolError, plotting.PlotError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, IntegrationError, NotPositiveDefiniteError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
