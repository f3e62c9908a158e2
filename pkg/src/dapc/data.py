"""Synthetic benchmarks: noisy lifted Lorenz attractor and AR/VAR oracles.

Bundles live on disk as a directory holding ``metadata.json`` plus arrays,
either raw little-endian float64 (``{split}_{kind}.f64``) or CSV, one file per
segment (``{split}/{kind}_{index:04d}.csv``, column = dimension, row = step).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .autodiff import _elu

BUNDLE_FORMAT_VERSION = 1
SPLITS = ("train", "valid", "test")
ARRAY_KINDS = ("x", "clean", "lifted")


class DataError(ValueError):
    pass


class IntegrationError(ArithmeticError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"integration produced non-finite state at step {step}")


@dataclass(frozen=True)
class LorenzConfig:
    sigma: float = 10.0
    beta: float = 8.0 / 3.0
    rho: float = 28.0
    dt: float = 5e-3
    n_steps: int = 150_000
    initial_state: tuple = (1.0, 1.0, 1.0)
    burn_in: int = 10_000
    # when set, the initial state is jittered by U(-1, 1) per coordinate
    seed: int | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise DataError("dt must be > 0")
        if self.burn_in < 0 or self.n_steps < 0:
            raise DataError("n_steps and burn_in must be >= 0")


def lorenz_rhs(state, sigma=10.0, beta=8.0 / 3.0, rho=28.0):
    x, y, z = state
    return np.array([sigma * (y - x), x * (rho - z) - y, x * y - beta * z])


def _rk4(x, y, z, n, dt, s, b, r, out, start):
    # scalar arithmetic; several times faster than numpy on 3-vectors
    h2 = 0.5 * dt
    h6 = dt / 6.0
    for i in range(n):
        k1x = s * (y - x); k1y = x * (r - z) - y; k1z = x * y - b * z
        ax = x + h2 * k1x; ay = y + h2 * k1y; az = z + h2 * k1z
        k2x = s * (ay - ax); k2y = ax * (r - az) - ay; k2z = ax * ay - b * az
        ax = x + h2 * k2x; ay = y + h2 * k2y; az = z + h2 * k2z
        k3x = s * (ay - ax); k3y = ax * (r - az) - ay; k3z = ax * ay - b * az
        ax = x + dt * k3x; ay = y + dt * k3y; az = z + dt * k3z
        k4x = s * (ay - ax); k4y = ax * (r - az) - ay; k4z = ax * ay - b * az
        x += h6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        y += h6 * (k1y + 2 * k2y + 2 * k3y + k4y)
        z += h6 * (k1z + 2 * k2z + 2 * k3z + k4z)
        if out is not None:
            out[i, 0] = x; out[i, 1] = y; out[i, 2] = z
        if not (abs(x) < 1e12 and abs(y) < 1e12 and abs(z) < 1e12):
            raise IntegrationError(start + i)
    return x, y, z


def generate_lorenz(cfg: LorenzConfig = LorenzConfig()) -> np.ndarray:
    """Fixed-step RK4 trajectory of shape ``(n_steps, 3)`` after burn-in."""
    x0 = np.asarray(cfg.initial_state, dtype=float)
    if cfg.seed is not None:
        x0 = x0 + np.random.default_rng(cfg.seed).uniform(-1, 1, 3)
    x, y, z = (float(v) for v in x0)
    x, y, z = _rk4(x, y, z, cfg.burn_in, cfg.dt, cfg.sigma, cfg.beta, cfg.rho, None, 0)
    out = np.empty((cfg.n_steps, 3))
    _rk4(x, y, z, cfg.n_steps, cfg.dt, cfg.sigma, cfg.beta, cfg.rho, out, cfg.burn_in)
    return out


# ----------------------------------------------------------------------------
# lifting


@dataclass
class LiftingNet:
    """Frozen random elu MLP, 3 -> 128 -> 128 -> 30 by default.

    Weights and biases are drawn from a zero-mean normal whose second
    parameter is read as a variance (``scale_is="variance"``) or as a
    standard deviation (``"std"``).
    """

    weights: list
    biases: list
    seed: int
    scale: float = 0.2
    scale_is: str = "variance"

    @classmethod
    def create(cls, seed: int, sizes=(3, 128, 128, 30), scale: float = 0.2,
               scale_is: str = "variance") -> "LiftingNet":
        if scale_is not in ("variance", "std"):
            raise DataError(f"scale_is must be 'variance' or 'std', got {scale_is!r}")
        std = math.sqrt(scale) if scale_is == "variance" else scale
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, std, (a, b)))
            biases.append(rng.normal(0.0, std, b))
        for w in weights + biases:
            w.setflags(write=False)
        return cls(weights, biases, seed, scale, scale_is)

    @classmethod
    def zeros(cls, sizes=(3, 128, 128, 30)) -> "LiftingNet":
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]], seed=-1, scale=0.0)

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


def lift(traj: np.ndarray, net: LiftingNet) -> np.ndarray:
    """Pointwise application: elu on every hidden layer, linear output."""
    h = np.asarray(traj, dtype=float)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = _elu(h)
    return h


def signal_power(x: np.ndarray) -> float:
    """Mean squared deviation from the per-dimension mean, over all entries."""
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1, x.shape[-1])
    return float(np.mean((flat - flat.mean(axis=0)) ** 2))


def corrupt_snr(lifted: np.ndarray, snr: float, seed: int) -> np.ndarray:
    """Add white Gaussian noise so that total signal power / noise power = ``snr``."""
    if not snr > 0:
        raise DataError(f"snr must be > 0, got {snr}")
    std = math.sqrt(signal_power(lifted) / snr) if math.isfinite(snr) else 0.0
    noise = np.random.default_rng(seed).normal(0.0, 1.0, np.shape(lifted))
    return lifted + std * noise


# ----------------------------------------------------------------------------
# AR oracles


def generate_ar(coeffs, noise_std: float, length: int, seed: int,
                burn_in: int = 1000) -> np.ndarray:
    """Stationary sample of a VAR(1) ``x_t = A x_{t-1} + noise``.

    ``coeffs`` may be a scalar (scalar AR(1), returns shape ``(length,)``) or
    a square matrix.
    """
    A = np.atleast_2d(np.asarray(coeffs, dtype=float))
    scalar = np.ndim(coeffs) == 0
    if A.shape[0] != A.shape[1]:
        raise DataError(f"coefficient matrix must be square, got {A.shape}")
    radius = max(abs(np.linalg.eigvals(A))) if A.size else 0.0
    if radius >= 1:
        raise DataError(f"unstable AR coefficients (spectral radius {radius:.4f} >= 1)")
    k = A.shape[0]
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, noise_std, (length + burn_in, k))
    out = np.empty_like(eps)
    if k == 1:
        a = float(A[0, 0])
        out[:, 0] = lfilter([1.0], [1.0, -a], eps[:, 0])
    else:
        x = np.zeros(k)
        At = A.T
        for t in range(len(eps)):
            x = x @ At + eps[t]
            out[t] = x
    out = out[burn_in:]
    return out[:, 0] if scalar else out


def unit_ar1(rho: float, length: int, seed: int) -> np.ndarray:
    """Scalar AR(1) scaled to unit stationary variance."""
    return generate_ar(rho, math.sqrt(1 - rho * rho), length, seed)


# ----------------------------------------------------------------------------
# bundles


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        flat = x.reshape(-1, x.shape[-1])
        std = flat.std(axis=0)
        std[std == 0] = 1.0
        return cls(flat.mean(axis=0), std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass
class DatasetBundle:
    """Aligned segment arrays per split.

    ``x`` is the model input (noisy, standardized with train statistics);
    ``clean`` is the low-dimensional ground truth (standardized likewise);
    ``lifted`` is the noise-free high-dimensional signal, when available.
    Each array has shape ``(n_segments, segment_len, dim)``.
    """

    splits: dict
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, split: str) -> dict:
        return self.splits[split]

    @property
    def segment_len(self) -> int:
        return int(self.metadata["segment_len"])

    @property
    def input_dim(self) -> int:
        return int(self.splits["train"]["x"].shape[-1])

    @property
    def snr(self):
        return self.metadata.get("snr")


def chunk_and_split(traj: np.ndarray, segment_len: int = 500, counts=(250, 25, 25)) -> dict:
    """Contiguous non-overlapping segments assigned to splits in temporal order."""
    traj = np.asarray(traj, dtype=float)
    if traj.ndim == 1:
        traj = traj[:, None]
    need = segment_len * sum(counts)
    if len(traj) < need:
        raise DataError(f"trajectory of {len(traj)} steps is too short for "
                        f"{sum(counts)} segments of {segment_len}")
    segs = traj[:need].reshape(sum(counts), segment_len, traj.shape[-1])
    bounds = np.cumsum((0,) + tuple(counts))
    return {name: segs[bounds[i]:bounds[i + 1]] for i, name in enumerate(SPLITS)}


def split_indices(segment_len: int, counts) -> dict:
    """Step indices (into the source trajectory) covered by each split."""
    bounds = np.cumsum((0,) + tuple(counts)) * segment_len
    return {name: np.arange(bounds[i], bounds[i + 1]) for i, name in enumerate(SPLITS)}


def make_bundle(raw: dict, clean: dict | None = None, lifted: dict | None = None,
                metadata: dict | None = None) -> DatasetBundle:
    """Standardize per-split arrays with train statistics and wrap them."""
    x_norm = Standardizer.fit(raw["train"])
    splits = {s: {"x": x_norm.apply(raw[s])} for s in SPLITS}
    meta = dict(metadata or {})
    meta["x_norm"] = x_norm.to_dict()
    if clean is not None:
        c_norm = Standardizer.fit(clean["train"])
        for s in SPLITS:
            splits[s]["clean"] = c_norm.apply(clean[s])
        meta["clean_norm"] = c_norm.to_dict()
    if lifted is not None:
        for s in SPLITS:
            splits[s]["lifted"] = lifted[s]
    first = splits["train"]["x"]
    meta.setdefault("segment_len", int(first.shape[1]))
    meta["counts"] = [int(splits[s]["x"].shape[0]) for s in SPLITS]
    meta["shapes"] = {s: {k: list(v.shape) for k, v in splits[s].items()} for s in SPLITS}
    meta["format_version"] = BUNDLE_FORMAT_VERSION
    return DatasetBundle(splits, meta)


@dataclass(frozen=True)
class LorenzBundleConfig:
    snr: float = 5.0
    lorenz_seed: int | None = None
    lifting_seed: int = 0
    noise_seed: int = 0
    segment_len: int = 500
    counts: tuple = (250, 25, 25)
    lift_scale: float = 0.2
    lift_scale_is: str = "variance"
    standardize_before_lift: bool = False
    dt: float = 5e-3
    burn_in: int = 10_000


def make_lorenz_bundle(cfg: LorenzBundleConfig = LorenzBundleConfig()) -> DatasetBundle:
    """Full pipeline: integrate, lift to 30-D, corrupt at ``snr``, chunk, standardize."""
    n_steps = cfg.segment_len * sum(cfg.counts)
    traj = generate_lorenz(LorenzConfig(dt=cfg.dt, n_steps=n_steps, burn_in=cfg.burn_in,
                                        seed=cfg.lorenz_seed))
    net = LiftingNet.create(cfg.lifting_seed, scale=cfg.lift_scale, scale_is=cfg.lift_scale_is)
    lift_in = (traj - traj.mean(axis=0)) / traj.std(axis=0) if cfg.standardize_before_lift else traj
    lifted = lift(lift_in, net)
    noisy = corrupt_snr(lifted, cfg.snr, cfg.noise_seed)
    chunk = lambda a: chunk_and_split(a, cfg.segment_len, cfg.counts)  # noqa: E731
    meta = {"system": "lorenz", **_jsonable(asdict(cfg)),
            "snr_definition": "total power about the per-dimension mean, all dims and steps",
            "lift_scale_note": f"N(0, {cfg.lift_scale}) read as {cfg.lift_scale_is}",
            "measured_snr": signal_power(lifted) / float(np.mean((noisy - lifted) ** 2))}
    return make_bundle(chunk(noisy), chunk(traj), chunk(lifted), meta)


def make_ar_bundle(rho: float = 0.5, segment_len: int = 500, counts=(250, 25, 25),
                   seed: int = 0) -> DatasetBundle:
    """Unit-variance scalar AR(1) chunked like the Lorenz data; clean == input."""
    series = unit_ar1(rho, segment_len * sum(counts), seed)[:, None]
    parts = chunk_and_split(series, segment_len, counts)
    meta = {"system": "ar1", "rho": rho, "seed": seed, "segment_len": segment_len,
            "counts": list(counts)}
    return make_bundle(parts, parts, None, meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def save_bundle(bundle: DatasetBundle, path, fmt: str = "raw") -> Path:
    """Write ``bundle`` under directory ``path`` (``fmt`` is ``raw`` or ``csv``)."""
    if fmt not in ("raw", "csv"):
        raise DataError(f"unknown bundle format {fmt!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = dict(bundle.metadata)
    meta["storage"] = fmt
    meta["shapes"] = {s: {k: list(v.shape) for k, v in bundle[s].items()} for s in SPLITS}
    for split in SPLITS:
        for kind, arr in bundle[split].items():
            if fmt == "raw":
                arr.astype("<f8").tofile(path / f"{split}_{kind}.f64")
            else:
                sub = path / split
                sub.mkdir(exist_ok=True)
                for i, seg in enumerate(arr):
                    write_csv(sub / f"{kind}_{i:04d}.csv", seg)
    (path / "metadata.json").write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True))
    return path


def load_bundle(path) -> DatasetBundle:
    path = Path(path)
    meta_file = path / "metadata.json"
    if not meta_file.exists():
        raise DataError(f"{path}: no metadata.json")
    meta = json.loads(meta_file.read_text())
    if meta.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported bundle version {meta.get('format_version')}")
    fmt = meta.get("storage", "raw")
    splits = {}
    for split in SPLITS:
        splits[split] = {}
        for kind, shape in meta["shapes"][split].items():
            if fmt == "raw":
                arr = np.fromfile(path / f"{split}_{kind}.f64", dtype="<f8")
                splits[split][kind] = arr.reshape(shape)
            else:
                segs = [read_csv(path / split / f"{kind}_{i:04d}.csv") for i in range(shape[0])]
                splits[split][kind] = (np.stack(segs) if segs
                                       else np.zeros(shape))
    return DatasetBundle(splits, meta)


def bundle_hash(path) -> str:
    """SHA-256 over every file in a bundle directory, in sorted order."""
    h = hashlib.sha256()
    root = Path(path)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def write_csv(path, arr: np.ndarray, header=None) -> None:
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header or [f"d{j}" for j in range(arr.shape[1])])
        for row in arr:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty CSV")
    body = rows[1:]
    try:
        return np.array([[float(v) for v in r] for r in body], dtype=float).reshape(
            len(body), len(rows[0]))
    except ValueError as exc:
        raise DataError(f"{path}: malformed CSV ({exc})") from None


def ingest_csv(path, segment_len: int, counts, target_cols=None) -> DatasetBundle:
    """Build a bundle from one external CSV (rows = steps, columns = dims).

    ``target_cols`` selects columns used as the ``clean`` target; by default
    the inputs themselves are the target (self-forecasting).
    """
    series = read_csv(path)
    parts = chunk_and_split(series, segment_len, counts)
    targets = None
    if target_cols is not None:
        targets = {s: v[..., list(target_cols)] for s, v in parts.items()}
    meta = {"system": "csv", "source": str(path), "segment_len": segment_len,
            "counts": list(counts)}
    return make_bundle(parts, targets if targets is not None else parts, None, meta)
