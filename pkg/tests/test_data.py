import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from dapc import data
from dapc.data import (LiftingNet, LorenzBundleConfig, LorenzConfig, chunk_and_split, corrupt_snr,
                       generate_ar, generate_lorenz, lift, make_lorenz_bundle, signal_power)
from dapc.pi import pi_numpy

SMALL = LorenzBundleConfig(snr=1.0, segment_len=100, counts=(20, 5, 5), burn_in=1000)


# -- Lorenz -------------------------------------------------------------------

def test_origin_is_fixed_point():
    traj = generate_lorenz(LorenzConfig(n_steps=500, burn_in=0, initial_state=(0.0, 0.0, 0.0)))
    assert np.all(traj == 0)


def test_matches_independent_integrator():
    cfg = LorenzConfig(dt=1e-3, n_steps=1000, burn_in=0)
    traj = generate_lorenz(cfg)
    t_eval = cfg.dt * np.arange(1, 1001)
    ref = solve_ivp(lambda t, s: data.lorenz_rhs(s), (0, t_eval[-1]), cfg.initial_state,
                    method="DOP853", t_eval=t_eval, rtol=1e-12, atol=1e-12).y.T
    assert np.max(np.abs(traj - ref)) < 1e-6


def test_fourth_order_convergence():
    def run(dt, n):
        return generate_lorenz(LorenzConfig(dt=dt, n_steps=n, burn_in=0))

    n, dt = 10_000, 1e-3
    a, b, c = run(dt, n), run(dt / 2, 2 * n)[1::2], run(dt / 4, 4 * n)[3::4]
    ratio = np.max(np.abs(a - b)) / np.max(np.abs(b - c))
    assert 14 < ratio < 18


def test_long_trajectory_bounded():
    traj = generate_lorenz(LorenzConfig(n_steps=1_000_000, burn_in=0))
    assert np.all(np.isfinite(traj))
    assert np.max(np.abs(traj)) < 100


def test_two_lobes_visited():
    x = generate_lorenz(LorenzConfig(n_steps=125_000))[:, 0]
    assert np.count_nonzero(np.diff(np.sign(x)) != 0) >= 50


def test_divergence_reports_step():
    with pytest.raises(data.IntegrationError) as info:
        generate_lorenz(LorenzConfig(dt=1.0, n_steps=100, burn_in=0))
    assert info.value.step >= 0


def test_bad_lorenz_config():
    with pytest.raises(data.DataError):
        LorenzConfig(dt=0)
    with pytest.raises(data.DataError):
        LorenzConfig(burn_in=-1)


# -- lifting and noise --------------------------------------------------------

def test_zero_net_lifts_to_zero():
    traj = generate_lorenz(LorenzConfig(n_steps=50))
    assert np.all(lift(traj, LiftingNet.zeros()) == 0)


def test_lifting_deterministic_and_non_degenerate():
    traj = generate_lorenz(LorenzConfig(n_steps=5000))
    a = lift(traj, LiftingNet.create(3))
    b = lift(traj, LiftingNet.create(3))
    assert a.tobytes() == b.tobytes()
    assert a.shape == (5000, 30)
    assert a.std(axis=0).min() > 1e-3


def test_lifting_scale_reading():
    var = LiftingNet.create(0, scale_is="variance")
    std = LiftingNet.create(0, scale_is="std")
    assert np.std(np.concatenate([w.ravel() for w in var.weights])) == \
        pytest.approx(math.sqrt(0.2), rel=0.05)
    assert np.std(np.concatenate([w.ravel() for w in std.weights])) == pytest.approx(0.2, rel=0.05)
    with pytest.raises(data.DataError):
        LiftingNet.create(0, scale_is="other")


def test_lifting_net_is_frozen():
    net = LiftingNet.create(0)
    with pytest.raises(ValueError):
        net.weights[0][0, 0] = 1.0


def test_snr_one_power_ratio(rng):
    signal = rng.normal(size=(250 * 500, 30)) * rng.uniform(0.5, 2, 30) + 3.0
    noisy = corrupt_snr(signal, 1.0, seed=0)
    ratio = signal_power(signal) / np.mean((noisy - signal) ** 2)
    assert 0.97 <= ratio <= 1.03


def test_infinite_snr_adds_no_noise(rng):
    signal = rng.normal(size=(100, 3))
    np.testing.assert_array_equal(corrupt_snr(signal, math.inf, 0), signal)
    with pytest.raises(data.DataError):
        corrupt_snr(signal, 0.0, 0)


def test_noise_seed_changes_only_noise(rng):
    signal = rng.normal(size=(100, 3))
    a, b = corrupt_snr(signal, 2.0, 1), corrupt_snr(signal, 2.0, 2)
    assert not np.array_equal(a, b)
    # same signal underneath: the differences are pure noise with the same scale
    assert np.std(a - signal) == pytest.approx(np.std(b - signal), rel=0.3)


# -- chunking and standardization ---------------------------------------------

def test_single_segment_is_input(rng):
    traj = rng.normal(size=(500, 2))
    parts = chunk_and_split(traj, 500, (1, 0, 0))
    np.testing.assert_array_equal(parts["train"][0], traj)
    assert parts["valid"].shape[0] == parts["test"].shape[0] == 0


def test_splits_disjoint_and_ordered():
    idx = data.split_indices(10, (5, 2, 3))
    seen = np.concatenate(list(idx.values()))
    assert len(seen) == len(set(seen)) == 100
    assert idx["train"].max() < idx["valid"].min() <= idx["valid"].max() < idx["test"].min()


def test_short_trajectory_rejected(rng):
    with pytest.raises(data.DataError):
        chunk_and_split(rng.normal(size=(99, 1)), 10, (5, 3, 2))


def test_train_standardization(rng):
    raw = chunk_and_split(rng.normal(size=(3000, 4)) * 5 + 2, 100, (20, 5, 5))
    b = data.make_bundle(raw, raw)
    flat = b["train"]["x"].reshape(-1, 4)
    assert np.max(np.abs(flat.mean(axis=0))) < 1e-10
    assert np.max(np.abs(flat.std(axis=0) - 1)) < 1e-10
    # valid/test use the train statistics, not their own
    assert np.max(np.abs(b["valid"]["x"].reshape(-1, 4).mean(axis=0))) > 1e-6


# -- Lorenz bundle -------------------------------------------------------------

@pytest.fixture(scope="module")
def small_bundle():
    return make_lorenz_bundle(SMALL)


def test_bundle_shapes(small_bundle):
    assert small_bundle["train"]["x"].shape == (20, 100, 30)
    assert small_bundle["test"]["clean"].shape == (5, 100, 3)
    assert small_bundle["valid"]["lifted"].shape == (5, 100, 30)
    assert small_bundle.input_dim == 30 and small_bundle.segment_len == 100


def test_measured_snr(small_bundle):
    assert small_bundle.metadata["measured_snr"] == pytest.approx(SMALL.snr, rel=0.03)


def test_bundle_files_deterministic(tmp_path, small_bundle):
    again = make_lorenz_bundle(SMALL)
    a = data.save_bundle(small_bundle, tmp_path / "a")
    b = data.save_bundle(again, tmp_path / "b")
    assert data.bundle_hash(a) == data.bundle_hash(b)


@pytest.mark.parametrize("fmt", ["raw", "csv"])
def test_bundle_roundtrip(tmp_path, small_bundle, fmt):
    path = data.save_bundle(small_bundle, tmp_path / fmt, fmt=fmt)
    loaded = data.load_bundle(path)
    for split in data.SPLITS:
        for kind, arr in small_bundle[split].items():
            np.testing.assert_array_equal(loaded[split][kind], arr)
    assert loaded.metadata["snr"] == SMALL.snr


def test_load_errors(tmp_path):
    with pytest.raises(data.DataError):
        data.load_bundle(tmp_path)
    with pytest.raises(data.DataError):
        data.save_bundle(make_lorenz_bundle(SMALL), tmp_path / "x", fmt="parquet")


def test_csv_ingest(tmp_path, rng):
    series = rng.normal(size=(300, 3))
    data.write_csv(tmp_path / "s.csv", series)
    b = data.ingest_csv(tmp_path / "s.csv", 50, (4, 1, 1), target_cols=[0])
    assert b["train"]["x"].shape == (4, 50, 3)
    assert b["train"]["clean"].shape == (4, 50, 1)
    (tmp_path / "bad.csv").write_text("a,b\n1,x\n")
    with pytest.raises(data.DataError, match="malformed"):
        data.read_csv(tmp_path / "bad.csv")


# -- AR oracles ----------------------------------------------------------------

def test_white_noise_has_no_pi():
    x = generate_ar(0.0, 1.0, 200_000, seed=0)
    assert abs(pi_numpy(x[None, :, None], 1, jitter=0.0)) < 0.01


def test_ar1_pi_and_autocorrelation():
    x = generate_ar(0.9, 1.0, 200_000, seed=1)
    assert pi_numpy(x[None, :, None], 1, jitter=0.0) == pytest.approx(-0.5 * math.log(1 - 0.81),
                                                                      abs=0.02)
    x = x - x.mean()
    assert np.dot(x[1:], x[:-1]) / np.dot(x, x) == pytest.approx(0.9, abs=0.01)


def test_var1_matches_recursion():
    A = np.array([[0.5, 0.2], [-0.1, 0.7]])
    x = generate_ar(A, 1.0, 50, seed=0, burn_in=0)
    eps = np.random.default_rng(0).normal(0.0, 1.0, (50, 2))
    ref = np.zeros(2)
    for t in range(50):
        ref = A @ ref + eps[t]
        np.testing.assert_allclose(x[t], ref, atol=1e-12)


def test_unstable_ar_rejected():
    with pytest.raises(data.DataError, match="unstable"):
        generate_ar(1.0, 1.0, 10, seed=0)


def test_unit_ar1_variance():
    assert np.var(data.unit_ar1(0.5, 200_000, seed=2)) == pytest.approx(1.0, abs=0.02)
