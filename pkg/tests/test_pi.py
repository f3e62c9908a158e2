import math
import warnings

import numpy as np
import pytest

from dapc import autodiff as ad
from dapc import pi
from dapc.data import unit_ar1

from conftest import fd_check


def windows_cov_oracle(Z, width):
    """Plain loop over windows, independent of the traced estimator."""
    rows = []
    for seq in Z:
        for t in range(seq.shape[0] - width + 1):
            rows.append(seq[t:t + width].reshape(-1))
    W = np.array(rows)
    C = W - W.mean(axis=0)
    return C.T @ C / len(W)


def toeplitz_pi(rho, T):
    S = pi.toeplitz_ar1_cov(rho, 2 * T)
    return (np.linalg.slogdet(S[:T, :T])[1] - 0.5 * np.linalg.slogdet(S)[1])


# -- estimation ---------------------------------------------------------------

def test_estimator_matches_window_loop(rng):
    Z = rng.normal(size=(3, 15, 2))
    cov = pi.estimate_window_covariance(Z, 2, jitter=0.0)
    np.testing.assert_allclose(cov.sigma_2T.values, windows_cov_oracle(Z, 4), atol=1e-12)
    assert cov.n_windows == 3 * 12


def test_constant_sequence_gives_jitter_identity():
    cov = pi.estimate_window_covariance(np.full((2, 10, 3), 4.2), 2, jitter=1e-3)
    np.testing.assert_allclose(cov.sigma_2T.values, 1e-3 * np.eye(12), atol=1e-15)


def test_iid_latents_give_identity(rng):
    Z = rng.normal(size=(1, 100_000, 2))
    cov = pi.estimate_window_covariance(Z, 2, jitter=0.0)
    assert np.max(np.abs(cov.sigma_2T.values - np.eye(8))) < 0.05


def test_ar1_covariance_is_toeplitz():
    z = unit_ar1(0.5, 200_000, seed=3)
    cov = pi.estimate_window_covariance(z[None, :, None], 2, jitter=0.0)
    assert np.max(np.abs(cov.sigma_2T.values - pi.toeplitz_ar1_cov(0.5, 4))) < 0.02


def test_symmetric(rng):
    S = pi.estimate_window_covariance(rng.normal(size=(2, 30, 3)), 2).sigma_2T.values
    assert np.max(np.abs(S - S.T)) < 1e-10


def test_short_sequence_rejected():
    with pytest.raises(ad.ContractError, match="2T=8"):
        pi.estimate_window_covariance(np.zeros((2, 7, 1)), 4)


def test_too_few_windows_warns(rng):
    with pytest.warns(RuntimeWarning, match="rank-deficient"):
        pi.estimate_window_covariance(rng.normal(size=(1, 10, 3)), 2)


def test_stride_subsamples_windows(rng):
    Z = rng.normal(size=(1, 21, 2))
    full = pi.estimate_window_covariance(Z, 1, stride=1, jitter=0.0)
    strided = pi.estimate_window_covariance(Z, 1, stride=2, jitter=0.0)
    assert (full.n_windows, strided.n_windows) == (20, 10)
    W = np.array([Z[0, t:t + 2].ravel() for t in range(0, 20, 2)])
    C = W - W.mean(axis=0)
    np.testing.assert_allclose(strided.sigma_2T.values, C.T @ C / 10, atol=1e-12)


def test_subblock_consistency_across_T(rng):
    Z = rng.normal(size=(4, 200, 2)).cumsum(axis=1) * 0.1
    at_T = pi.estimate_window_covariance(Z, 4, jitter=0.0)
    at_half = pi.estimate_window_covariance(Z, 2, jitter=0.0)
    # both estimate the 4-step covariance; they differ only by the few
    # windows that the longer window length drops at each sequence end
    dropped = 1 - at_T.n_windows / at_half.n_windows
    tol = 4 * dropped * np.max(Z ** 2)
    diff = np.abs(at_T.block(4).values - at_half.sigma_2T.values)
    assert np.max(diff) < tol


# -- predictive information ---------------------------------------------------

def test_identity_covariance_has_zero_pi():
    cov = pi.WindowCovariance.from_matrix(np.eye(12), 2, 3)
    assert float(pi.predictive_information(cov).values) == 0.0
    assert float(pi.multiscale_pi(cov, 0.7).values) == 0.0


def test_ar1_analytic_value():
    cov = pi.WindowCovariance.from_matrix([[1.0, 0.5], [0.5, 1.0]], 1, 1)
    got = float(pi.predictive_information(cov).values)
    assert got == pytest.approx(-0.5 * math.log(1 - 0.25), abs=1e-12)
    assert got == pytest.approx(0.143841, abs=1e-6)
    assert pi.ar1_pi(0.5) == pytest.approx(got, abs=1e-12)


def test_ar1_pi_independent_of_T():
    for T in (1, 2, 4):
        cov = pi.WindowCovariance.from_matrix(pi.toeplitz_ar1_cov(0.5, 2 * T), T, 1)
        assert float(pi.predictive_information(cov).values) == pytest.approx(pi.ar1_pi(0.5, T), abs=1e-12)


def test_periodic_latent_pi_diverges_as_jitter_shrinks():
    e = np.eye(2)
    Z = np.array([e[t % 2] for t in range(200)])[None]
    values = [pi.pi_numpy(Z, 2, jitter=j) for j in (1e-2, 1e-4, 1e-6)]
    assert values[0] < values[1] < values[2]
    assert values[2] - values[1] > 1.0


def test_multiscale_alpha_zero_matches_pi():
    cov = pi.WindowCovariance.from_matrix(pi.toeplitz_ar1_cov(0.3, 4), 2, 1)
    assert pi.multiscale_pi(cov, 0.0).values == pi.predictive_information(cov).values


def test_multiscale_against_direct_logdets():
    S = pi.toeplitz_ar1_cov(0.5, 4)
    cov = pi.WindowCovariance.from_matrix(S, 2, 1)
    expected = toeplitz_pi(0.5, 2) + toeplitz_pi(0.5, 1)
    assert float(pi.multiscale_pi(cov, 1.0).values) == pytest.approx(expected, abs=1e-12)


def test_odd_T_with_alpha_rejected():
    with pytest.raises(pi.ConfigError):
        pi.PIConfig(T=3, alpha=0.5)
    cov = pi.WindowCovariance.from_matrix(np.eye(6), 3, 1)
    with pytest.raises(pi.ConfigError):
        pi.multiscale_pi(cov, 0.5)


def test_pi_propagates_not_pd():
    cov = pi.WindowCovariance.from_matrix(-np.eye(2), 1, 1)
    with pytest.raises(ad.NotPositiveDefiniteError):
        pi.predictive_information(cov)


def test_from_matrix_checks_shape():
    with pytest.raises(ad.ContractError):
        pi.WindowCovariance.from_matrix(np.eye(5), 2, 1)


# -- ortho penalty ------------------------------------------------------------

@pytest.mark.parametrize("sigma1, expected", [
    (np.eye(3), 0.0),
    (2 * np.eye(3), 3.0),
    (np.array([[1.0, 0.5], [0.5, 1.0]]), 0.5),
])
def test_ortho_penalty_examples(sigma1, expected):
    d = sigma1.shape[0]
    S = np.eye(2 * d)
    S[:d, :d] = sigma1
    cov = pi.WindowCovariance.from_matrix(S, 1, d)
    assert float(pi.ortho_penalty(cov).values) == pytest.approx(expected, abs=1e-15)


# -- invariants ---------------------------------------------------------------

def test_linear_map_invariance(rng):
    Z = rng.normal(size=(2, 300, 3)).cumsum(axis=1) * 0.1 + rng.normal(size=(2, 300, 3))
    base = pi.pi_numpy(Z, 2, jitter=0.0)
    for _ in range(20):
        B = rng.normal(size=(3, 3)) + 2 * np.eye(3)
        assert abs(pi.pi_numpy(Z @ B, 2, jitter=0.0) - base) < 1e-8


def test_pi_nonnegative_for_stationary_process():
    for rho in (0.0, 0.3, 0.8):
        z = unit_ar1(rho, 50_000, seed=11)
        assert pi.pi_numpy(z[None, :, None], 3, jitter=0.0) >= -1e-6


def test_gaussian_entropy_matches_direct(rng):
    A = rng.normal(size=(5, 5))
    S = A @ A.T + np.eye(5)
    direct = 0.5 * math.log((2 * math.pi * math.e) ** 5 * np.linalg.det(S))
    assert float(pi.gaussian_entropy(S).values) == pytest.approx(direct, abs=1e-10)


def test_pi_grad_wrt_latents(rng):
    Z = rng.normal(size=(1, 20, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        err = fd_check(lambda z: pi.predictive_information(pi.estimate_window_covariance(z, 1)),
                       [Z])
    assert err < 1e-4


def test_multiscale_and_ortho_grad_wrt_latents(rng):
    Z = rng.normal(size=(2, 30, 2))

    def build(z):
        cov = pi.estimate_window_covariance(z, 2)
        return pi.multiscale_pi(cov, 0.5) + pi.ortho_penalty(cov)

    assert fd_check(build, [Z]) < 1e-4
