import numpy as np
import pytest

from chaos_da.config import ExperimentConfig
from chaos_da.dynamics import LorenzParams, TimeGrid
from chaos_da.enkf import (
    DegenerateEnsembleError,
    EnkfConfig,
    enkf_analysis,
    enkf_forecast,
    kalman_gain,
    kf_exact,
    linear_forecast,
    run_enkf,
    sample_covariance,
)
from chaos_da.envda import NoiseModel, ObservationOperator, generate_twin

FULL = ObservationOperator((True, True, True))
XZ = ObservationOperator((True, False, True))

# fixed linear-Gaussian test system
A = np.array([[0.9, 0.2, 0.0], [-0.1, 0.8, 0.3], [0.05, 0.0, 0.95]])
Q = np.diag([0.1, 0.2, 0.05])
R_XZ = np.diag([0.5, 0.3])
M0 = np.array([1.0, -2.0, 3.0])
P0 = np.array([[1.0, 0.3, 0.1], [0.3, 2.0, -0.2], [0.1, -0.2, 0.5]])
Y = np.array([1.5, 2.0])


def test_config_validation():
    with pytest.raises(ValueError):
        EnkfConfig(n_ens=1)
    with pytest.raises(ValueError):
        EnkfConfig(obs_error_std=0.0)
    with pytest.raises(ValueError):
        EnkfConfig(model_error_std=-1.0)
    with pytest.raises(ValueError):
        EnkfConfig(initial_spread=0.0)


@pytest.mark.parametrize("noise,var", [
    (NoiseModel("gaussian", 2.0), 4.0),
    (NoiseModel("lognormal"), np.e * (np.e - 1)),
    (NoiseModel("uniform"), 1 / 12),
    (NoiseModel("none"), 1e-6),
])
def test_obs_covariance_matches_noise_variance(noise, var):
    r = EnkfConfig().obs_covariance(noise, XZ)
    np.testing.assert_allclose(r, var * np.eye(2), rtol=1e-15)
    assert EnkfConfig(obs_error_std=0.5).obs_covariance(noise, FULL)[1, 1] == 0.25


def test_sample_covariance_unbiased_divisor():
    ens = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    assert sample_covariance(ens)[0, 0] == 2.0
    rng = np.random.default_rng(0)
    e = rng.standard_normal((7, 3))
    np.testing.assert_allclose(sample_covariance(e), np.cov(e.T), rtol=1e-13)


def test_forecast_identical_members_stay_identical():
    ens = np.repeat([[1.0, 2.0, 20.0]], 4, axis=0)
    fc, states, flags = enkf_forecast(ens, LorenzParams(), TimeGrid(), EnkfConfig(), np.random.default_rng(0))
    assert np.all(fc == fc[0]) and states.shape == (4, 51, 3) and not flags.any()


def test_forecast_fixed_point_unchanged():
    c = np.sqrt(8 / 3 * 27)
    ens = np.array([[c, c, 27.0], [-c, -c, 27.0], [0.0, 0.0, 0.0]])
    fc, _, _ = enkf_forecast(ens, LorenzParams(), TimeGrid(), EnkfConfig(), np.random.default_rng(0))
    np.testing.assert_allclose(fc, ens, atol=1e-12)


def test_forecast_model_noise_moments():
    q = 0.3
    ens = np.repeat([[1.0, 2.0, 20.0]], 10_000, axis=0)
    cfg = EnkfConfig(model_error_std=q)
    fc, _, _ = enkf_forecast(ens, LorenzParams(), TimeGrid(steps_per_obs=1), cfg, np.random.default_rng(1))
    var = np.diag(sample_covariance(fc))
    assert np.all(np.abs(var - q * q) <= 0.05 * q * q)


def test_gain_scalar_example():
    ens = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]) / np.sqrt(2.0)  # sample variance 1 in x
    k = kalman_gain(ens, ObservationOperator((True, False, False)), np.eye(1))
    assert k.shape == (3, 1)
    assert k[0, 0] == pytest.approx(0.5, rel=1e-14)


def test_gain_huge_r_ignores_observations():
    ens = np.random.default_rng(0).standard_normal((20, 3))
    k = kalman_gain(ens, FULL, 1e12 * np.eye(3))
    assert np.abs(k).max() <= 1e-9
    # perturbations scale like sqrt(R) while the gain scales like 1/R, so the analysis shift is
    # O(R^-1/2): it takes R ~ 1e20 to push it safely below 1e-9
    rng = np.random.default_rng(1)
    an = enkf_analysis(ens, np.zeros(3), FULL, 1e20 * np.eye(3), rng)
    assert np.all(np.abs(an - ens) <= 1e-9 * np.maximum(1.0, np.abs(ens)))


def test_gain_matches_explicit_inverse():
    ens = np.random.default_rng(3).standard_normal((15, 3)) * [1.0, 2.0, 0.5]
    r = np.diag([0.3, 0.7, 1.1])
    p = np.cov(ens.T)
    explicit = p @ np.linalg.inv(p + r)
    np.testing.assert_allclose(kalman_gain(ens, FULL, r), explicit, atol=1e-10, rtol=0)


def test_gain_eigenvalues_in_unit_interval():
    for seed in range(10):
        ens = np.random.default_rng(seed).standard_normal((8, 3)) * 3
        ev = np.linalg.eigvals(kalman_gain(ens, FULL, 0.7**2 * np.eye(3)))
        assert np.all(ev.real >= -1e-12) and np.all(ev.real <= 1 + 1e-12)


def test_degenerate_ensemble_raises():
    ens = np.repeat([[1.0, 2.0, 3.0]], 5, axis=0)
    with pytest.raises(DegenerateEnsembleError):
        kalman_gain(ens, FULL, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        kalman_gain(ens[:1], FULL, np.eye(3))


def test_analysis_checks_observation_size():
    ens = np.random.default_rng(0).standard_normal((5, 3))
    with pytest.raises(ValueError):
        enkf_analysis(ens, np.zeros(3), XZ, R_XZ, np.random.default_rng(0))


def test_member_permutation_invariance():
    ens = np.random.default_rng(0).standard_normal((6, 3))
    perm = np.array([3, 0, 5, 1, 4, 2])
    np.testing.assert_allclose(kalman_gain(ens[perm], FULL, np.eye(3)), kalman_gain(ens, FULL, np.eye(3)),
                               atol=1e-14)
    a = enkf_analysis(ens, np.ones(3), FULL, np.eye(3), np.random.default_rng(5))
    # draws are indexed by member slot, so pairing them with the permuted members needs the same order
    b = enkf_analysis(ens[perm], np.ones(3), FULL, np.eye(3), np.random.default_rng(5))
    np.testing.assert_allclose(a.mean(axis=0) - ens.mean(axis=0) - (b.mean(axis=0) - ens.mean(axis=0)),
                               np.zeros(3), atol=1e-12)


def test_kf_exact_conjugate_example():
    m, p = kf_exact(np.zeros(3), np.eye(3), np.eye(3), FULL, np.zeros((3, 3)), np.eye(3), np.ones(3))
    np.testing.assert_allclose(p, 0.5 * np.eye(3), atol=1e-15)
    np.testing.assert_allclose(m, 0.5 * np.ones(3), atol=1e-15)


def test_kf_exact_predict_only():
    m, p = kf_exact(M0, P0, A, FULL, Q, np.eye(3))
    np.testing.assert_array_equal(p, A @ P0 @ A.T + Q)
    np.testing.assert_array_equal(m, A @ M0)


def test_kf_exact_rejects_non_psd():
    with pytest.raises(ValueError):
        kf_exact(M0, -np.eye(3), A, FULL, Q, np.eye(3))


def test_kf_exact_scalar_riccati():
    a, q, r, h = 0.95, 0.1, 0.4, 1.0
    m, p = 0.3, 2.0
    mk, pk = np.array([m]), np.array([[p]])
    ys = [0.5, -0.2, 1.1, 0.7, 0.0]
    for y in ys:
        pf = a * a * p + q
        k = pf * h / (h * h * pf + r)
        m = a * m + k * (y - h * a * m)
        p = (1 - k * h) * pf
        mk, pk = kf_exact(mk, pk, np.array([[a]]), np.array([[h]]), np.array([[q]]), np.array([[r]]), y)
        assert abs(mk[0] - m) <= 1e-12 and abs(pk[0, 0] - p) <= 1e-12


def _one_cycle_errors(n, seeds=20):
    mk, pk = kf_exact(M0, P0, A, XZ, Q, R_XZ, Y)
    em, ep = [], []
    for s in range(seeds):
        rng = np.random.default_rng([n, s])
        ens = rng.multivariate_normal(M0, P0, n)
        ens = enkf_analysis(linear_forecast(ens, A, Q, rng), Y, XZ, R_XZ, rng)
        em.append(np.linalg.norm(ens.mean(axis=0) - mk) / np.linalg.norm(mk))
        ep.append(np.linalg.norm(sample_covariance(ens) - pk) / np.linalg.norm(pk))
    return float(np.mean(em)), float(np.mean(ep))


def test_enkf_converges_to_kalman_filter():
    errs = {n: _one_cycle_errors(n) for n in (100, 1000, 10_000)}
    assert errs[10_000][0] <= 0.02 and errs[10_000][1] <= 0.02
    assert errs[100][0] > errs[1000][0] > errs[10_000][0]
    assert errs[100][1] > errs[1000][1] > errs[10_000][1]


def test_run_enkf_noise_free_tracks_reference():
    cfg = ExperimentConfig(noise=NoiseModel("none"), horizon=1.0)
    tw = generate_twin(cfg, 3)
    run = run_enkf(EnkfConfig(), cfg, tw, seed=1)
    means = run.member_analyses.mean(axis=1)
    assert np.abs(means[5:] - tw.reference_at_obs()[5:]).max() <= 1e-2


def test_run_enkf_deterministic_and_below_noise():
    cfg = ExperimentConfig(horizon=10.0)
    tw = generate_twin(cfg, 4)
    a = run_enkf(EnkfConfig(), cfg, tw, seed=2)
    b = run_enkf(EnkfConfig(), cfg, tw, seed=2)
    np.testing.assert_array_equal(a.trajectory, b.trajectory)
    np.testing.assert_array_equal(a.rmse, b.rmse)
    assert not a.diverged and a.time_avg_rmse < 1.0
    assert run_enkf(EnkfConfig(), cfg, tw, seed=3).time_avg_rmse != a.time_avg_rmse


def test_run_enkf_initial_ensemble_and_innovation_contraction():
    cfg = ExperimentConfig(horizon=10.0, mask=(True, False, True))
    tw = generate_twin(cfg, 5)
    run = run_enkf(EnkfConfig(), cfg, tw, seed=0)
    init = run.member_analyses[0]
    np.testing.assert_allclose(init.mean(axis=0)[[0, 2]], tw.observations[0], atol=0.6)
    cfg = ExperimentConfig(horizon=10.0)
    tw = generate_twin(cfg, 5)
    run = run_enkf(EnkfConfig(), cfg, tw, seed=0)
    y = tw.observations[1:]
    r = EnkfConfig().obs_covariance(cfg.noise, FULL)
    for k in range(y.shape[0]):
        # the gain part of the mean update contracts the innovation exactly (I - HK has spectrum in (0, 1])
        fc = run.member_forecasts[k + 1]
        d = y[k] - fc.mean(axis=0)
        moved = y[k] - (fc.mean(axis=0) + kalman_gain(fc, FULL, r) @ d)
        assert np.linalg.norm(moved) <= np.linalg.norm(d)
    # the realised update adds the mean observation perturbation, so contraction holds on average
    before = np.abs(y - run.member_forecasts[1:].mean(axis=1)).mean(axis=1)
    after = np.abs(y - run.member_analyses[1:].mean(axis=1)).mean(axis=1)
    assert after.mean() < before.mean()


def test_run_enkf_rejects_single_member():
    cfg = ExperimentConfig(horizon=1.0)
    with pytest.raises(ValueError):
        run_enkf(EnkfConfig(), cfg, generate_twin(cfg, 0), seed=0, n_ens=1)
