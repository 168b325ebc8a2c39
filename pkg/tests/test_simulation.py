import numpy as np
import pytest

from votetrans.estimation import FitOptions
from votetrans.model import ModelError, brown_payne_variance, row_variance
from votetrans.simulation import (
    ScenarioConfig,
    _rng,
    covariance_mc_se,
    dirichlet_from_mean_precision,
    generate_dataset,
    run_mc_study,
    scenario,
    share_slope,
    simulate,
    variance_oracle,
    variance_oracle_draws,
)


@pytest.mark.parametrize("name", ["none", "concordant", "discordant", "milan"])
def test_margins_are_conserved(name):
    cfg = scenario(name, k=30)
    ds, cells = simulate(cfg, _rng(4))
    np.testing.assert_array_equal(cells.sum(axis=2), ds.n)
    np.testing.assert_array_equal(cells.sum(axis=1), ds.y)
    assert np.all(cells >= 0)
    assert np.all((ds.n.sum(axis=1) >= cfg.n_bounds[0]) & (ds.n.sum(axis=1) <= cfg.n_bounds[1]))


def test_same_seed_same_data():
    cfg = scenario("discordant", k=20, seed=9)
    a, ca = generate_dataset(cfg, 3)
    b, cb = generate_dataset(cfg, 3)
    np.testing.assert_array_equal(ca, cb)
    assert all(np.array_equal(x.y, z.y) for x, z in zip(a, b))
    _, cc = generate_dataset(cfg, 4)
    assert not np.array_equal(ca, cc)


def test_latent_cells_follow_truth():
    cfg = scenario("none", k=400, seed=2)
    ds, cells = simulate(cfg, _rng(2))
    share = cells.sum(axis=0) / cells.sum(axis=(0, 2))[:, None]
    np.testing.assert_allclose(share[:, 0], [0.7, 0.2], atol=0.01)


def test_config_validation():
    with pytest.raises(ModelError):
        ScenarioConfig(theta_true=(1.0, 0.1))
    with pytest.raises(ModelError):
        ScenarioConfig(first_election_prob_bounds=((0.3, 0.7), (0.1, 0.2)))
    with pytest.raises(ModelError):
        scenario("nonexistent")


def test_dirichlet_moments():
    mean, theta = np.array([0.5, 0.3, 0.2]), 0.2
    draws = np.random.default_rng(0).dirichlet(dirichlet_from_mean_precision(mean, theta), 200_000)
    np.testing.assert_allclose(draws.mean(axis=0), mean, atol=2e-3)
    target = theta * (np.diag(mean) - np.outer(mean, mean))
    np.testing.assert_allclose(np.cov(draws.T), target, atol=1e-3)


def test_no_overdispersion_limit_is_multinomial():
    draws = variance_oracle_draws([0.7, 0.3], 0.0, 50, 700, 50_000, seed=1)
    cov, se = covariance_mc_se(draws)
    assert abs(cov[0, 0] - 700 * 0.21) < 3 * se[0, 0]


def test_single_cluster_matches_compound_multinomial():
    n, theta = 300, 0.1
    draws = variance_oracle_draws([0.7, 0.3], theta, n, n, 100_000, seed=3)
    cov, se = covariance_mc_se(draws)
    target = brown_payne_variance([0.7, 0.3], theta, n)[0, 0]
    assert target == pytest.approx(row_variance([0.7, 0.3], theta, n, n)[0, 0])
    assert abs(cov[0, 0] - target) < 3 * se[0, 0]


def test_variance_oracle_requires_enough_draws():
    with pytest.raises(ModelError):
        variance_oracle([0.7, 0.3], 0.1, 50, 700, 100)


def test_concordant_slope_exceeds_none():
    wins = 0
    for seed in range(100):
        a, _ = simulate(scenario("concordant"), _rng(seed))
        b, _ = simulate(scenario("none"), _rng(seed))
        wins += share_slope(a) > share_slope(b)
    assert wins >= 95


def test_mc_study_deterministic_across_workers():
    cfg = scenario("discordant", k=60, seed=5)
    a = run_mc_study(cfg, 6, FitOptions(C=cfg.C), n_jobs=1)
    b = run_mc_study(cfg, 6, FitOptions(C=cfg.C), n_jobs=2)
    np.testing.assert_array_equal(a.estimates, b.estimates)
    np.testing.assert_array_equal(a.replicate_ids, b.replicate_ids)
    assert a.bias.shape == a.se_ratio.shape == (5,)
    assert a.exceedance.shape == (len(a.z_values), 5)


def test_larger_stations_are_more_informative():
    small = run_mc_study(scenario("discordant", k=100, seed=6), 40)
    large = run_mc_study(scenario("discordant", k=100, seed=6, n_bounds=(2400, 3200)), 40)
    assert np.all(large.sd[:4] < small.sd[:4])
