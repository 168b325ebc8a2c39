import numpy as np
import pytest

from oracles import exact_expected_cells
from votetrans.model import IdentifiabilityError, ModelError, StationRecord
from votetrans.reconstruction import expected_cells_ipf, goodman_fit
from votetrans.simulation import _rng, scenario, simulate


def _noiseless(pi, k=40, seed=0):
    rng = np.random.default_rng(seed)
    pi = np.asarray(pi, dtype=float)
    n = rng.integers(100, 1000, size=(k, pi.shape[0])) * 1000
    y = n @ pi
    return [StationRecord(n[s], np.rint(y[s]).astype(int)) for s in range(k)]


class TestGoodman:
    def test_exact_on_noiseless_margins(self):
        pi = [[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.25, 0.25, 0.5]]
        g = goodman_fit(_noiseless(pi))
        np.testing.assert_allclose(g.matrix, pi, atol=1e-10)
        assert not g.out_of_range.any()

    def test_single_row_is_share(self):
        recs = [StationRecord([100], [30, 70]), StationRecord([200], [60, 140])]
        np.testing.assert_allclose(goodman_fit(recs).matrix, [[0.3, 0.7]])

    def test_rows_sum_to_one(self):
        ds, _ = simulate(scenario("discordant", k=80), _rng(1))
        np.testing.assert_allclose(goodman_fit(ds).matrix.sum(axis=1), 1.0)

    def test_rank_deficiency(self):
        recs = [StationRecord([100, 200], [150, 150]), StationRecord([50, 100], [70, 80]),
                StationRecord([10, 20], [15, 15])]
        with pytest.raises(IdentifiabilityError):
            goodman_fit(recs)
        with pytest.raises(IdentifiabilityError):
            goodman_fit(recs[:1])

    def test_out_of_range_is_flagged(self):
        g = goodman_fit([StationRecord([100, 100], [190, 10]), StationRecord([150, 50], [200, 0]),
                         StationRecord([50, 150], [180, 20])])
        assert g.out_of_range.any()

    @pytest.mark.slow
    def test_unbiased_without_covariate_effects(self):
        cfg = scenario("none", k=100)
        mats = [goodman_fit(simulate(cfg, _rng(500, b))[0]).matrix for b in range(500)]
        mats = np.array(mats)
        mc_se = mats.std(axis=0, ddof=1) / np.sqrt(len(mats))
        assert np.all(np.abs(mats.mean(axis=0) - [[0.7, 0.3], [0.2, 0.8]]) < 3 * mc_se)


class TestIpf:
    def test_margins_are_met(self):
        m = expected_cells_ipf([[0.6, 0.3, 0.1], [0.2, 0.3, 0.5]], [400, 300], [280, 210, 210])
        np.testing.assert_allclose(m.sum(axis=1), [400, 300], atol=1e-6)
        np.testing.assert_allclose(m.sum(axis=0), [280, 210, 210], atol=1e-6)

    def test_consistent_seed_is_a_fixed_point(self):
        m, it = expected_cells_ipf([[0.7, 0.3], [0.2, 0.8]], [400, 300], [340, 360], return_iterations=True)
        assert it == 0
        np.testing.assert_allclose(m, [[280, 120], [60, 240]])

    def test_independence_seed(self):
        m = expected_cells_ipf([[0.5, 0.5], [0.5, 0.5]], [6, 4], [3, 7])
        np.testing.assert_allclose(m, np.outer([6, 4], [3, 7]) / 10, atol=1e-7)
        np.testing.assert_allclose(m, exact_expected_cells([[0.5, 0.5], [0.5, 0.5]], [6, 4], [3, 7]), atol=1e-7)

    def test_permutation_invariance(self):
        pi = np.array([[0.6, 0.3, 0.1], [0.2, 0.3, 0.5]])
        n, y = np.array([400, 300]), np.array([280, 210, 210])
        m = expected_cells_ipf(pi, n, y)
        pr, pc = [1, 0], [2, 0, 1]
        mp = expected_cells_ipf(pi[pr][:, pc], n[pr], y[pc])
        np.testing.assert_allclose(mp, m[pr][:, pc], atol=1e-6)

    def test_zero_margins(self):
        m = expected_cells_ipf([[0.6, 0.4], [0.3, 0.7]], [0, 10], [4, 6])
        assert np.all(m[0] == 0)
        np.testing.assert_allclose(m[1], [4, 6])
        m = expected_cells_ipf([[0.6, 0.4], [0.3, 0.7]], [5, 5], [0, 10])
        assert np.all(m[:, 0] == 0)

    def test_errors(self):
        with pytest.raises(ModelError, match="disagree"):
            expected_cells_ipf([[0.5, 0.5]], [10], [4, 5])
        with pytest.raises(ModelError, match="no admissible"):
            expected_cells_ipf([[1.0, 0.0], [1.0, 0.0]], [5, 5], [4, 6])
        with pytest.raises(ModelError):
            expected_cells_ipf([[0.5, 0.5]], [10, 3], [5, 8])
