import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otflow.core import JointDataset, NumericsError, RngState, ValidationError
from otflow.baselines import (
    Chain,
    McmcConfig,
    closest_to_mean,
    energy_distance,
    energy_permutation_test,
    kde_pdf_1d,
    l1_grid_error,
    lscv_bandwidth,
    nw_ckde,
    nw_conditional_weights,
    rw_metropolis,
)
from otflow.features import silverman_bandwidths

PHI_0 = 0.3989422804014327  # standard normal density at zero


class TestMcmcConfig:
    def test_defaults_are_valid(self):
        McmcConfig()

    def test_validation(self):
        with pytest.raises(ValidationError):
            McmcConfig(steps=0)
        with pytest.raises(ValidationError):
            McmcConfig(steps=10, burn_in=10)
        with pytest.raises(ValidationError):
            McmcConfig(proposal_std=0.0)
        with pytest.raises(ValidationError):
            McmcConfig(proposal_std=(0.1, -0.1))


def log_std_normal(x):
    return -0.5 * float(x @ x)


class TestRwMetropolis:
    def test_recovers_standard_normal(self):
        cfg = McmcConfig(steps=20_000, burn_in=2_000, proposal_std=1.0,
                         init=np.zeros(1), seed=4)
        chain = rw_metropolis(log_std_normal, cfg)
        assert chain.samples.shape == (18_000, 1)
        assert chain.samples.mean() == pytest.approx(0.0, abs=0.06)
        assert chain.samples.std(ddof=1) == pytest.approx(1.0, abs=0.06)
        assert 0.2 < chain.acceptance_rate < 0.9

    def test_deterministic_given_seed(self):
        cfg = McmcConfig(steps=500, burn_in=100, proposal_std=0.7,
                         init=np.array([0.3, -0.2]), seed=9)
        a = rw_metropolis(log_std_normal, cfg)
        b = rw_metropolis(log_std_normal, cfg)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert a.acceptance_rate == b.acceptance_rate

    def test_per_coordinate_proposal_std(self):
        cfg = McmcConfig(steps=4_000, burn_in=500, proposal_std=(1.0, 0.05),
                         init=np.zeros(2), seed=2)
        chain = rw_metropolis(log_std_normal, cfg)
        moves = np.abs(np.diff(chain.samples, axis=0))
        moved = moves[moves[:, 0] > 0]  # accepted transitions
        assert moved[:, 0].mean() > 5 * moved[:, 1].mean()

    def test_log_densities_track_states(self):
        cfg = McmcConfig(steps=300, burn_in=50, proposal_std=0.8,
                         init=np.zeros(1), seed=1)
        chain = rw_metropolis(log_std_normal, cfg)
        expect = np.array([log_std_normal(s) for s in chain.samples])
        np.testing.assert_allclose(chain.log_densities, expect, rtol=1e-12)

    def test_requires_init(self):
        with pytest.raises(ValidationError):
            rw_metropolis(log_std_normal, McmcConfig(init=None))

    def test_rejects_zero_density_init(self):
        cfg = McmcConfig(init=np.array([0.0]))
        with pytest.raises(ValidationError):
            rw_metropolis(lambda x: -math.inf, cfg)

    def test_duplicates_mark_rejections(self):
        cfg = McmcConfig(steps=2_000, burn_in=0, proposal_std=8.0,
                         init=np.zeros(1), seed=3)
        chain = rw_metropolis(log_std_normal, cfg)
        dup = np.mean(np.all(chain.samples[1:] == chain.samples[:-1], axis=1))
        assert dup == pytest.approx(1.0 - chain.acceptance_rate, abs=0.02)
        assert isinstance(chain, Chain)


def tight_joint(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = 0.5 * x**2 - 1.0 + rng.standard_normal(n)
    return JointDataset(np.column_stack([y, x]), 1, 1)


class TestNwWeights:
    def test_equidistant_rows_share_weight(self):
        joint = JointDataset(np.array([[0.0, -1.0], [2.0, 1.0]]), 1, 1)
        w = nw_conditional_weights(joint, np.array([1.0]), bw_y=0.5)
        np.testing.assert_allclose(w, [0.5, 0.5])

    def test_weights_sum_to_one_and_order(self):
        joint = tight_joint()
        w = nw_conditional_weights(joint, np.array([2.0]))
        assert w.sum() == pytest.approx(1.0, rel=1e-12)
        near = np.abs(joint.y[:, 0] - 2.0).argmin()
        far = np.abs(joint.y[:, 0] - 2.0).argmax()
        assert w[near] > w[far]

    def test_remote_y_star_rejected(self):
        joint = tight_joint()
        with pytest.raises(NumericsError):
            nw_conditional_weights(joint, np.array([1e6]), bw_y=1.0)

    def test_validation(self):
        joint = tight_joint()
        with pytest.raises(ValidationError):
            nw_conditional_weights(joint, np.array([0.0, 1.0]))
        with pytest.raises(ValidationError):
            nw_conditional_weights(joint, np.array([0.0]), bw_y=-1.0)


class TestNwCkde:
    def test_single_row_reduces_to_kernel(self):
        # one joint row with x = 0: the estimate is exactly the x kernel
        joint = JointDataset(np.array([[0.0, 0.0], [100.0, 5.0]]), 1, 1)
        grid = np.array([0.0, 1.0])
        dens = nw_ckde(joint, np.array([0.0]), grid, bw_y=0.1, bw_x=1.0)
        assert dens[0] == pytest.approx(PHI_0, rel=1e-10)
        assert dens[1] == pytest.approx(PHI_0 * math.exp(-0.5), rel=1e-10)

    def test_integrates_to_one(self):
        joint = tight_joint()
        grid = np.linspace(-8, 8, 2001)
        dens = nw_ckde(joint, np.array([2.0]), grid)
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-6)

    def test_bimodal_at_high_y(self):
        joint = tight_joint(n=4000, seed=3)
        grid = np.linspace(-4, 4, 401)
        dens = nw_ckde(joint, np.array([2.0]), grid)
        mid = 200
        left_peak = dens[:mid].max()
        right_peak = dens[mid:].max()
        assert min(left_peak, right_peak) > 1.3 * dens[mid]

    def test_needs_scalar_x(self):
        joint = JointDataset(np.zeros((4, 3)) + np.arange(4)[:, None], 1, 2)
        with pytest.raises(ValidationError):
            nw_ckde(joint, np.array([0.0]), np.linspace(-1, 1, 5))


class TestKde1d:
    def test_matches_normal_density_formula(self):
        x = np.array([0.0])
        dens = kde_pdf_1d(x, np.array([0.0, 1.0]), bandwidth=1.0)
        assert dens[0] == pytest.approx(PHI_0, rel=1e-12)
        assert dens[1] == pytest.approx(PHI_0 * math.exp(-0.5), rel=1e-12)

    def test_integrates_to_one(self):
        x = np.random.default_rng(7).standard_normal(300)
        grid = np.linspace(-10, 10, 4001)
        dens = kde_pdf_1d(x, grid, bandwidth=0.4)
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-6)

    def test_rejects_bad_bandwidth(self):
        with pytest.raises(ValidationError):
            kde_pdf_1d(np.zeros(20), np.linspace(-1, 1, 5), bandwidth=0.0)


class TestLscvBandwidth:
    def test_within_candidate_range(self):
        x = np.random.default_rng(1).standard_normal(200)
        h = lscv_bandwidth(x)
        h_s = float(silverman_bandwidths(x[:, None])[0])
        assert 0.1 * h_s <= h <= 1.5 * h_s

    def test_bimodal_sample_gets_smaller_bandwidth(self):
        rng = np.random.default_rng(2)
        x = np.concatenate([rng.normal(-3, 0.3, 300), rng.normal(3, 0.3, 300)])
        h = lscv_bandwidth(x)
        h_s = float(silverman_bandwidths(x[:, None])[0])
        assert h < 0.5 * h_s

    def test_needs_ten_samples(self):
        with pytest.raises(ValidationError):
            lscv_bandwidth(np.arange(5.0))


class TestL1GridError:
    def test_constant_gap(self):
        grid = np.linspace(0.0, 1.0, 11)
        f = np.ones(11)
        g = np.zeros(11)
        assert l1_grid_error(f, g, grid) == pytest.approx(1.0, rel=1e-12)

    def test_zero_for_equal(self):
        grid = np.linspace(0.0, 2.0, 21)
        f = np.sin(grid)
        assert l1_grid_error(f, f, grid) == 0.0

    def test_validation(self):
        grid = np.linspace(0.0, 1.0, 5)
        with pytest.raises(ValidationError):
            l1_grid_error(np.ones(4), np.ones(5), grid)
        with pytest.raises(ValidationError):
            l1_grid_error(np.ones(5), np.ones(5), grid[::-1])


class TestEnergyDistance:
    def test_point_masses(self):
        # 2 E|A-B| - E|A-A'| - E|B-B'| = 2*1 - 0 - 0 for degenerate samples
        a = np.zeros((3, 1))
        b = np.ones((2, 1))
        assert energy_distance(a, b) == pytest.approx(2.0, rel=1e-12)

    def test_identical_samples_give_zero(self):
        pts = np.random.default_rng(0).normal(size=(40, 2))
        assert energy_distance(pts, pts) == pytest.approx(0.0, abs=1e-12)

    def test_symmetry_and_positivity(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(60, 2))
        b = rng.normal(size=(50, 2)) + 0.5
        d_ab = energy_distance(a, b)
        d_ba = energy_distance(b, a)
        assert d_ab == pytest.approx(d_ba, rel=1e-12)
        assert d_ab > 0

    def test_grows_with_separation(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(80, 1))
        near = energy_distance(a, rng.normal(size=(80, 1)) + 0.2)
        far = energy_distance(a, rng.normal(size=(80, 1)) + 3.0)
        assert far > near

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            energy_distance(np.zeros((3, 1)), np.zeros((3, 2)))


class TestEnergyPermutationTest:
    def test_same_distribution_passes(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(150, 2))
        b = rng.normal(size=(150, 2))
        res = energy_permutation_test(a, b, n_permutations=100, seed=0)
        assert res["below_threshold"]
        assert res["statistic"] < res["threshold"]

    def test_shifted_distribution_fails(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(150, 2))
        b = rng.normal(size=(150, 2)) + 2.0
        res = energy_permutation_test(a, b, n_permutations=100, seed=0)
        assert not res["below_threshold"]
        assert res["statistic"] > res["threshold"]

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(80, 1))
        b = rng.normal(size=(90, 1))
        r1 = energy_permutation_test(a, b, n_permutations=50, seed=7)
        r2 = energy_permutation_test(a, b, n_permutations=50, seed=7)
        assert r1 == r2

    def test_subsampling_large_sides(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(500, 1))
        b = rng.normal(size=(120, 1))
        res = energy_permutation_test(a, b, n_permutations=30, max_side=100, seed=1)
        assert res["below_threshold"]

    def test_validation(self):
        a = np.zeros((10, 1))
        with pytest.raises(ValidationError):
            energy_permutation_test(a, a, quantile=1.0)
        with pytest.raises(ValidationError):
            energy_permutation_test(a, a, n_permutations=0)


class TestClosestToMean:
    def test_picks_nearest_rows(self):
        samples = np.array([[0.0], [10.0], [1.0], [-1.0]])
        # mean 2.5; distances 2.5, 7.5, 1.5, 3.5
        idx = closest_to_mean(samples, count=2)
        np.testing.assert_array_equal(idx, [2, 0])

    def test_count_validation(self):
        with pytest.raises(ValidationError):
            closest_to_mean(np.zeros((3, 1)), count=4)
        with pytest.raises(ValidationError):
            closest_to_mean(np.zeros((3, 1)), count=0)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 5000), count=st.integers(1, 10))
    def test_returned_distances_are_minimal(self, seed, count):
        samples = np.random.default_rng(seed).normal(size=(25, 3))
        idx = closest_to_mean(samples, count=count)
        dist = np.linalg.norm(samples - samples.mean(axis=0), axis=1)
        chosen = np.sort(dist[idx])
        others = np.sort(np.delete(dist, idx))
        assert chosen[-1] <= others[0] + 1e-12
