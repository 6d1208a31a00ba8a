"""Tests for three-level dynamics, protocol simulation, and rate extraction."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvrelax.core import DEFAULT_SEED
from nvrelax.dynamics import (
    DecayCurve,
    ProtocolSpec,
    RateMatrix,
    difference_curve,
    evolve,
    extract_rates,
    simulate_experiment,
    to_rate_measurement,
)

RATES = st.floats(min_value=1e-2, max_value=1e3, allow_nan=False)


class TestRateMatrix:
    def test_rejects_negative_rates(self):
        with pytest.raises(ValueError, match="nonnegative"):
            RateMatrix(-1.0, 10.0)
        with pytest.raises(ValueError, match="nonnegative"):
            RateMatrix(10.0, -1.0)

    def test_generator_structure(self):
        g = RateMatrix(60.0, 128.0).generator
        assert g[1, 0] == g[2, 0] == g[0, 1] == g[0, 2] == 60.0
        assert g[2, 1] == g[1, 2] == 128.0
        assert g[0, 0] == -120.0
        assert g[1, 1] == g[2, 2] == -188.0

    def test_columns_sum_to_zero(self):
        g = RateMatrix(3.7, 11.2).generator
        np.testing.assert_allclose(g.sum(axis=0), 0.0, atol=1e-12)

    def test_eigenvalues_over_random_draws(self):
        # spectrum {0, -3 Omega, -(Omega + 2 gamma)} to 1e-10 across 100
        # draws spanning five decades
        rng = np.random.default_rng(7)
        for _ in range(100):
            w, g = 10 ** rng.uniform(-2, 3, 2)
            m = RateMatrix(w, g)
            computed = np.sort(np.linalg.eigvals(m.generator).real)
            expected = np.sort(m.eigenvalues)
            scale = max(abs(expected[0]), 1.0)
            assert np.max(np.abs(computed - expected)) / scale < 1e-10

    @given(w=RATES, g=RATES)
    @settings(max_examples=50, deadline=None)
    def test_detailed_balance_at_stationarity(self, w, g):
        # uniform stationary state: every pairwise flow cancels
        gen = RateMatrix(w, g).generator
        pi = np.full(3, 1.0 / 3.0)
        for i in range(3):
            for j in range(3):
                if i != j:
                    assert gen[i, j] * pi[j] == pytest.approx(gen[j, i] * pi[i], rel=1e-12)


class TestEvolve:
    def test_zero_time_is_identity(self):
        for state, idx in (("0", 0), ("-1", 1), ("+1", 2)):
            p = evolve(RateMatrix(60.0, 128.0), state, 0.0)
            expected = np.zeros(3)
            expected[idx] = 1.0
            np.testing.assert_array_equal(p, expected)

    def test_long_time_reaches_uniform(self):
        p = evolve(RateMatrix(60.0, 128.0), "+1", 1e9)
        np.testing.assert_allclose(p, 1.0 / 3.0, atol=1e-12)

    def test_known_difference_at_one_millisecond(self):
        p = evolve(RateMatrix(60.0, 128.0), "+1", 1e-3)
        # Omega + 2 gamma = 316 /s, so the +-1 contrast is exp(-0.316)
        assert p[2] - p[1] == pytest.approx(math.exp(-0.316), abs=1e-15)

    def test_array_tau_shape(self):
        taus = np.linspace(0.0, 0.01, 7)
        p = evolve(RateMatrix(60.0, 128.0), "0", taus)
        assert p.shape == (7, 3)
        np.testing.assert_array_equal(p[0], [1.0, 0.0, 0.0])

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            evolve(RateMatrix(60.0, 128.0), "0", -1e-6)

    def test_unknown_state_rejected(self):
        with pytest.raises(ValueError, match="unknown spin state"):
            evolve(RateMatrix(60.0, 128.0), "2", 0.0)

    def test_integer_state_labels_accepted(self):
        p_int = evolve(RateMatrix(60.0, 128.0), -1, 1e-3)
        p_str = evolve(RateMatrix(60.0, 128.0), "-1", 1e-3)
        np.testing.assert_array_equal(p_int, p_str)

    @given(w=RATES, g=RATES, tau=st.floats(min_value=0.0, max_value=100.0),
           state=st.sampled_from(["0", "-1", "+1"]))
    @settings(max_examples=100, deadline=None)
    def test_conservation_and_positivity(self, w, g, tau, state):
        p = evolve(RateMatrix(w, g), state, tau)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p >= -1e-15)


class TestDifferenceCurve:
    TAUS = np.linspace(0.0, 0.02, 40)

    def test_zero_init_pair_matches_exponential(self):
        rm = RateMatrix(60.0, 128.0)
        for partner in ("-1", "+1"):
            d = difference_curve(rm, "0", ("0", partner), self.TAUS)
            np.testing.assert_allclose(d, np.exp(-180.0 * self.TAUS), atol=1e-12)

    def test_plus_one_init_matches_exponential(self):
        rm = RateMatrix(60.0, 128.0)
        d = difference_curve(rm, "+1", ("+1", "-1"), self.TAUS)
        np.testing.assert_allclose(d, np.exp(-316.0 * self.TAUS), atol=1e-12)

    def test_minus_one_init_matches_exponential(self):
        rm = RateMatrix(60.0, 128.0)
        d = difference_curve(rm, "-1", ("-1", "+1"), self.TAUS)
        np.testing.assert_allclose(d, np.exp(-316.0 * self.TAUS), atol=1e-12)

    def test_zero_gamma_decays_at_omega_exactly(self):
        d = difference_curve(RateMatrix(75.0, 0.0), "+1", ("+1", "-1"), self.TAUS)
        np.testing.assert_allclose(d, np.exp(-75.0 * self.TAUS), atol=1e-14)

    def test_zero_rates_stay_constant(self):
        d = difference_curve(RateMatrix(0.0, 0.0), "0", ("0", "-1"), self.TAUS)
        np.testing.assert_array_equal(d, 1.0)

    def test_unsupported_pairing_lists_supported(self):
        with pytest.raises(ValueError, match="supported pairings"):
            difference_curve(RateMatrix(60.0, 128.0), "0", ("+1", "-1"), self.TAUS)
        with pytest.raises(ValueError, match="supported pairings"):
            difference_curve(RateMatrix(60.0, 128.0), "+1", ("+1", "0"), self.TAUS)

    def test_identical_pair_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            difference_curve(RateMatrix(60.0, 128.0), "0", ("0", "0"), self.TAUS)

    @given(w=RATES, g=RATES)
    @settings(max_examples=50, deadline=None)
    def test_both_branches_are_pure_exponentials(self, w, g):
        rm = RateMatrix(w, g)
        taus = np.linspace(0.0, 2.5 / max(3 * w, w + 2 * g), 9)
        d1 = difference_curve(rm, "0", ("0", "-1"), taus)
        d2 = difference_curve(rm, "+1", ("+1", "-1"), taus)
        np.testing.assert_allclose(d1, np.exp(-3 * w * taus), atol=1e-12)
        np.testing.assert_allclose(d2, np.exp(-(w + 2 * g) * taus), atol=1e-12)


class TestProtocolSpec:
    def test_shot_count_bound(self):
        with pytest.raises(ValueError, match="shot count"):
            ProtocolSpec(shots=0)

    def test_fidelity_bounds(self):
        for bad in (0.0, -0.2, 1.5):
            with pytest.raises(ValueError, match="fidelity"):
                ProtocolSpec(shots=100, readout_fidelity=bad)

    def test_tau_grid_validation(self):
        with pytest.raises(ValueError, match="nonempty"):
            ProtocolSpec(shots=100, tau_grid=())
        with pytest.raises(ValueError, match="nonnegative"):
            ProtocolSpec(shots=100, tau_grid=(-1e-3, 1e-3))
        with pytest.raises(ValueError, match="ascending"):
            ProtocolSpec(shots=100, tau_grid=(1e-3, 1e-3))

    def test_effective_shots_scale_with_fidelity_squared(self):
        assert ProtocolSpec(shots=1000).effective_shots == 1000
        assert ProtocolSpec(shots=1000, readout_fidelity=0.5).effective_shots == 250
        assert ProtocolSpec(shots=None).effective_shots is None

    def test_auto_grid_needs_enough_points(self):
        with pytest.raises(ValueError, match="n_tau"):
            ProtocolSpec(shots=100, n_tau=2)


class TestSimulateExperiment:
    RM = RateMatrix(60.0, 128.0)

    def test_fixed_seed_is_bit_identical(self):
        spec = ProtocolSpec(shots=1000)
        assert simulate_experiment(self.RM, spec, seed=42) == \
            simulate_experiment(self.RM, spec, seed=42)

    def test_different_seeds_differ(self):
        spec = ProtocolSpec(shots=1000)
        a = simulate_experiment(self.RM, spec, seed=1)
        b = simulate_experiment(self.RM, spec, seed=2)
        assert a.omega_branch.values != b.omega_branch.values

    def test_noise_free_values_are_exact(self):
        sim = simulate_experiment(self.RM, ProtocolSpec(shots=None))
        taus = np.asarray(sim.omega_branch.tau_grid)
        np.testing.assert_allclose(sim.omega_branch.values,
                                   np.exp(-180.0 * taus), atol=1e-14)

    def test_large_shot_count_converges_within_three_sigma(self):
        sim = simulate_experiment(self.RM, ProtocolSpec(shots=10_000_000),
                                  seed=DEFAULT_SEED)
        est = extract_rates(sim.omega_branch, sim.gamma_branch)
        assert abs(est.omega - 60.0) < 3.0 * est.omega_err
        assert abs(est.gamma - 128.0) < 3.0 * est.gamma_err
        assert est.omega == pytest.approx(60.0, rel=1e-3)
        assert est.gamma == pytest.approx(128.0, rel=1e-3)

    def test_zero_rates_require_explicit_grid(self):
        with pytest.raises(ValueError, match="tau_grid"):
            simulate_experiment(RateMatrix(0.0, 0.0), ProtocolSpec(shots=100))

    def test_simulated_errors_are_positive(self):
        sim = simulate_experiment(self.RM, ProtocolSpec(shots=50), seed=3)
        assert all(e > 0 for e in sim.omega_branch.errors)
        assert all(e > 0 for e in sim.gamma_branch.errors)

    def test_lower_fidelity_inflates_errors(self):
        crisp = simulate_experiment(self.RM, ProtocolSpec(shots=4000), seed=5)
        fuzzy = simulate_experiment(
            self.RM, ProtocolSpec(shots=4000, readout_fidelity=0.5), seed=5)
        assert np.mean(fuzzy.omega_branch.errors) > \
            1.5 * np.mean(crisp.omega_branch.errors)


class TestExtractRates:
    TAUS = tuple(np.linspace(0.0, 0.012, 25))

    @staticmethod
    def _exact_curves(r1: float, r2: float, taus):
        taus = np.asarray(taus)
        ones = tuple(np.ones_like(taus))
        c1 = DecayCurve("0", ("0", "-1"), tuple(taus),
                        tuple(np.exp(-r1 * taus)), ones)
        c2 = DecayCurve("+1", ("+1", "-1"), tuple(taus),
                        tuple(np.exp(-r2 * taus)), ones)
        return c1, c2

    def test_noise_free_round_trip(self):
        # simulate with the noise model off, then invert; recovery must be
        # far inside 1e-9 relative
        sim = simulate_experiment(RateMatrix(60.0, 128.0), ProtocolSpec(shots=None))
        est = extract_rates(sim.omega_branch, sim.gamma_branch)
        assert abs(est.omega - 60.0) / 60.0 < 1e-9
        assert abs(est.gamma - 128.0) / 128.0 < 1e-9

    def test_decay_constant_inversion(self):
        c1, c2 = self._exact_curves(180.0, 316.0, self.TAUS)
        est = extract_rates(c1, c2)
        assert est.omega == pytest.approx(60.0, abs=1e-9)
        assert est.gamma == pytest.approx(128.0, abs=1e-9)
        assert est.r1 == pytest.approx(180.0, abs=1e-9)
        assert est.r2 == pytest.approx(316.0, abs=1e-9)

    def test_one_percent_noise_recovers_within_reported_errors(self):
        rng = np.random.default_rng(DEFAULT_SEED)
        t1 = np.linspace(0.0, 2.5 / 180.0, 20)
        t2 = np.linspace(0.0, 2.5 / 316.0, 20)
        errs = tuple(np.full(20, 0.01))
        c1 = DecayCurve("0", ("0", "-1"), tuple(t1),
                        tuple(np.exp(-180.0 * t1) + 0.01 * rng.standard_normal(20)),
                        errs)
        c2 = DecayCurve("+1", ("+1", "-1"), tuple(t2),
                        tuple(np.exp(-316.0 * t2) + 0.01 * rng.standard_normal(20)),
                        errs)
        est = extract_rates(c1, c2)
        assert abs(est.omega - 60.0) < est.omega_err
        assert abs(est.gamma - 128.0) < est.gamma_err

    def test_negative_gamma_is_flagged_not_raised(self):
        taus = np.asarray(self.TAUS)
        ones = tuple(np.ones_like(taus))
        c1, _ = self._exact_curves(180.0, 316.0, self.TAUS)
        slow = DecayCurve("+1", ("+1", "-1"), tuple(taus),
                          tuple(np.exp(-40.0 * taus)), ones)
        est = extract_rates(c1, slow)
        assert est.gamma_negative
        assert est.gamma == pytest.approx(-10.0, abs=1e-6)

    def test_branch_roles_are_checked(self):
        c1, c2 = self._exact_curves(180.0, 316.0, self.TAUS)
        with pytest.raises(ValueError, match="init"):
            extract_rates(c2, c2)
        with pytest.raises(ValueError, match=r"\+1|-1"):
            extract_rates(c1, c1)

    def test_error_propagation_combines_both_fits(self):
        spec = ProtocolSpec(shots=10_000)
        sim = simulate_experiment(RateMatrix(60.0, 128.0), spec, seed=11)
        est = extract_rates(sim.omega_branch, sim.gamma_branch)
        assert est.omega_err == pytest.approx(est.r1_err / 3.0, rel=1e-12)
        expected = math.sqrt(est.r2_err**2 + est.omega_err**2) / 2.0
        assert est.gamma_err == pytest.approx(expected, rel=1e-12)

    def test_measurement_row_round_trip(self):
        sim = simulate_experiment(RateMatrix(60.0, 128.0),
                                  ProtocolSpec(shots=100_000), seed=0)
        est = extract_rates(sim.omega_branch, sim.gamma_branch)
        row = to_rate_measurement(est, temperature=295.0)
        assert row.temperature == 295.0
        assert row.omega == est.omega
        assert row.gamma_err == est.gamma_err
        assert row.nv_id == "SIM"

    def test_measurement_row_refuses_negative_rates(self):
        taus = np.asarray(self.TAUS)
        ones = tuple(np.ones_like(taus))
        c1, _ = self._exact_curves(180.0, 316.0, self.TAUS)
        slow = DecayCurve("+1", ("+1", "-1"), tuple(taus),
                          tuple(np.exp(-40.0 * taus)), ones)
        est = extract_rates(c1, slow)
        with pytest.raises(ValueError, match="negative rate"):
            to_rate_measurement(est, temperature=295.0)


class TestMonteCarloCalibration:
    """End-to-end calibration: simulate, extract, compare against truth.

    Quoted errors are one-standard-error bars, so truth can only fall
    inside them about 68% of the time for a calibrated estimator; the
    95%-of-seeds requirement is therefore checked at two standard errors,
    the conventional 95%-confidence reading.
    """

    def test_hundred_seed_coverage(self):
        truth = RateMatrix(60.0, 128.0)
        spec = ProtocolSpec(shots=100_000)
        pulls_w, pulls_g = [], []
        for seed in range(100):
            sim = simulate_experiment(truth, spec, seed=seed)
            est = extract_rates(sim.omega_branch, sim.gamma_branch)
            pulls_w.append((est.omega - 60.0) / est.omega_err)
            pulls_g.append((est.gamma - 128.0) / est.gamma_err)
        pulls_w = np.asarray(pulls_w)
        pulls_g = np.asarray(pulls_g)
        # >= 95 of 100 seeds within two quoted standard errors
        assert np.sum(np.abs(pulls_w) <= 2.0) >= 95
        assert np.sum(np.abs(pulls_g) <= 2.0) >= 95
        # unbiased to well under half an error bar
        assert abs(pulls_w.mean()) < 0.35
        assert abs(pulls_g.mean()) < 0.35
        # pull spread near 1; the smoothed binomial variance is slightly
        # conservative near tau = 0, so the lower bound sits below 1
        assert 0.6 < pulls_w.std() < 1.25
        assert 0.6 < pulls_g.std() < 1.25
