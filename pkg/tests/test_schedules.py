import json
import math

import numpy as np
import pytest
from scipy.integrate import quad

from ddpmlab.schedules import (
    Schedule,
    StepCoefficients,
    eta,
    make_two_phase,
    make_uniform,
    sigma,
    sigma_sq,
    step_coeffs,
)


def random_schedule(rng):
    """Arbitrary strictly increasing grid with T in [2,8], delta in [1e-3,0.5]."""
    T = rng.uniform(2.0, 8.0)
    delta = math.exp(rng.uniform(math.log(1e-3), math.log(0.5)))
    N = int(rng.integers(2, 513))
    interior = np.sort(rng.uniform(0.0, T - delta, size=N - 1))
    times = np.concatenate([[0.0], interior, [T - delta, T]])
    if np.any(np.diff(times) <= 0):  # re-draw on (measure-zero) ties
        return random_schedule(rng)
    return Schedule.from_times(times)


class TestSigmaEta:
    def test_sigma_at_zero(self):
        assert sigma(0.0) == 0.0

    def test_sigma_stationary_limit(self):
        assert sigma(50.0) > 1.0 - 1e-12

    def test_sigma_ln2(self):
        assert sigma(math.log(2.0)) == pytest.approx(math.sqrt(3.0) / 2.0, abs=1e-15)

    def test_sigma_rejects_negative(self):
        with pytest.raises(ValueError):
            sigma(-0.1)

    def test_sigma_monotone(self):
        t = np.linspace(0.0, 10.0, 400)
        assert np.all(np.diff(sigma(t)) > 0)

    def test_sigma_sq_near_zero_precision(self):
        # expm1 form: sigma_sq(t) ~ 2t without cancellation
        t = 1e-12
        assert sigma_sq(t) == pytest.approx(2e-12, rel=1e-9)

    def test_eta_ln2(self):
        assert eta(math.log(2.0)) == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_eta_large_t_asymptote(self):
        assert abs(eta(20.0) - math.exp(-20.0)) <= 1e-15

    def test_eta_small_t_series(self):
        # e^{-t}/(1-e^{-2t}) ~ 1/(2t) for small t
        assert abs(eta(0.01) - 50.0) / 50.0 < 0.01

    def test_eta_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            eta(0.0)
        with pytest.raises(ValueError):
            eta(-1.0)

    def test_eta_monotone_decreasing(self):
        t = np.linspace(0.01, 10.0, 400)
        assert np.all(np.diff(eta(t)) < 0)


class TestTwoPhase:
    def test_example_times(self):
        s = make_two_phase(3.0, 0.01, 4)
        np.testing.assert_allclose(s.times, [0.0, 1.0, 2.0, 2.9, 2.99, 3.0], atol=1e-12)

    def test_example_kappa(self):
        # enumerate all five interval/denominator pairs: 1/1, 1/1, 0.9/1, 0.09/0.1, 0.01/0.01
        s = make_two_phase(3.0, 0.01, 4)
        ratios = np.diff(s.times) / np.minimum(1.0, 3.0 - s.times[:-1])
        assert s.kappa == pytest.approx(max(ratios), abs=0)
        assert s.kappa == pytest.approx(1.0, abs=1e-12)
        assert s.kappa_sampling == pytest.approx(1.0, abs=1e-12)

    def test_kappa_sampling_matches_average_interval(self):
        # kappa_sampling ~ (T + log(1/delta))/N within a factor 3 once N >= 32
        rng = np.random.default_rng(11)
        for _ in range(50):
            T = rng.uniform(2.0, 8.0)
            delta = math.exp(rng.uniform(math.log(1e-3), math.log(0.5)))
            N = int(rng.choice([32, 64, 128, 256, 512]))
            s = make_two_phase(T, delta, N)
            predicted = (T + math.log(1.0 / delta)) / N
            assert predicted / 3.0 <= s.kappa_sampling <= predicted * 3.0

    def test_small_delta_kappa_attained_on_phase_boundary(self):
        # delta <= e^{-2(T-1)} makes the geometric phase the binding one
        T = 3.0
        delta = math.exp(-2.0 * (T - 1.0)) / 2.0
        s = make_two_phase(T, delta, 64)
        gaps = np.diff(s.times)[:64]
        tails = np.minimum(1.0, T - s.times[:64])
        n_star = int(np.argmax(gaps / tails))
        assert n_star >= 32  # geometric phase
        predicted = (T + math.log(1.0 / delta)) / 64
        assert predicted / 3.0 <= s.kappa_sampling <= predicted * 3.0

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            make_two_phase(3.0, 0.01, 5)   # odd N
        with pytest.raises(ValueError):
            make_two_phase(3.0, 1.5, 4)    # delta >= 1
        with pytest.raises(ValueError):
            make_two_phase(0.5, 0.01, 4)   # T <= 1


class TestUniform:
    def test_example_times(self):
        s = make_uniform(2.0, 0.5, 3)
        np.testing.assert_allclose(s.times, [0.0, 0.5, 1.0, 1.5, 2.0], atol=1e-15)

    def test_example_kappa(self):
        # ratios 0.5/1, 0.5/1, 0.5/1, 0.5/0.5 -> kappa = 1
        s = make_uniform(2.0, 0.5, 3)
        assert s.kappa == pytest.approx(1.0, abs=1e-15)
        assert s.kappa_sampling == pytest.approx(0.5, abs=1e-15)

    def test_kappa_never_below_one(self):
        # the final interval has length delta and denominator delta, so once
        # the uniform step (T-delta)/N drops below 1 the maximum is pinned at 1
        for N in (1, 7, 64, 4096):
            s = make_uniform(4.0, 0.25, N)
            assert s.kappa == pytest.approx(max(1.0, 3.75 / N), rel=1e-14)
        for N in (4, 64, 4096):
            assert make_uniform(4.0, 0.25, N).kappa == pytest.approx(1.0, abs=1e-14)

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            make_uniform(1.0, 2.0, 4)
        with pytest.raises(ValueError):
            make_uniform(2.0, 0.5, 0)


class TestStepCoefficients:
    def test_worked_example(self):
        # gap 0.1, tail 1.0, frozen from an independent scalar evaluation
        c = StepCoefficients.from_intervals(0.1, 1.0)
        assert c.drift_scale == pytest.approx(1.1051709180756477, rel=1e-14)
        assert c.score_weight == pytest.approx(0.2003335000396881, rel=1e-14)
        assert c.noise_std == pytest.approx(0.41831524517731294, rel=1e-12)
        assert c.sigma_sq == pytest.approx(1.0 - math.exp(-2.0), rel=1e-14)
        assert c.forward_time == 1.0

    def test_degenerate_interval_is_identity(self):
        c = StepCoefficients.from_intervals(0.0, 1.0)
        assert c.drift_scale == 1.0
        assert c.score_weight == 0.0
        assert c.noise_std == 0.0

    def test_index_bounds(self):
        s = make_two_phase(3.0, 0.01, 4)
        with pytest.raises(IndexError):
            step_coeffs(s, 4)
        with pytest.raises(IndexError):
            step_coeffs(s, -1)

    def test_product_identity(self):
        s = make_two_phase(5.0, 0.02, 64)
        np.testing.assert_allclose(
            s.alpha_bars[:-1], s.alphas * s.alpha_bars[1:], rtol=1e-14
        )

    def test_sigma_sq_equals_one_minus_alpha_bar(self):
        s = make_uniform(4.0, 0.1, 16)
        for n in range(s.N):
            c = step_coeffs(s, n)
            assert c.sigma_sq == pytest.approx(1.0 - s.alpha_bars[n], rel=1e-12)


def gamma_form_noise_std(schedule, n):
    """Noise std from the closed-form SDE solution, gamma_n^2 = alpha_bar_n."""
    g2 = schedule.alpha_bars
    return math.sqrt(
        (g2[n + 1] - g2[n]) * (1.0 - g2[n + 1]) / ((1.0 - g2[n]) * g2[n + 1])
    )


class TestCoefficientEquivalence:
    def test_dual_noise_forms_on_random_grids(self):
        # float evaluation of the gamma-form carries ~eps*abar/(abar_{n+1}-abar_n)
        # cancellation error on short intervals, so the float-vs-float check
        # runs at 1e-10; the exact-arithmetic comparison lives in
        # test_gamma_form_against_exact_arithmetic
        rng = np.random.default_rng(0)
        for _ in range(200):
            s = random_schedule(rng)
            for n in range(0, s.N, max(1, s.N // 16)):
                c = step_coeffs(s, n)
                alt = gamma_form_noise_std(s, n)
                assert abs(c.noise_std - alt) <= 1e-10 * alt

    def test_gamma_form_against_exact_arithmetic(self):
        # gamma-form evaluated in 40-digit arithmetic; the implementation's
        # noise std must match to 1e-12 relative
        import mpmath

        mpmath.mp.dps = 40
        rng = np.random.default_rng(1)
        for _ in range(50):
            s = random_schedule(rng)
            for n in rng.choice(s.N, size=min(4, s.N), replace=False):
                gap = mpmath.mpf(float(s.times[n + 1])) - mpmath.mpf(float(s.times[n]))
                tail = mpmath.mpf(float(s.T)) - mpmath.mpf(float(s.times[n]))
                g2n = mpmath.exp(-2 * tail)
                g2n1 = mpmath.exp(-2 * (tail - gap))
                exact = mpmath.sqrt((g2n1 - g2n) * (1 - g2n1) / ((1 - g2n) * g2n1))
                c = step_coeffs(s, int(n))
                assert abs(c.noise_std - float(exact)) <= 1e-12 * float(exact)

    def test_noise_std_matches_quadrature_of_weight(self):
        # the per-step noise variance equals int 2 eta(T-t)^2 dt over the
        # interval divided by eta(T-t_{n+1})^2 -- the exponential-integrator
        # solution of the frozen-score reverse SDE, checked by quadrature
        s = make_two_phase(4.0, 0.05, 8)
        for n in range(s.N):
            t0, t1 = s.times[n], s.times[n + 1]
            integral, _ = quad(lambda t: 2.0 * eta(s.T - t) ** 2, t0, t1, epsrel=1e-12)
            predicted = math.sqrt(integral) / eta(s.T - t1)
            c = step_coeffs(s, n)
            assert c.noise_std == pytest.approx(predicted, rel=1e-9)

    def test_drift_and_score_weight_match_weight_ratios(self):
        # drift_scale = eta-weighted carry gamma_{n+1}/gamma_n and
        # score_weight = (gamma_{n+1}^2 - gamma_n^2)/(gamma_n gamma_{n+1})
        s = make_uniform(5.0, 0.2, 12)
        g = np.sqrt(s.alpha_bars)
        for n in range(s.N):
            c = step_coeffs(s, n)
            assert c.drift_scale == pytest.approx(g[n + 1] / g[n], rel=1e-13)
            assert c.score_weight == pytest.approx(
                (g[n + 1] ** 2 - g[n] ** 2) / (g[n] * g[n + 1]), rel=1e-11
            )


class TestEtaRatioBound:
    def test_eta_ratio_bounded_for_small_kappa(self):
        # within any sampling interval, eta(T-t)/eta(T-t_n) stays below
        # e^kappa/(1-kappa) evaluated at kappa = 0.9, i.e. about 24.6
        rng = np.random.default_rng(42)
        checked = 0
        while checked < 40:
            T = rng.uniform(2.0, 8.0)
            delta = math.exp(rng.uniform(math.log(1e-3), math.log(0.5)))
            N = int(rng.choice([32, 64, 128, 256]))
            s = make_two_phase(T, delta, N)
            if s.kappa_sampling > 0.9:
                continue
            checked += 1
            for n in range(s.N):
                t = np.linspace(s.times[n], s.times[n + 1], 64, endpoint=False)[1:]
                ratio = eta(s.T - t) / eta(s.T - s.times[n])
                assert np.all(ratio <= 25.0)


class TestSerialization:
    def test_roundtrip(self):
        s = make_two_phase(5.0, 0.03, 32)
        s2 = Schedule.from_json(s.to_json())
        np.testing.assert_array_equal(s.times, s2.times)
        assert s2.kappa == s.kappa
        assert s2.kappa_sampling == s.kappa_sampling

    def test_header_tamper_rejected(self):
        s = make_uniform(3.0, 0.1, 8)
        payload = s.to_dict()
        payload["delta"] = 0.2
        with pytest.raises(ValueError):
            Schedule.from_dict(payload)
        payload = s.to_dict()
        payload["N"] = 9
        with pytest.raises(ValueError):
            Schedule.from_dict(payload)

    def test_bad_grids_rejected(self):
        with pytest.raises(ValueError):
            Schedule.from_times([0.0, 1.0, 1.0, 2.0])
        with pytest.raises(ValueError):
            Schedule.from_times([0.1, 1.0, 2.0])
        with pytest.raises(ValueError):
            Schedule.from_times([0.0, 2.0])

    def test_kappa_recomputation_matches(self):
        s = make_two_phase(6.0, 0.01, 64)
        gaps = np.diff(s.times)
        ratios = gaps / np.minimum(1.0, s.T - s.times[:-1])
        assert s.kappa == float(ratios.max())
