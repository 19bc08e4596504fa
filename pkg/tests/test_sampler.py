import json
import math

import numpy as np
import pytest

from ddpmlab.sampler import (
    SampleBatch,
    SamplerError,
    ddpm_step,
    run_batch,
    run_chain,
    variant_coeffs,
)
from ddpmlab.schedules import StepCoefficients, make_two_phase, step_coeffs
from ddpmlab.targets import ExactScoreOracle, PointCloud, SubspaceGaussian, make_point_cloud


class TestDdpmStep:
    def test_pure_rescale(self):
        c = StepCoefficients.from_intervals(0.1, 1.0)
        y = np.array([1.0, -2.0])
        out = ddpm_step(y, np.zeros(2), c, np.zeros(2))
        np.testing.assert_allclose(out, y * math.exp(0.1), rtol=1e-14)

    def test_point_mass_worked_example(self):
        # independent scalar recomputation: alpha = e^{-0.2}, abar = e^{-2},
        # exact score of the point mass at the query y = e_1
        c = StepCoefficients.from_intervals(0.1, 1.0)
        s2 = 1.0 - math.exp(-2.0)
        y = np.array([1.0, 0.0, 0.0])
        s_hat = -y / s2
        out = ddpm_step(y, s_hat, c, np.zeros(3))
        alpha = math.exp(-0.2)
        expected = (1.0 / math.sqrt(alpha)) * (1.0 + (1.0 - alpha) * (-1.0 / s2))
        assert expected == pytest.approx(0.8734816908459575, rel=1e-12)
        np.testing.assert_allclose(out, [expected, 0.0, 0.0], rtol=1e-12)

    def test_zero_length_step_is_identity(self):
        c = StepCoefficients.from_intervals(0.0, 1.0)
        y = np.array([0.3, 0.7])
        out = ddpm_step(y, np.array([5.0, -5.0]), c, np.array([1.0, 1.0]))
        np.testing.assert_array_equal(out, y)

    def test_rejects_non_finite(self):
        c = StepCoefficients.from_intervals(0.1, 1.0)
        with pytest.raises(ValueError):
            ddpm_step(np.array([np.nan]), np.zeros(1), c, np.zeros(1))
        with pytest.raises(ValueError):
            ddpm_step(np.zeros(1), np.array([np.inf]), c, np.zeros(1))

    def test_shape_mismatch(self):
        c = StepCoefficients.from_intervals(0.1, 1.0)
        with pytest.raises(ValueError):
            ddpm_step(np.zeros(2), np.zeros(3), c, np.zeros(2))


class TestVariants:
    def test_ddpm_coefficients_bit_identical(self):
        s = make_two_phase(4.0, 0.02, 16)
        for n in (0, 5, 15):
            a, b = variant_coeffs(s, n, "ddpm"), step_coeffs(s, n)
            assert a == b

    def test_unknown_variant(self):
        s = make_two_phase(4.0, 0.02, 16)
        with pytest.raises(ValueError):
            variant_coeffs(s, 0, "midpoint")

    def test_first_order_agreement_on_shrinking_intervals(self):
        # coefficient gaps must shrink like interval^2: halving the interval
        # divides the difference by about 4
        tail = 1.5

        def diffs(gap):
            c = StepCoefficients.from_intervals(gap, tail)
            alt_noise_var = -math.expm1(-2.0 * gap)
            alt_drift = 2.0 - math.exp(-gap)
            return (
                abs(alt_noise_var - c.noise_var),
                abs(alt_drift - c.drift_scale),
            )

        for h in (0.2, 0.1, 0.05, 0.025):
            big, small = diffs(h), diffs(h / 2)
            for i in range(2):
                ratio = big[i] / small[i]
                assert 3.3 <= ratio <= 4.7  # quadratic scaling


def point_mass_oracle(d=3):
    return ExactScoreOracle(PointCloud(np.zeros((1, d))))


class TestChains:
    def test_chain_deterministic(self):
        s = make_two_phase(3.0, 0.05, 8)
        o = point_mass_oracle()
        a = run_chain(o, s, seed=5)
        b = run_chain(o, s, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_batch_of_one_matches_chain_substream(self):
        s = make_two_phase(3.0, 0.05, 8)
        o = point_mass_oracle()
        batch = run_batch(o, s, n=1, seed=123)
        chain = run_chain(o, s, seed=(123, 0))
        np.testing.assert_array_equal(batch.data[0], chain)

    def test_worker_count_does_not_change_bytes(self, tmp_path):
        s = make_two_phase(3.0, 0.05, 16)
        o = ExactScoreOracle(SubspaceGaussian.axis_aligned(4, 1))
        b1 = run_batch(o, s, n=300, seed=7, workers=1)
        b8 = run_batch(o, s, n=300, seed=7, workers=8)
        np.testing.assert_array_equal(b1.data, b8.data)
        p1, p8 = tmp_path / "w1", tmp_path / "w8"
        b1.to_csv(p1)
        b8.to_csv(p8)
        assert p1.read_bytes() == p8.read_bytes()

    def test_oracle_failure_carries_step_index(self):
        s = make_two_phase(3.0, 0.05, 8)

        class Broken:
            dim = 2

            def score(self, t, x, step=None):
                if step == 3:
                    raise RuntimeError("boom")
                return -np.asarray(x, dtype=float)

        with pytest.raises(SamplerError) as err:
            run_chain(Broken(), s, seed=0)
        assert err.value.step == 3

    def test_nonfinite_iterate_reports_chains(self):
        s = make_two_phase(3.0, 0.05, 8)

        class Exploding:
            dim = 2

            def score(self, t, x, step=None):
                out = -np.atleast_2d(x).astype(float).copy()
                if step == 2:
                    out[0, 0] = np.inf
                return out

        with pytest.raises(SamplerError) as err:
            run_batch(Exploding(), s, n=4, seed=0)
        assert err.value.step == 2
        assert err.value.chains == [0]

    def test_intermediate_stop_label(self):
        s = make_two_phase(3.0, 0.05, 8)
        o = point_mass_oracle()
        batch = run_batch(o, s, n=10, seed=0, n_steps=5)
        assert batch.step_index == 5
        assert batch.forward_time == pytest.approx(float(s.T - s.times[5]))


class TestOutputStatistics:
    def test_full_dimensional_gaussian_mean(self):
        # score -x for all t; by symmetry the output mean is 0
        d, n = 6, 4000
        s = make_two_phase(4.0, 0.05, 32)
        o = ExactScoreOracle(SubspaceGaussian.axis_aligned(d, d))
        batch = run_batch(o, s, n=n, seed=21)
        assert np.linalg.norm(batch.data.mean(axis=0)) <= 5.0 * math.sqrt(d / n)

    def test_two_point_mass_split(self):
        s = make_two_phase(5.0, 0.01, 64)
        o = ExactScoreOracle(make_point_cloud("two-points", d=2, a=1.0))
        n = 10_000
        batch = run_batch(o, s, n=n, seed=3)
        pos = int((batch.data[:, 0] > 0).sum())
        assert abs(pos - n / 2) <= 3.0 * math.sqrt(n * 0.25)

    def test_linear_score_output_is_gaussian_third_moment(self):
        # linear scores keep every iterate Gaussian; check E|y|^3 of a fixed
        # projection against 2 sqrt(2/pi) std^3
        s = make_two_phase(4.0, 0.05, 32)
        o = ExactScoreOracle(SubspaceGaussian.axis_aligned(3, 1))
        batch = run_batch(o, s, n=40_000, seed=8)
        proj = batch.data[:, 0]
        std = proj.std(ddof=1)
        expected = 2.0 * math.sqrt(2.0 / math.pi) * std**3
        observed = np.abs(proj) ** 3
        se = observed.std(ddof=1) / math.sqrt(len(proj))
        assert abs(observed.mean() - expected) <= 5.0 * se


class TestBatchSerialization:
    def test_csv_and_sidecar(self, tmp_path):
        s = make_two_phase(3.0, 0.05, 8)
        o = point_mass_oracle(2)
        batch = run_batch(o, s, n=5, seed=11)
        csv_path, json_path = batch.save(
            str(tmp_path / "run"), schedule=s, variant="ddpm", oracle=o
        )
        lines = open(csv_path).read().splitlines()
        assert lines[0] == "x0,x1"
        assert len(lines) == 6
        sidecar = json.loads(open(json_path).read())
        assert sidecar["variant"] == "ddpm"
        assert sidecar["schedule"]["N"] == 8
        assert sidecar["oracle"]["kind"] == "exact"
        # values survive the round trip exactly
        reloaded = np.loadtxt(csv_path, delimiter=",", skiprows=1)
        np.testing.assert_array_equal(reloaded, batch.data)
