"""Schedule closed forms, identities, and the designed gamma transform."""

import math

import numpy as np
import pytest
import torch
from scipy.integrate import quad
from scipy.special import expit

from dode.errors import InvalidInputError
from dode.schedule import (
    LogSnrSchedule,
    ScheduleKind,
    designed_cdf,
    designed_density,
    designed_gamma_of_t,
    designed_normalizer,
    eval_schedule,
    schedule_terms,
)

VP = LogSnrSchedule(ScheduleKind.VP)
SP = LogSnrSchedule(ScheduleKind.SP)


def grid(s, n=1000):
    return torch.linspace(s.gamma_min, s.gamma_max, n, dtype=torch.float64)


class TestClosedForms:
    def test_vp_at_zero(self):
        ev = eval_schedule(VP, 0.0)
        np.testing.assert_allclose([ev.alpha, ev.sigma], math.sqrt(0.5), rtol=1e-15)
        np.testing.assert_allclose(ev.norm, 0.25, rtol=1e-14)

    def test_sp_at_zero(self):
        ev = eval_schedule(SP, 0.0)
        np.testing.assert_allclose([ev.alpha, ev.sigma], 0.5, rtol=1e-15)
        np.testing.assert_allclose(ev.norm, 0.25 / math.sqrt(2.0), rtol=1e-14)

    def test_snr_ratio_at_default_start(self):
        # alpha/sigma = exp(-gamma/2); at gamma=-13.3 the bin-scaled ratio
        # alpha/(256 sigma) is the truncation point ~3.01869
        ev = eval_schedule(VP, -13.3)
        np.testing.assert_allclose(ev.alpha / (256.0 * ev.sigma), 3.01869, atol=1e-4)
        ev_sp = eval_schedule(SP, -13.3)
        np.testing.assert_allclose(ev_sp.alpha / (256.0 * ev_sp.sigma), ev.alpha / (256.0 * ev.sigma), rtol=1e-12)

    def test_alpha_squared_at_default_start(self):
        # sigma^2(-13.3) = 1/(1 + e^13.3); computed directly as the oracle
        expected_sigma2 = 1.0 / (1.0 + math.exp(13.3))
        ev = eval_schedule(VP, -13.3)
        np.testing.assert_allclose(ev.alpha**2, 1.0 - expected_sigma2, rtol=1e-14)
        np.testing.assert_allclose(expected_sigma2, 1.674490e-6, rtol=1e-6)

    def test_non_finite_gamma_rejected(self):
        with pytest.raises(InvalidInputError):
            eval_schedule(VP, math.nan)
        with pytest.raises(InvalidInputError):
            eval_schedule(VP, math.inf)

    def test_bad_interval_rejected(self):
        with pytest.raises(InvalidInputError):
            LogSnrSchedule(ScheduleKind.VP, 5.0, -13.3)


class TestIdentities:
    @pytest.mark.parametrize("s,combine", [(VP, lambda a, g: a**2 + g**2), (SP, lambda a, g: a + g)])
    def test_constraint_on_grid(self, s, combine):
        a, sg, *_ = schedule_terms(s, grid(s))
        assert float((combine(a, sg) - 1.0).abs().max()) < 1e-12

    @pytest.mark.parametrize("s", [VP, SP])
    def test_derivatives_match_finite_differences(self, s):
        # denominator floored at the step: below h the quotient is
        # roundoff-limited and a pure relative test is meaningless
        h = 1e-5
        g = grid(s)
        a, sg, da, ds, nrm = schedule_terms(s, g)
        ap, sp_, *_ = schedule_terms(s, g + h)
        am, sm, *_ = schedule_terms(s, g - h)
        fd_a = (ap - am) / (2 * h)
        fd_s = (sp_ - sm) / (2 * h)
        assert float(((da - fd_a).abs() / fd_a.abs().clamp(min=h)).max()) < 1e-6
        assert float(((ds - fd_s).abs() / fd_s.abs().clamp(min=h)).max()) < 1e-6
        np.testing.assert_allclose(nrm.numpy(), np.sqrt(da.numpy() ** 2 + ds.numpy() ** 2), rtol=1e-13)

    @pytest.mark.parametrize("s", [VP, SP])
    def test_diffusion_coefficient_identity(self, s):
        # 2 sigma dsigma - 2 (dalpha/alpha) sigma^2 == sigma^2 in gamma time
        a, sg, da, ds, _ = schedule_terms(s, grid(s))
        g2 = 2 * sg * ds - 2 * (da / a) * sg**2
        assert float(((g2 - sg**2).abs() / sg**2).max()) < 1e-10


class TestDesignedTransform:
    def test_endpoints(self):
        assert designed_gamma_of_t(VP, 0.0) == VP.gamma_min
        assert designed_gamma_of_t(VP, 1.0) == VP.gamma_max
        assert designed_gamma_of_t(SP, 0.0) == SP.gamma_min
        assert designed_gamma_of_t(SP, 1.0) == SP.gamma_max

    @pytest.mark.parametrize("s", [VP, SP])
    def test_normalizer_matches_quadrature(self, s):
        def alpha2(g):
            return float(schedule_terms(s, torch.tensor(g, dtype=torch.float64))[0] ** 2)

        z_quad, _ = quad(alpha2, s.gamma_min, s.gamma_max, limit=200)
        np.testing.assert_allclose(designed_normalizer(s), z_quad, rtol=1e-9)

    def test_vp_normalizer_value(self):
        # frozen from the closed form log(sigma^2(5)/sigma^2(-13.3))
        np.testing.assert_allclose(designed_normalizer(VP), 13.293286, atol=1e-5)

    @pytest.mark.parametrize("s,tol", [(VP, 1e-8), (SP, 1e-7)])
    def test_cdf_roundtrip(self, s, tol):
        t = np.linspace(0.0, 1.0, 301)
        assert np.abs(designed_cdf(s, designed_gamma_of_t(s, t)) - t).max() < tol

    @pytest.mark.parametrize("s", [VP, SP])
    def test_strictly_increasing(self, s):
        g = designed_gamma_of_t(s, np.linspace(0.0, 1.0, 2000))
        assert np.all(np.diff(g) > 0)

    def test_t_out_of_range_rejected(self):
        with pytest.raises(InvalidInputError):
            designed_gamma_of_t(VP, -0.01)
        with pytest.raises(InvalidInputError):
            designed_gamma_of_t(VP, np.array([0.2, 1.5]))


class TestDesignedDensity:
    def test_integrates_to_one(self):
        total, _ = quad(lambda g: designed_density(VP, g), VP.gamma_min, VP.gamma_max, limit=200)
        assert abs(total - 1.0) < 1e-6

    def test_density_at_start(self):
        alpha2 = expit(13.3)
        np.testing.assert_allclose(designed_density(VP, VP.gamma_min), alpha2 / designed_normalizer(VP), rtol=1e-12)

    def test_density_ratio_cancels_normalizer(self):
        a0 = expit(13.3)
        a1 = expit(-5.0)
        ratio = designed_density(VP, VP.gamma_min) / designed_density(VP, VP.gamma_max)
        np.testing.assert_allclose(ratio, a0 / a1, rtol=1e-12)

    def test_zero_outside_range(self):
        assert designed_density(VP, VP.gamma_min - 1.0) == 0.0
        assert designed_density(VP, VP.gamma_max + 1.0) == 0.0

    def test_histogram_matches_density(self):
        # inverse-transform draws against analytic bin masses, 3 sigma per bin
        rng = np.random.default_rng(123)
        n = 200_000
        g = designed_gamma_of_t(VP, rng.uniform(0, 1, n))
        edges = np.linspace(VP.gamma_min, VP.gamma_max, 33)
        counts, _ = np.histogram(g, bins=edges)
        probs = np.diff([designed_cdf(VP, e) for e in edges])
        expected = n * probs
        sd = np.sqrt(n * probs * (1 - probs))
        assert np.all(np.abs(counts - expected) <= 3.0 * sd)
