"""Closed-form reference fields for isotropic Gaussian mixtures.

When the data distribution is a mixture of isotropic Gaussians
``q0 = sum_j w_j N(mu_j, s_j^2 I)`` (point masses allowed via ``s_j = 0``),
every quantity the rest of the package estimates has an analytic form:

* the marginal at noise level gamma is again such a mixture, with
  component means ``alpha * mu_j`` and variances ``m_j = alpha^2 s_j^2 + sigma^2``;
* the score, the optimal gamma-time velocity
  ``v*(x) = (dalpha/alpha) x - (sigma^2/2) score(x)``, and its Jacobian trace;
* the posterior over the clean point given a noisy one, including the
  conditional mean-square velocity gap.

These are the oracles the test-suite and the ``oracle-check`` command
validate the numerical pipeline against. :class:`GaussianFieldModel` wraps
the optimal normalized-velocity field with the same calling convention as a
trained network, so it can drive the ODE machinery directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidInputError
from .schedule import LogSnrSchedule, schedule_terms

LOG_2PI = math.log(2.0 * math.pi)


def _as2d(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(x, dtype=torch.float64)
    if x.ndim == 1:
        return x.unsqueeze(0), True
    return x, False


@dataclass
class IsoGaussianMixture:
    """Mixture of isotropic Gaussians with per-component scalar scales."""

    means: np.ndarray  # (k, d)
    weights: np.ndarray  # (k,)
    scales: np.ndarray  # (k,) std >= 0; 0 means a point mass

    _mu: torch.Tensor = field(init=False, repr=False)
    _logw: torch.Tensor = field(init=False, repr=False)
    _s2: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        mu = torch.as_tensor(np.atleast_2d(np.asarray(self.means, dtype=np.float64)))
        w = torch.as_tensor(np.asarray(self.weights, dtype=np.float64)).reshape(-1)
        sc = torch.as_tensor(np.asarray(self.scales, dtype=np.float64)).reshape(-1)
        if w.shape[0] != mu.shape[0] or sc.shape[0] != mu.shape[0]:
            raise InvalidInputError("means, weights, scales must have matching length")
        if torch.any(w <= 0) or abs(float(w.sum()) - 1.0) > 1e-9:
            raise InvalidInputError("weights must be positive and sum to 1")
        if torch.any(sc < 0):
            raise InvalidInputError("scales must be non-negative")
        self._mu = mu
        self._logw = torch.log(w)
        self._s2 = sc**2

    @property
    def dim(self) -> int:
        return self._mu.shape[1]

    @property
    def n_components(self) -> int:
        return self._mu.shape[0]

    @classmethod
    def single(cls, s0: float, d: int) -> "IsoGaussianMixture":
        """The centered Gaussian N(0, s0^2 I)."""
        return cls(np.zeros((1, d)), np.ones(1), np.full(1, float(s0)))

    # -- data-space density ------------------------------------------------

    def log_density(self, x) -> torch.Tensor:
        """log q0(x); requires every component scale to be positive."""
        if torch.any(self._s2 == 0):
            raise InvalidInputError("log_density undefined for point-mass components")
        x2d, squeeze = _as2d(x)
        d = self.dim
        diff2 = torch.cdist(x2d, self._mu) ** 2  # (n, k)
        logp = self._logw - 0.5 * d * (LOG_2PI + torch.log(self._s2)) - diff2 / (2 * self._s2)
        out = torch.logsumexp(logp, dim=1)
        return out[0] if squeeze else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights / np.sum(self.weights))
        mu = self._mu.numpy()[comp]
        sc = np.sqrt(self._s2.numpy())[comp][:, None]
        return mu + sc * rng.standard_normal((n, self.dim))

    # -- diffused marginal at gamma -----------------------------------------

    def _component_stats(self, s: LogSnrSchedule, gamma):
        gamma = torch.as_tensor(gamma, dtype=torch.float64).reshape(-1)
        alpha, sigma, dalpha, dsigma, norm = schedule_terms(s, gamma)
        m = alpha[:, None] ** 2 * self._s2[None, :] + sigma[:, None] ** 2  # (n, k)
        return alpha, sigma, dalpha, dsigma, norm, m

    def _log_resp(self, x2d, alpha, m):
        # log of w_j N(x; alpha mu_j, m_j I), shape (n, k)
        d = self.dim
        diff2 = ((x2d[:, None, :] - alpha[:, None, None] * self._mu[None, :, :]) ** 2).sum(-1)
        return self._logw - 0.5 * d * (LOG_2PI + torch.log(m)) - diff2 / (2 * m)

    def marginal_log_density(self, x, s: LogSnrSchedule, gamma) -> torch.Tensor:
        x2d, squeeze = _as2d(x)
        alpha, *_, m = self._component_stats(s, gamma)
        out = torch.logsumexp(self._log_resp(x2d, alpha, m), dim=1)
        return out[0] if squeeze else out

    def score(self, x, s: LogSnrSchedule, gamma) -> torch.Tensor:
        """Gradient of the log marginal density at noise level gamma."""
        x2d, squeeze = _as2d(x)
        alpha, *_, m = self._component_stats(s, gamma)
        r = torch.softmax(self._log_resp(x2d, alpha, m), dim=1)  # (n, k)
        g = -(x2d[:, None, :] - alpha[:, None, None] * self._mu[None, :, :]) / m[:, :, None]
        out = (r[:, :, None] * g).sum(1)
        return out[0] if squeeze else out

    def laplacian_log_marginal(self, x, s: LogSnrSchedule, gamma) -> torch.Tensor:
        """Trace of the Hessian of log q_gamma, per sample."""
        x2d, squeeze = _as2d(x)
        alpha, *_, m = self._component_stats(s, gamma)
        r = torch.softmax(self._log_resp(x2d, alpha, m), dim=1)
        g = -(x2d[:, None, :] - alpha[:, None, None] * self._mu[None, :, :]) / m[:, :, None]
        gbar = (r[:, :, None] * g).sum(1)
        d = self.dim
        # centered form of sum_j r_j ||g_j||^2 - ||gbar||^2 avoids cancellation
        spread = (r * ((g - gbar[:, None, :]) ** 2).sum(-1)).sum(1)
        out = -(r * (d / m)).sum(1) + spread
        return out[0] if squeeze else out

    # -- optimal velocity field ----------------------------------------------

    def velocity(self, x, s: LogSnrSchedule, gamma) -> torch.Tensor:
        """Optimal gamma-time velocity v*(x, gamma)."""
        x2d, squeeze = _as2d(x)
        alpha, sigma, dalpha, dsigma, _, m = self._component_stats(s, gamma)
        a = (dalpha / alpha)[:, None]
        b = ((dalpha / alpha) * sigma**2 - sigma * dsigma)[:, None]
        out = a * x2d + b * self.score(x2d, s, gamma)
        return out[0] if squeeze else out

    def normalized_velocity(self, x, s: LogSnrSchedule, gamma) -> torch.Tensor:
        x2d, squeeze = _as2d(x)
        gamma_t = torch.as_tensor(gamma, dtype=torch.float64).reshape(-1)
        *_, norm = schedule_terms(s, gamma_t)
        out = self.velocity(x2d, s, gamma) / norm[:, None]
        return out[0] if squeeze else out

    def trace_grad_velocity(self, x, s: LogSnrSchedule, gamma) -> torch.Tensor:
        """tr(d v*/d x), per sample, from the mixture Laplacian."""
        x2d, squeeze = _as2d(x)
        alpha, sigma, dalpha, dsigma, _, _ = self._component_stats(s, gamma)
        a = dalpha / alpha
        b = a * sigma**2 - sigma * dsigma
        out = self.dim * a + b * self.laplacian_log_marginal(x2d, s, gamma)
        return out[0] if squeeze else out

    # -- posterior over the clean point ---------------------------------------

    def posterior_moments(self, x, s: LogSnrSchedule, gamma):
        """Mean of x0 given x_gamma, and tr Cov(x0 | x_gamma) per sample."""
        x2d, squeeze = _as2d(x)
        alpha, sigma, *_, m = self._component_stats(s, gamma)
        r = torch.softmax(self._log_resp(x2d, alpha, m), dim=1)
        sigma2 = (sigma**2)[:, None].expand(-1, self.n_components)
        mu_p = (
            alpha[:, None, None] * self._s2[None, :, None] * x2d[:, None, :]
            + sigma2[:, :, None] * self._mu[None, :, :]
        ) / m[:, :, None]
        v_p = self._s2[None, :] * sigma2 / m  # per-dimension posterior variance
        mean = (r[:, :, None] * mu_p).sum(1)
        # centered form (law of total variance) avoids cancellation
        spread = (r * ((mu_p - mean[:, None, :]) ** 2).sum(-1)).sum(1)
        tr_cov = (r * (self.dim * v_p)).sum(1) + spread
        if squeeze:
            return mean[0], tr_cov[0]
        return mean, tr_cov

    def posterior_sample(self, x, s: LogSnrSchedule, gamma, n_draws: int, rng) -> np.ndarray:
        """Draw x0 ~ posterior(x0 | x_gamma) for a single x; returns (n_draws, d)."""
        x2d, _ = _as2d(x)
        alpha, sigma, *_, m = self._component_stats(s, gamma)
        r = torch.softmax(self._log_resp(x2d, alpha, m), dim=1)[0].numpy()
        alpha_f = float(alpha[0])
        m_np = m[0].numpy()
        s2 = self._s2.numpy()
        sigma2 = float(sigma[0]) ** 2
        comp = rng.choice(self.n_components, size=n_draws, p=r / r.sum())
        mu_p = (alpha_f * s2[:, None] * x2d[0].numpy()[None, :] + sigma2 * self._mu.numpy()) / m_np[:, None]
        std_p = np.sqrt(s2 * sigma2 / m_np)
        return mu_p[comp] + std_p[comp][:, None] * rng.standard_normal((n_draws, self.dim))

    def expected_sq_velocity_gap(self, x, s: LogSnrSchedule, gamma) -> torch.Tensor:
        """E[ ||v* - v||^2 | x_gamma ] from analytic posterior moments.

        Uses v - v* = (dalpha - dsigma*alpha/sigma) (x0 - E[x0|x]).
        """
        x2d, squeeze = _as2d(x)
        gamma_t = torch.as_tensor(gamma, dtype=torch.float64).reshape(-1)
        alpha, sigma, dalpha, dsigma, _ = schedule_terms(s, gamma_t)
        c = dalpha - dsigma * alpha / sigma
        _, tr_cov = self.posterior_moments(x2d, s, gamma)
        out = c**2 * tr_cov
        return out[0] if squeeze else out


class GaussianFieldModel:
    """Optimal normalized-velocity field of a mixture, network-shaped.

    Exposes ``model(x, gamma) -> v_tilde`` and ``model.jvp(x, gamma, tangent)``
    exactly like a trained network, so the ODE and loss machinery can run on
    ground truth.
    """

    def __init__(self, mixture: IsoGaussianMixture, s: LogSnrSchedule):
        self.mixture = mixture
        self.schedule = s
        self.dim = mixture.dim

    def __call__(self, x, gamma) -> torch.Tensor:
        x2d, squeeze = _as2d(x)
        gamma_t = torch.as_tensor(gamma, dtype=torch.float64)
        if gamma_t.ndim == 0:
            gamma_t = gamma_t.expand(x2d.shape[0])
        out = self.mixture.normalized_velocity(x2d, self.schedule, gamma_t)
        return out[0] if squeeze else out

    def jvp(self, x, gamma, tangent):
        x2d, squeeze = _as2d(x)
        tan2d, _ = _as2d(tangent)
        value, jvp = torch.func.jvp(lambda xx: self(xx, gamma), (x2d,), (tan2d,))
        if squeeze:
            return value[0], jvp[0]
        return value, jvp
