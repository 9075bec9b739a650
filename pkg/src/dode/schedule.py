"""Noise schedules parameterized by negative log-SNR.

The only time variable in this package is ``gamma = log(sigma^2 / alpha^2)``,
running from ``gamma_min`` (essentially clean data) to ``gamma_max``
(essentially pure noise). Two schedule families are supported:

* VP (variance preserving): ``alpha^2 + sigma^2 = 1``
* SP (straight path):       ``alpha + sigma = 1``

Given the constraint, ``alpha`` and ``sigma`` are fixed functions of gamma
with no extra hyperparameters:

    VP: alpha = sqrt(sigmoid(-gamma))      sigma = sqrt(sigmoid(gamma))
    SP: alpha = sigmoid(-gamma/2)          sigma = sigmoid(gamma/2)

Derivatives (with respect to gamma) and the normalizing factor
``sqrt(dalpha^2 + dsigma^2)`` also have closed forms; see
:func:`eval_schedule`.

This module also implements the inverse-transform machinery for the
"designed" importance distribution ``p(gamma) ∝ alpha(gamma)^2``, which
flattens the per-gamma weight of the velocity-matching objective.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import expit, log_expit

from .errors import InvalidInputError

SQRT2 = math.sqrt(2.0)

# Width of the bisection bracket beyond [gamma_min, gamma_max] and the
# stopping width for the SP inverse CDF.
_BISECT_PAD = 1.0
_BISECT_TOL = 1e-10


class ScheduleKind(str, enum.Enum):
    VP = "vp"
    SP = "sp"


@dataclass(frozen=True)
class LogSnrSchedule:
    """A noise schedule: family plus the gamma interval it is used on."""

    kind: ScheduleKind
    gamma_min: float = -13.3
    gamma_max: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not (math.isfinite(self.gamma_min) and math.isfinite(self.gamma_max)):
            raise InvalidInputError("gamma bounds must be finite")
        if not self.gamma_min < self.gamma_max:
            raise InvalidInputError(
                f"gamma_min must be < gamma_max, got [{self.gamma_min}, {self.gamma_max}]"
            )

    @property
    def span(self) -> float:
        return self.gamma_max - self.gamma_min


@dataclass(frozen=True)
class ScheduleEval:
    """Schedule coefficients at a single gamma.

    ``norm = sqrt(dalpha^2 + dsigma^2)`` is the factor that converts the
    normalized velocity predicted by a network into the actual drift of the
    gamma-time ODE.
    """

    alpha: float
    sigma: float
    dalpha: float
    dsigma: float
    norm: float


def schedule_terms(s: LogSnrSchedule, gamma: torch.Tensor):
    """Evaluate (alpha, sigma, dalpha, dsigma, norm) as torch tensors.

    Differentiable in ``gamma``; this is the single source of truth for the
    schedule closed forms. Works for any tensor shape.
    """
    gamma = torch.as_tensor(gamma, dtype=torch.float64)
    if s.kind is ScheduleKind.VP:
        alpha = torch.sqrt(torch.sigmoid(-gamma))
        sigma = torch.sqrt(torch.sigmoid(gamma))
        dalpha = -0.5 * alpha * sigma**2
        dsigma = 0.5 * alpha**2 * sigma
        norm = 0.5 * alpha * sigma
    else:
        alpha = torch.sigmoid(-gamma / 2)
        sigma = torch.sigmoid(gamma / 2)
        dalpha = -0.5 * alpha * sigma
        dsigma = 0.5 * alpha * sigma
        norm = alpha * sigma / SQRT2
    return alpha, sigma, dalpha, dsigma, norm


def eval_schedule(s: LogSnrSchedule, gamma: float) -> ScheduleEval:
    """Closed-form schedule coefficients at one gamma.

    Evaluation outside [gamma_min, gamma_max] is allowed (useful for limit
    checks); only non-finite gamma is rejected.
    """
    if not math.isfinite(gamma):
        raise InvalidInputError(f"gamma must be finite, got {gamma}")
    terms = schedule_terms(s, torch.tensor(float(gamma), dtype=torch.float64))
    return ScheduleEval(*(float(t) for t in terms))


def snr_timestep(s: LogSnrSchedule, alpha: float, sigma: float) -> float:
    """Recover gamma from (alpha, sigma); inverse of the defining relation."""
    return math.log(sigma**2 / alpha**2)


# ---------------------------------------------------------------------------
# Designed importance distribution p(gamma) ∝ alpha(gamma)^2
# ---------------------------------------------------------------------------


def _vp_log_sigma2(gamma):
    # log sigma^2 = log sigmoid(gamma); antiderivative of alpha^2 w.r.t gamma
    return log_expit(gamma)


def _sp_half_cdf_raw(gamma):
    # antiderivative of alpha^2 / 2 for the SP family
    return log_expit(gamma / 2.0) - expit(gamma / 2.0)


def designed_normalizer(s: LogSnrSchedule) -> float:
    """Z = integral of alpha(gamma)^2 over [gamma_min, gamma_max]."""
    if s.kind is ScheduleKind.VP:
        return float(_vp_log_sigma2(s.gamma_max) - _vp_log_sigma2(s.gamma_min))
    return float(2.0 * (_sp_half_cdf_raw(s.gamma_max) - _sp_half_cdf_raw(s.gamma_min)))


def designed_cdf(s: LogSnrSchedule, gamma):
    """CDF of the designed distribution, vectorized over gamma."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if s.kind is ScheduleKind.VP:
        t = (_vp_log_sigma2(gamma) - _vp_log_sigma2(s.gamma_min)) / designed_normalizer(s)
    else:
        f0 = _sp_half_cdf_raw(s.gamma_min)
        f1 = _sp_half_cdf_raw(s.gamma_max)
        t = (_sp_half_cdf_raw(gamma) - f0) / (f1 - f0)
    return t if t.shape else float(t)


def designed_gamma_of_t(s: LogSnrSchedule, t):
    """Inverse CDF of the designed distribution; maps t in [0,1] to gamma.

    VP has a closed form; SP is solved by bisection on the bracket
    [gamma_min - 1, gamma_max + 1] down to an interval width of 1e-10.
    Endpoints map exactly: t=0 -> gamma_min, t=1 -> gamma_max.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    scalar = t_arr.shape == ()
    t_arr = np.atleast_1d(t_arr)
    if np.any(~np.isfinite(t_arr)) or np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise InvalidInputError("t must lie in [0, 1]")

    if s.kind is ScheduleKind.VP:
        log_s2 = _vp_log_sigma2(s.gamma_min) + designed_normalizer(s) * t_arr
        # gamma = logit(sigma^2) evaluated stably from log sigma^2
        gamma = log_s2 - np.log(-np.expm1(log_s2))
    else:
        f0 = _sp_half_cdf_raw(s.gamma_min)
        df = _sp_half_cdf_raw(s.gamma_max) - f0
        target = f0 + df * t_arr
        lo = np.full_like(t_arr, s.gamma_min - _BISECT_PAD)
        hi = np.full_like(t_arr, s.gamma_max + _BISECT_PAD)
        while np.max(hi - lo) > _BISECT_TOL:
            mid = 0.5 * (lo + hi)
            below = _sp_half_cdf_raw(mid) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        gamma = 0.5 * (lo + hi)

    gamma = np.where(t_arr == 0.0, s.gamma_min, gamma)
    gamma = np.where(t_arr == 1.0, s.gamma_max, gamma)
    gamma = np.clip(gamma, s.gamma_min, s.gamma_max)
    return float(gamma[0]) if scalar else gamma


def designed_density(s: LogSnrSchedule, gamma):
    """Normalized density alpha^2 / Z on [gamma_min, gamma_max], 0 outside."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if s.kind is ScheduleKind.VP:
        alpha2 = expit(-gamma)
    else:
        alpha2 = expit(-gamma / 2.0) ** 2
    dens = alpha2 / designed_normalizer(s)
    dens = np.where((gamma < s.gamma_min) | (gamma > s.gamma_max), 0.0, dens)
    return dens if dens.shape else float(dens)
