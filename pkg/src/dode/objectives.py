"""Diffusion-path targets, predictor conversions, and matching losses.

A path sample couples a clean point ``x0`` and a noise draw ``eps`` at level
gamma: ``x_gamma = alpha x0 + sigma eps``, with regression target the
normalized path velocity ``v_tilde = (dalpha x0 + dsigma eps) / norm``.

The first-order loss integrates ``2 (dalpha^2 + dsigma^2) / sigma^2`` times
the squared velocity error over gamma (Monte Carlo over gamma draws, with
the sampler's importance weight supplied per sample). The second-order
trace loss regresses, with the same per-gamma weight, the squared residual

    sigma * tr(J v_tilde) - (dsigma / norm) d
        + (2 norm / sigma) ||stopgrad(v_tilde_theta) - v_tilde||^2

whose minimizer is the trace of the Jacobian of the optimal field, with an
error bounded by the squared first-order error.

Score / noise / data / velocity / normalized-velocity predictors are all
affine functions of each other at fixed (x, gamma); ``convert_predictor``
routes every pair through the score form.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError, SingularityError
from .schedule import LogSnrSchedule, schedule_terms


class PredictorKind(str, enum.Enum):
    SCORE = "score"
    NOISE = "noise"
    DATA = "data"
    VELOCITY = "velocity"
    NORMALIZED_VELOCITY = "normalized_velocity"


@dataclass
class PathSample:
    """One (or a batch of) realized diffusion-path point(s)."""

    x0: torch.Tensor
    eps: torch.Tensor
    gamma: torch.Tensor
    x_gamma: torch.Tensor
    v_target: torch.Tensor

    def __len__(self) -> int:
        return self.x0.shape[0] if self.x0.ndim == 2 else 1


def _coerce_pair(x0, eps):
    x0 = torch.as_tensor(x0, dtype=torch.float64)
    eps = torch.as_tensor(eps, dtype=torch.float64)
    squeeze = x0.ndim == 1
    if squeeze:
        x0 = x0.unsqueeze(0)
        eps = torch.as_tensor(eps, dtype=torch.float64).reshape(x0.shape)
    if x0.shape != eps.shape or x0.ndim != 2:
        raise InvalidInputError(f"x0 and eps must match, got {tuple(x0.shape)} vs {tuple(eps.shape)}")
    return x0, eps, squeeze


def _terms_col(s: LogSnrSchedule, gamma, n: int):
    """Schedule terms broadcast to column vectors for an n-row batch."""
    gamma = torch.as_tensor(gamma, dtype=torch.float64)
    if gamma.ndim == 0:
        gamma = gamma.expand(n)
    elif gamma.shape != (n,):
        raise InvalidInputError("gamma must be a scalar or match the batch size")
    alpha, sigma, dalpha, dsigma, norm = schedule_terms(s, gamma)
    col = lambda t: t[:, None]
    return gamma, col(alpha), col(sigma), col(dalpha), col(dsigma), col(norm)


def sample_path(s: LogSnrSchedule, x0, eps, gamma) -> PathSample:
    """Build the path point and its normalized-velocity target."""
    x0, eps, squeeze = _coerce_pair(x0, eps)
    gamma, alpha, sigma, dalpha, dsigma, norm = _terms_col(s, gamma, x0.shape[0])
    x_gamma = alpha * x0 + sigma * eps
    v_target = (dalpha * x0 + dsigma * eps) / norm
    if squeeze:
        return PathSample(x0[0], eps[0], gamma[0], x_gamma[0], v_target[0])
    return PathSample(x0, eps, gamma, x_gamma, v_target)


# ---------------------------------------------------------------------------
# Predictor conversions (all pairs, routed through the score form)
# ---------------------------------------------------------------------------


def _check_denominator(t: torch.Tensor, name: str, frm, to, gamma):
    if bool((t == 0).any()) or bool((~torch.isfinite(t)).any()):
        g = torch.as_tensor(gamma, dtype=torch.float64).reshape(-1)
        raise SingularityError(
            f"conversion {frm.value}->{to.value}: {name} underflowed at gamma={float(g[0]):g}"
        )


def convert_predictor(s: LogSnrSchedule, frm, to, value, x, gamma) -> torch.Tensor:
    """Convert a predictor output of kind ``frm`` into kind ``to`` at (x, gamma)."""
    frm = PredictorKind(frm)
    to = PredictorKind(to)
    value = torch.as_tensor(value, dtype=torch.float64)
    x = torch.as_tensor(x, dtype=torch.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.unsqueeze(0)
        value = value.reshape(x.shape)
    if value.shape != x.shape:
        raise InvalidInputError("value and x must have the same shape")
    gamma_b, alpha, sigma, dalpha, dsigma, norm = _terms_col(s, gamma, x.shape[0])
    a_ratio = dalpha / alpha
    b = a_ratio * sigma**2 - sigma * dsigma

    if frm is PredictorKind.SCORE:
        score = value
    elif frm is PredictorKind.NOISE:
        _check_denominator(sigma, "sigma", frm, to, gamma)
        score = -value / sigma
    elif frm is PredictorKind.DATA:
        _check_denominator(sigma, "sigma", frm, to, gamma)
        score = (alpha * value - x) / sigma**2
    else:
        v = value * norm if frm is PredictorKind.NORMALIZED_VELOCITY else value
        _check_denominator(b, "velocity-score coefficient", frm, to, gamma)
        score = (v - a_ratio * x) / b

    if to is PredictorKind.SCORE:
        out = score
    elif to is PredictorKind.NOISE:
        out = -sigma * score
    elif to is PredictorKind.DATA:
        _check_denominator(alpha, "alpha", frm, to, gamma)
        out = (x + sigma**2 * score) / alpha
    else:
        out = a_ratio * x + b * score
        if to is PredictorKind.NORMALIZED_VELOCITY:
            out = out / norm
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Matching losses (per-sample forms keep the autograd graph)
# ---------------------------------------------------------------------------


def _batched(batch: PathSample) -> PathSample:
    if batch.x0.ndim == 1:
        return PathSample(
            batch.x0.unsqueeze(0),
            batch.eps.unsqueeze(0),
            batch.gamma.reshape(1),
            batch.x_gamma.unsqueeze(0),
            batch.v_target.unsqueeze(0),
        )
    return batch


def _weights(weights, n: int) -> torch.Tensor:
    if weights is None:
        return torch.ones(n, dtype=torch.float64)
    w = torch.as_tensor(weights, dtype=torch.float64).reshape(-1)
    if w.shape != (n,):
        raise InvalidInputError("weights must match the batch size")
    return w


def _call(model, params, x, gamma):
    # route through functional_call when training gradients flow through
    # explicit parameter tensors (required for grad-through-jvp composition)
    if params is None:
        return model(x, gamma)
    return torch.func.functional_call(model, params, (x, gamma))


def fm_loss_per_sample(s: LogSnrSchedule, model, batch: PathSample, weights=None, params=None) -> torch.Tensor:
    """Importance-weighted per-sample first-order matching losses."""
    batch = _batched(batch)
    n = len(batch)
    w = _weights(weights, n)
    _, _, sigma, _, _, norm = _terms_col(s, batch.gamma, n)
    pred = _call(model, params, batch.x_gamma, batch.gamma)
    coef = 2.0 * (norm[:, 0] ** 2) / (sigma[:, 0] ** 2)
    return w * coef * ((pred - batch.v_target) ** 2).sum(-1)


def fm_trace_loss_per_sample(
    s: LogSnrSchedule,
    model,
    batch: PathSample,
    weights=None,
    trace_probes: int | None = None,
    probe_rng=None,
    params=None,
) -> torch.Tensor:
    """Per-sample second-order (trace) matching losses.

    The Jacobian trace of the model field is exact (dim basis tangents) by
    default; pass ``trace_probes`` to use that many Rademacher probes
    instead. The first-order error term enters with gradients blocked.
    """
    batch = _batched(batch)
    n = len(batch)
    w = _weights(weights, n)
    _, _, sigma, _, dsigma, norm = _terms_col(s, batch.gamma, n)
    x, gamma = batch.x_gamma, batch.gamma
    d = x.shape[1]
    fwd = lambda xx: _call(model, params, xx, gamma)

    value = None
    if trace_probes is None:
        tr = torch.zeros(n, dtype=torch.float64)
        for k in range(d):
            tan = torch.zeros_like(x)
            tan[:, k] = 1.0
            value, jv = torch.func.jvp(fwd, (x,), (tan,))
            tr = tr + jv[:, k]
    else:
        if trace_probes < 1:
            raise InvalidInputError("trace_probes must be >= 1")
        rng = probe_rng if probe_rng is not None else np.random.default_rng(0)
        tr = torch.zeros(n, dtype=torch.float64)
        for _ in range(trace_probes):
            u = torch.from_numpy(rng.integers(0, 2, size=(n, d)).astype("float64") * 2.0 - 1.0)
            value, jv = torch.func.jvp(fwd, (x,), (u,))
            tr = tr + (u * jv).sum(-1)
        tr = tr / trace_probes

    err1 = ((value.detach() - batch.v_target) ** 2).sum(-1)
    sig, dsig, nrm = sigma[:, 0], dsigma[:, 0], norm[:, 0]
    residual = sig * tr - (dsig / nrm) * d + (2.0 * nrm / sig) * err1
    coef = 2.0 * (nrm**2) / (sig**2)
    return w * coef * residual**2


def fm_loss(s, model, batch, weights=None, per_dim=False) -> float:
    """Monte Carlo estimate of the first-order matching objective."""
    with torch.no_grad():
        val = fm_loss_per_sample(s, model, batch, weights).mean()
    d = batch.x0.shape[-1]
    return float(val) / (d if per_dim else 1)


def fm_trace_loss(s, model, batch, weights=None, per_dim=False, trace_probes=None, probe_rng=None) -> float:
    """Monte Carlo estimate of the second-order trace objective."""
    val = fm_trace_loss_per_sample(s, model, batch, weights, trace_probes, probe_rng).mean()
    d = batch.x0.shape[-1]
    return float(val.detach()) / (d if per_dim else 1)


def mixed_loss_per_sample(s, model, batch, lam: float, weights=None, params=None) -> torch.Tensor:
    if lam < 0:
        raise InvalidInputError("lambda must be >= 0")
    first = fm_loss_per_sample(s, model, batch, weights, params=params)
    if lam == 0:
        return first
    return first + lam * fm_trace_loss_per_sample(s, model, batch, weights, params=params)


def mixed_loss(s, model, batch, lam: float, weights=None, per_dim=False) -> float:
    val = mixed_loss_per_sample(s, model, batch, lam, weights).mean()
    d = batch.x0.shape[-1]
    return float(val.detach()) / (d if per_dim else 1)


def preconditioning(s: LogSnrSchedule, gamma: float, sigma_data: float):
    """Input/skip/output scaling coefficients for a unit-variance network.

    c_in normalizes the network input, c_skip and c_out mix the input into
    the output so the effective regression target has unit variance and the
    network error is amplified as little as possible.
    """
    if not (sigma_data > 0) or not math.isfinite(sigma_data):
        raise InvalidInputError("sigma_data must be positive and finite")
    if not math.isfinite(gamma):
        raise InvalidInputError("gamma must be finite")
    alpha, sigma, *_ = schedule_terms(s, torch.tensor(float(gamma), dtype=torch.float64))
    alpha, sigma = float(alpha), float(sigma)
    denom2 = sigma**2 + sigma_data**2 * alpha**2
    c_in = 1.0 / math.sqrt(denom2)
    c_skip = sigma / denom2
    c_out = sigma_data * alpha / math.sqrt(denom2)
    return c_in, c_skip, c_out
