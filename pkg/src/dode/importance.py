"""Gamma-sampling strategies for training and variance diagnostics.

Three strategies draw the noise level for each training sample:

* ``UniformGamma`` — gamma ~ U(gamma_min, gamma_max); weight is the
  interval length (the reciprocal density).
* ``DesignedGamma`` — inverse-transform draws from p(gamma) ∝ alpha^2,
  which exactly flattens the per-gamma objective weight; weight Z/alpha^2.
* ``AdaptiveGamma`` — a learned monotone warp gamma(t) of uniform t; by
  change of variables the weight is dgamma/dt, and the warp is trained to
  minimize the second moment of the weighted per-sample loss, alternating
  with the model updates.

``variance_profile`` reports the empirical per-bin variance of the
weighted per-sample loss (fixed data/noise pools for reproducibility);
``mse_profile`` compares the flatness of velocity-space vs noise-space
mean squared errors of the same checkpoint across gamma.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError
from .nets import MonotoneGammaNet
from .objectives import PredictorKind, convert_predictor, fm_loss_per_sample, sample_path
from .schedule import LogSnrSchedule, designed_density, designed_gamma_of_t, designed_normalizer, schedule_terms

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GammaDraw:
    gamma: float
    is_weight: float
    t: float | None = None


class GammaDraws:
    """A batch of gamma draws; indexes like a list of :class:`GammaDraw`."""

    def __init__(self, gamma: np.ndarray, is_weight: np.ndarray, t: np.ndarray | None = None):
        self.gamma = np.asarray(gamma, dtype=np.float64)
        self.is_weight = np.asarray(is_weight, dtype=np.float64)
        self.t = None if t is None else np.asarray(t, dtype=np.float64)

    def __len__(self) -> int:
        return self.gamma.shape[0]

    def __getitem__(self, i) -> GammaDraw:
        return GammaDraw(float(self.gamma[i]), float(self.is_weight[i]), None if self.t is None else float(self.t[i]))


@dataclass(frozen=True)
class UniformGamma:
    pass


@dataclass(frozen=True)
class DesignedGamma:
    pass


@dataclass
class AdaptiveGamma:
    net: MonotoneGammaNet


def sample_gamma(strategy, s: LogSnrSchedule, n: int, rng: np.random.Generator) -> GammaDraws:
    """Draw n gamma values plus reciprocal-density importance weights."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if isinstance(strategy, UniformGamma):
        gamma = rng.uniform(s.gamma_min, s.gamma_max, size=n)
        return GammaDraws(gamma, np.full(n, s.span))
    if isinstance(strategy, DesignedGamma):
        t = rng.uniform(0.0, 1.0, size=n)
        gamma = designed_gamma_of_t(s, t)
        alpha2 = np.asarray(schedule_terms(s, torch.from_numpy(gamma))[0].numpy()) ** 2
        return GammaDraws(gamma, designed_normalizer(s) / alpha2, t)
    if isinstance(strategy, AdaptiveGamma):
        t = rng.uniform(0.0, 1.0, size=n)
        from .nets import monotone_gamma

        gamma, dgamma = monotone_gamma(strategy.net, torch.from_numpy(t))
        return GammaDraws(gamma.detach().numpy(), dgamma.detach().numpy(), t)
    raise InvalidInputError(f"unknown strategy {strategy!r}")


def strategy_from_name(name: str, s: LogSnrSchedule, net: MonotoneGammaNet | None = None, seed: int = 0):
    name = name.lower()
    if name == "uniform":
        return UniformGamma()
    if name == "designed":
        return DesignedGamma()
    if name == "adaptive":
        return AdaptiveGamma(net if net is not None else MonotoneGammaNet(s.gamma_min, s.gamma_max, seed=seed))
    raise InvalidInputError(f"unknown strategy name {name!r}")


def weighted_loss_terms(s: LogSnrSchedule, model, x0, eps, gamma, weights) -> torch.Tensor:
    """Per-sample weighted losses for fixed draws (no gradients)."""
    with torch.no_grad():
        batch = sample_path(s, torch.as_tensor(x0, dtype=torch.float64), torch.as_tensor(eps, dtype=torch.float64), torch.as_tensor(gamma, dtype=torch.float64))
        return fm_loss_per_sample(s, model, batch, torch.as_tensor(weights, dtype=torch.float64))


def adaptive_is_step(s: LogSnrSchedule, model, net: MonotoneGammaNet, x0, eps, t, opt_state, cfg):
    """One optimizer step on E[L^2] over the warp parameters (model frozen).

    Returns the scalar objective value; skips the update (with a warning)
    if it is non-finite.
    """
    from .trainer import adamw_step

    x0 = torch.as_tensor(x0, dtype=torch.float64)
    eps = torch.as_tensor(eps, dtype=torch.float64)
    t = torch.as_tensor(t, dtype=torch.float64)
    names = [n for n, _ in net.named_parameters()]

    def objective(p):
        gamma, dgamma = torch.func.jvp(
            lambda tt: torch.func.functional_call(net, p, (tt,)), (t,), (torch.ones_like(t),)
        )
        alpha, sigma, dalpha, dsigma, norm = schedule_terms(s, gamma)
        x_gamma = alpha[:, None] * x0 + sigma[:, None] * eps
        v_target = (dalpha[:, None] * x0 + dsigma[:, None] * eps) / norm[:, None]
        pred = model(x_gamma, gamma)
        loss_vec = dgamma * 2.0 * (norm**2 / sigma**2) * ((pred - v_target) ** 2).sum(-1)
        return (loss_vec**2).mean()

    params = {n: p.detach() for n, p in net.named_parameters()}
    grads, value = torch.func.grad_and_value(objective)(params)
    if not np.isfinite(float(value)):
        logger.warning("adaptive IS step skipped: non-finite objective")
        return float(value)
    plist = list(net.parameters())
    glist = [grads[n] for n in names]
    adamw_step(plist, glist, opt_state, cfg)
    return float(value)


@dataclass
class VarianceBin:
    gamma_lo: float
    gamma_hi: float
    count: int
    variance: float | None


def variance_profile(
    s: LogSnrSchedule,
    model,
    strategy,
    data: np.ndarray,
    n_bins: int = 20,
    n_draws: int = 3200,
    seed: int = 0,
    n_data_pool: int = 32,
    n_noise_pool: int = 100,
) -> list[VarianceBin]:
    """Empirical variance of the weighted per-sample loss, binned over gamma.

    Uses fixed pools (default 32 data points x 100 noise draws) cycled
    across the gamma draws so profiles are comparable between strategies.
    """
    if n_bins < 2:
        raise InvalidInputError("n_bins must be >= 2")
    rng = np.random.default_rng(seed)
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    pool_x = data[rng.choice(data.shape[0], size=min(n_data_pool, data.shape[0]), replace=False)]
    pool_e = rng.standard_normal((n_noise_pool, data.shape[1]))

    draws = sample_gamma(strategy, s, n_draws, rng)
    xi = np.arange(n_draws) % pool_x.shape[0]
    ei = (np.arange(n_draws) // pool_x.shape[0]) % pool_e.shape[0]
    vals = weighted_loss_terms(s, model, pool_x[xi], pool_e[ei], draws.gamma, draws.is_weight).numpy()

    edges = np.linspace(s.gamma_min, s.gamma_max, n_bins + 1)
    idx = np.clip(np.digitize(draws.gamma, edges) - 1, 0, n_bins - 1)
    out = []
    for b in range(n_bins):
        sel = vals[idx == b]
        var = float(sel.var(ddof=1)) if sel.size >= 2 else None
        out.append(VarianceBin(float(edges[b]), float(edges[b + 1]), int(sel.size), var))
    return out


def mse_profile(s: LogSnrSchedule, model, data: np.ndarray, gammas, seed: int = 0, n_data_pool: int = 32, n_noise_pool: int = 20):
    """Mean squared error of the velocity and noise views of one model.

    Returns (gammas, velocity_mse, noise_mse); the velocity profile is the
    flat one when the model is parameterized well.
    """
    rng = np.random.default_rng(seed)
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    pool_x = data[rng.choice(data.shape[0], size=min(n_data_pool, data.shape[0]), replace=False)]
    pool_e = rng.standard_normal((n_noise_pool, data.shape[1]))
    x0 = np.repeat(pool_x, pool_e.shape[0], axis=0)
    eps = np.tile(pool_e, (pool_x.shape[0], 1))

    gammas = np.asarray(gammas, dtype=np.float64)
    v_mse, e_mse = [], []
    x0_t = torch.from_numpy(x0)
    eps_t = torch.from_numpy(eps)
    with torch.no_grad():
        for g in gammas:
            batch = sample_path(s, x0_t, eps_t, float(g))
            pred = model(batch.x_gamma, batch.gamma)
            v_mse.append(float(((pred - batch.v_target) ** 2).sum(-1).mean()))
            eps_pred = convert_predictor(s, PredictorKind.NORMALIZED_VELOCITY, PredictorKind.NOISE, pred, batch.x_gamma, batch.gamma)
            e_mse.append(float(((eps_pred - eps_t) ** 2).sum(-1).mean()))
    return gammas, np.asarray(v_mse), np.asarray(e_mse)
