"""Training loops: velocity pretraining and trace-regularized finetuning.

The optimizer is Adam with decoupled weight decay applied after the moment
update (``p <- p * (1 - lr * wd)``) and an exponential moving average of
parameters kept for evaluation. Defaults: lr 2e-4, betas (0.9, 0.99),
weight decay 0.01, EMA rate 0.9999, batch size 128.

Pretraining minimizes the first-order matching loss under a configurable
gamma-sampling strategy; finetuning continues from a checkpoint with the
mixed first- plus second-order objective (default mixture coefficient
0.1) and records the mean sampling NFE on a fixed probe set before and
after, since the trace term exists to smooth the learned flow.

Everything is driven by one numpy generator seeded from the config, so a
(config, seed) pair reproduces checkpoints bit for bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

from .data import Dataset
from .errors import InvalidInputError, NumericError, TrainingDivergedError
from .nets import MonotoneGammaNet, VelocityModel, loss_and_grad
from .objectives import mixed_loss_per_sample, sample_path
from .odeflow import ode_log_likelihood, ode_sample
from .schedule import LogSnrSchedule
from .solver import SolverConfig

_ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    iters: int = 20_000
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    ema_rate: float = 0.9999
    batch_size: int = 128
    lambda_tr: float = 0.1
    strategy: str = "designed"
    seed: int = 0
    hidden: tuple = (128, 128, 128)
    gamma_embed_dim: int = 4
    activation: str = "silu"
    eval_every: int = 2000
    eval_size: int = 256
    eval_nll: str = "ode"  # "ode", "tn", or "none"
    rtol: float = 1e-5
    atol: float = 1e-5
    nfe_probe_size: int = 128

    def __post_init__(self):
        if self.iters < 0:
            raise InvalidInputError("iters must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidInputError("betas must lie in [0, 1)")
        if not (0 <= self.ema_rate < 1):
            raise InvalidInputError("ema_rate must lie in [0, 1)")
        if self.lr <= 0 or self.batch_size < 1:
            raise InvalidInputError("lr must be positive and batch_size >= 1")
        if self.lambda_tr < 0:
            raise InvalidInputError("lambda_tr must be >= 0")
        if self.eval_nll not in ("ode", "tn", "none"):
            raise InvalidInputError("eval_nll must be one of ode|tn|none")

    def solver_config(self) -> SolverConfig:
        return SolverConfig(rtol=self.rtol, atol=self.atol)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        if "hidden" in kwargs:
            kwargs["hidden"] = tuple(int(h) for h in kwargs["hidden"])
        return cls(**kwargs)


@dataclass
class EvalRecord:
    iteration: int
    train_loss: float
    eval_nll: float
    wall_time: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("iteration,train_loss,eval_nll,wall_time\n")
            for r in self.records:
                fh.write(f"{r.iteration},{r.train_loss:.17g},{r.eval_nll:.17g},{r.wall_time:.17g}\n")

    @classmethod
    def from_csv(cls, path) -> "TrainReport":
        rows = []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            if not header.startswith("iteration,"):
                raise InvalidInputError(f"not a training report: {path}")
            for line in fh:
                it, tl, ev, wt = line.strip().split(",")
                rows.append(EvalRecord(int(it), float(tl), float(ev), float(wt)))
        return cls(rows)


# ---------------------------------------------------------------------------
# Optimizer primitives
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: list
    v: list
    skipped: int = 0

    @classmethod
    def init(cls, params) -> "AdamState":
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adamw_step(params, grads, state: AdamState, cfg) -> tuple:
    """Adam with bias correction, then decoupled decay p *= (1 - lr*wd).

    Non-finite gradients skip the update entirely (counted in the state).
    Mutates params/state in place and returns them.
    """
    if any(not bool(torch.isfinite(g).all()) for g in grads):
        state.skipped += 1
        return params, state
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            p.add_((m / bc1) / ((v / bc2).sqrt() + _ADAM_EPS), alpha=-cfg.lr)
            if cfg.weight_decay:
                p.mul_(1.0 - cfg.lr * cfg.weight_decay)
    return params, state


def ema_update(ema_params, params, rate: float):
    """ema <- rate * ema + (1 - rate) * params, in place."""
    if not (0 <= rate < 1):
        raise InvalidInputError("ema rate must lie in [0, 1)")
    with torch.no_grad():
        for e, p in zip(ema_params, params):
            e.mul_(rate).add_(p, alpha=1.0 - rate)
    return ema_params


class use_params:
    """Temporarily swap a model's parameters (e.g. to evaluate the EMA)."""

    def __init__(self, model, params):
        self.model = model
        self.params = params

    def __enter__(self):
        self.saved = [p.detach().clone() for p in self.model.parameters()]
        with torch.no_grad():
            for p, q in zip(self.model.parameters(), self.params):
                p.copy_(q)
        return self.model

    def __exit__(self, *exc):
        with torch.no_grad():
            for p, q in zip(self.model.parameters(), self.saved):
                p.copy_(q)
        return False


@dataclass
class TrainResult:
    model: VelocityModel
    ema_params: list
    report: TrainReport
    config: TrainConfig
    adaptive_net: MonotoneGammaNet | None = None
    nfe_before: int | None = None
    nfe_after: int | None = None


def _split(dataset: Dataset, eval_size: int):
    n_eval = min(eval_size, dataset.n // 4)
    return dataset.samples[: dataset.n - n_eval], dataset.samples[dataset.n - n_eval :]


def evaluate_nll(s: LogSnrSchedule, model, eval_x: np.ndarray, cfg: TrainConfig) -> float:
    """Held-out NLL in nats per dimension.

    ``ode`` mode reports the exact continuous model NLL; ``tn`` mode the
    truncated-normal discrete bound (requires data on the 256-level grid).
    """
    d = eval_x.shape[1]
    if cfg.eval_nll == "tn":
        from .data import quantize
        from .dequant import nll_trunc_normal

        bounds = nll_trunc_normal(s, model, quantize(eval_x), K=1, cfg=cfg.solver_config(), seed=cfg.seed, repeats=1)
        return -float(np.mean([b.total_logp for b in bounds])) / d
    logp, _ = ode_log_likelihood(s, model, eval_x, cfg.solver_config())
    return -float(np.mean(logp)) / d


def _mean_sampling_nfe(s: LogSnrSchedule, model, cfg: TrainConfig) -> int:
    _, run = ode_sample(s, model, cfg.nfe_probe_size, cfg.solver_config(), seed=cfg.seed ^ 0x5AFE)
    return run.nfe


def _train_loop(s, cfg, dataset, model, lam, eval_first=None) -> TrainResult:
    from .importance import AdaptiveGamma, adaptive_is_step, sample_gamma, strategy_from_name

    rng = np.random.default_rng(cfg.seed)
    train_x, eval_x = _split(dataset, cfg.eval_size)
    d = dataset.d
    params = list(model.parameters())
    state = AdamState.init(params)
    ema = [p.detach().clone() for p in params]
    strategy = strategy_from_name(cfg.strategy, s, seed=cfg.seed + 1)
    eta_state = None
    if isinstance(strategy, AdaptiveGamma):
        eta_state = AdamState.init(list(strategy.net.parameters()))

    report = TrainReport()
    t0 = time.time()
    nan_streak = 0
    last_loss = math.nan

    for it in range(cfg.iters):
        idx = rng.integers(0, train_x.shape[0], size=cfg.batch_size)
        x0 = torch.from_numpy(train_x[idx])
        eps = torch.from_numpy(rng.standard_normal((cfg.batch_size, d)))
        draws = sample_gamma(strategy, s, cfg.batch_size, rng)
        batch = sample_path(s, x0, eps, torch.from_numpy(draws.gamma))
        weights = torch.from_numpy(draws.is_weight)

        def loss_fn(m, b, p):
            return mixed_loss_per_sample(s, m, b, lam, weights, params=p)

        try:
            loss, grads = loss_and_grad(model, loss_fn, batch)
            nan_streak = 0
        except NumericError:
            nan_streak += 1
            if nan_streak >= 10:
                raise TrainingDivergedError(
                    f"loss non-finite for {nan_streak} consecutive steps at iteration {it}", report=report
                )
            continue
        last_loss = loss
        adamw_step(params, grads, state, cfg)
        ema_update(ema, params, cfg.ema_rate)
        if eta_state is not None:
            adaptive_is_step(s, model, strategy.net, x0, eps, draws.t, eta_state, cfg)

        if cfg.eval_every and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iters):
            if cfg.eval_nll == "none":
                nll = math.nan
            else:
                with use_params(model, ema):
                    nll = evaluate_nll(s, model, eval_x, cfg)
            report.records.append(EvalRecord(it + 1, loss, nll, time.time() - t0))

    return TrainResult(
        model=model,
        ema_params=ema,
        report=report,
        config=cfg,
        adaptive_net=strategy.net if isinstance(strategy, AdaptiveGamma) else None,
    )


def pretrain(s: LogSnrSchedule, cfg: TrainConfig, dataset: Dataset) -> TrainResult:
    """Train a fresh model with the first-order matching objective."""
    if dataset.n < 2:
        raise InvalidInputError("dataset must not be empty")
    model = VelocityModel(
        dim=dataset.d,
        hidden=cfg.hidden,
        gamma_embed_dim=cfg.gamma_embed_dim,
        activation=cfg.activation,
        gamma_min=s.gamma_min,
        gamma_max=s.gamma_max,
        seed=cfg.seed,
    )
    return _train_loop(s, cfg, dataset, model, lam=0.0)


def finetune(s: LogSnrSchedule, cfg: TrainConfig, model: VelocityModel, dataset: Dataset) -> TrainResult:
    """Continue training with the mixed first- plus second-order objective.

    Also measures the mean sampling NFE on a fixed probe set before and
    after, which is the quantity the trace term is meant to improve.
    """
    if dataset.n < 2:
        raise InvalidInputError("dataset must not be empty")
    if model.dim != dataset.d:
        raise InvalidInputError(f"checkpoint dimension {model.dim} does not match data dimension {dataset.d}")
    nfe_before = _mean_sampling_nfe(s, model, cfg)
    result = _train_loop(s, cfg, dataset, model, lam=cfg.lambda_tr)
    nfe_after = _mean_sampling_nfe(s, model, cfg)
    return replace(result, nfe_before=nfe_before, nfe_after=nfe_after)
