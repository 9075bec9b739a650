"""Adaptive Dormand-Prince 5(4) integration.

A plain explicit RK solver with the embedded 4th-order error estimate,
FSAL stage reuse, and PI step-size control. Written against 1-D float64
numpy state vectors so callers can pack whatever augmented system they
need (batches are flattened into one state).

Acceptance test per step: with per-component scale
``atol + rtol * max(|y_i|, |y_new_i|)``, a step is accepted when the
RMS of the scaled error estimate is <= 1. Step-size factors are clamped
to [0.2, 10]. The final step is clipped to land exactly on the requested
endpoint. ``nfe`` counts actual right-hand-side evaluations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NonConvergenceError, NumericError

# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# 5th-order minus embedded 4th-order weights
_EERR = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_PI_BETA = 0.04
_PI_EXPO = 0.2 - 0.75 * _PI_BETA


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 100_000
    initial_step: float | None = None

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise InvalidInputError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise InvalidInputError("max_steps must be >= 1")


@dataclass
class SolverRun:
    final_state: np.ndarray
    nfe: int
    accepted: int
    rejected: int


def _rms(v: np.ndarray) -> float:
    return float(np.sqrt(np.mean(v * v)))


def _initial_step(rhs, t0, y0, f0, direction, span, rtol, atol):
    """Heuristic first step; returns (h, extra_nfe).

    A vanishing right-hand side proposes the full interval, so trivial
    fields integrate in a single accepted step.
    """
    scale = atol + rtol * np.abs(y0)
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    if d1 <= 1e-15:
        return span, 0
    h0 = 1e-6 if d0 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + h0 * direction * f0
    f1 = rhs(t0 + h0 * direction, y1)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = span
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span), 1


def integrate(rhs, state, gamma_from: float, gamma_to: float, cfg: SolverConfig | None = None) -> SolverRun:
    """Integrate ``dy/dgamma = rhs(gamma, y)`` from gamma_from to gamma_to.

    Either direction is allowed; the two endpoints must differ.
    """
    cfg = cfg or SolverConfig()
    if not (math.isfinite(gamma_from) and math.isfinite(gamma_to)):
        raise InvalidInputError("integration endpoints must be finite")
    if gamma_from == gamma_to:
        raise InvalidInputError("gamma_from and gamma_to must differ")
    y = np.array(state, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("initial state must be finite")

    t, t_end = float(gamma_from), float(gamma_to)
    direction = 1.0 if t_end > t else -1.0
    span = abs(t_end - t)

    f = np.asarray(rhs(t, y), dtype=np.float64)
    nfe = 1
    if cfg.initial_step is not None:
        h = min(abs(float(cfg.initial_step)), span)
        if h <= 0:
            raise InvalidInputError("initial_step must be nonzero")
    else:
        h, extra = _initial_step(rhs, t, y, f, direction, span, cfg.rtol, cfg.atol)
        nfe += extra

    accepted = rejected = 0
    err_prev = 1e-4
    just_rejected = False
    k = np.empty((7, y.size), dtype=np.float64)

    while (t_end - t) * direction > 0:
        if accepted + rejected >= cfg.max_steps:
            raise NonConvergenceError(
                f"no convergence within {cfg.max_steps} steps (reached gamma={t:g})",
                partial_state=y,
                gamma_reached=t,
            )
        remaining = abs(t_end - t)
        final = h >= remaining
        hs = (remaining if final else h) * direction

        k[0] = f
        for i in range(1, 7):
            yi = y + hs * (np.asarray(_A[i]) @ k[:i])
            k[i] = rhs(t + _C[i] * hs, yi)
        nfe += 6
        y_new = y + hs * (_B5 @ k)
        err_vec = hs * (_EERR @ k)
        if not np.all(np.isfinite(y_new)):
            raise NumericError(f"state became non-finite near gamma={t:g}")

        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = _rms(err_vec / scale)
        if not math.isfinite(err):
            raise NumericError(f"error estimate became non-finite near gamma={t:g}")

        if err <= 1.0:
            t = t_end if final else t + hs
            y = y_new
            f = k[6].copy()  # FSAL; copy so a later rejected attempt cannot alias it
            accepted += 1
            if err == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = min(
                    _MAX_FACTOR,
                    max(_MIN_FACTOR, _SAFETY * err ** (-_PI_EXPO) * err_prev**_PI_BETA),
                )
            if just_rejected:
                factor = min(factor, 1.0)
                just_rejected = False
            err_prev = max(err, 1e-4)
            h = min(abs(hs) * factor, span * _MAX_FACTOR)
        else:
            rejected += 1
            just_rejected = True
            h = abs(hs) * max(_MIN_FACTOR, min(1.0, _SAFETY * err**-0.2))

    return SolverRun(final_state=y, nfe=nfe, accepted=accepted, rejected=rejected)
