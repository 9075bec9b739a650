"""Dense velocity networks and the monotone reparameterization network.

:class:`VelocityModel` is a small fully-connected network predicting the
normalized velocity ``v_tilde(x, gamma)``. Everything runs in float64 on
CPU: likelihood numbers are sensitive to solver error and the models are
tiny, so there is no reason to give up precision. gamma enters through a
fixed sinusoidal feature map of the rescaled time
``(gamma - gamma_min) / (gamma_max - gamma_min)``.

Reverse-mode gradients (training) come from torch autograd; forward-mode
tangents (Jacobian-vector products for divergences) come from
``torch.func.jvp``. The two compose, which is what the second-order trace
objective needs.

:class:`MonotoneGammaNet` is the learned time-warp used by adaptive
importance sampling: a 1 -> 1024 -> 1 network with positive weights
(enforced by exponential reparameterization) and a sigmoid hidden layer,
rescaled so that t=0 and t=1 map exactly onto the gamma interval endpoints.

Checkpoints are a single JSON header line followed by a little-endian
float64 block holding all parameters in declaration order.
"""

from __future__ import annotations

import enum
import json
import math

import numpy as np
import torch
from torch import nn

from .errors import InvalidInputError, NumericError, ParseError, UnsupportedVersionError

CHECKPOINT_MAGIC = "dode-checkpoint"
CHECKPOINT_VERSION = 1


class Activation(str, enum.Enum):
    SILU = "silu"
    TANH = "tanh"


_ACT_FN = {Activation.SILU: torch.nn.functional.silu, Activation.TANH: torch.tanh}


def _glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class VelocityModel(nn.Module):
    """MLP over (x, gamma-features) -> normalized velocity, float64."""

    def __init__(
        self,
        dim: int,
        hidden=(128, 128, 128),
        gamma_embed_dim: int = 4,
        activation="silu",
        gamma_min: float = -13.3,
        gamma_max: float = 5.0,
        seed: int = 0,
    ):
        super().__init__()
        if dim < 1:
            raise InvalidInputError("dim must be >= 1")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.gamma_embed_dim = int(gamma_embed_dim)
        self.activation = Activation(activation)
        self.gamma_min = float(gamma_min)
        self.gamma_max = float(gamma_max)
        self.seed = int(seed)

        feat = 1 + 2 * self.gamma_embed_dim
        widths = [self.dim + feat, *self.hidden, self.dim]
        rng = np.random.default_rng(seed)
        layers = []
        for i in range(len(widths) - 1):
            lin = nn.Linear(widths[i], widths[i + 1], dtype=torch.float64)
            last = i == len(widths) - 2
            with torch.no_grad():
                if last:
                    lin.weight.zero_()
                    lin.bias.zero_()
                else:
                    w = _glorot_uniform(rng, widths[i], widths[i + 1])
                    lin.weight.copy_(torch.from_numpy(w))
                    lin.bias.zero_()
            layers.append(lin)
        self.layers = nn.ModuleList(layers)

    @property
    def widths(self) -> list[int]:
        feat = 1 + 2 * self.gamma_embed_dim
        return [self.dim + feat, *self.hidden, self.dim]

    def config(self) -> dict:
        return {
            "dim": self.dim,
            "hidden": list(self.hidden),
            "gamma_embed_dim": self.gamma_embed_dim,
            "activation": self.activation.value,
            "gamma_min": self.gamma_min,
            "gamma_max": self.gamma_max,
            "seed": self.seed,
        }

    def gamma_features(self, gamma: torch.Tensor) -> torch.Tensor:
        """(n,) -> (n, 1 + 2K) features [g, sin(2^k g), cos(2^k g)]."""
        g = (gamma - self.gamma_min) / (self.gamma_max - self.gamma_min)
        freqs = 2.0 ** torch.arange(self.gamma_embed_dim, dtype=torch.float64)
        ang = g[:, None] * freqs[None, :]
        return torch.cat([g[:, None], torch.sin(ang), torch.cos(ang)], dim=1)

    def _coerce(self, x, gamma):
        x = torch.as_tensor(x, dtype=torch.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x.unsqueeze(0)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise InvalidInputError(f"expected x with {self.dim} columns, got shape {tuple(x.shape)}")
        gamma = torch.as_tensor(gamma, dtype=torch.float64)
        if gamma.ndim == 0:
            gamma = gamma.expand(x.shape[0])
        elif gamma.shape != (x.shape[0],):
            raise InvalidInputError("gamma must be a scalar or match the batch size")
        return x, gamma, squeeze

    def forward(self, x, gamma) -> torch.Tensor:
        x, gamma, squeeze = self._coerce(x, gamma)
        act = _ACT_FN[self.activation]
        h = torch.cat([x, self.gamma_features(gamma)], dim=1)
        for lin in self.layers[:-1]:
            h = act(lin(h))
        out = self.layers[-1](h)
        return out[0] if squeeze else out

    def jvp(self, x, gamma, tangent):
        """Value and Jacobian-vector product with respect to x (gamma fixed)."""
        x2, gamma2, squeeze = self._coerce(x, gamma)
        tan = torch.as_tensor(tangent, dtype=torch.float64)
        if tan.ndim == 1:
            tan = tan.unsqueeze(0).expand_as(x2)
        if tan.shape != x2.shape:
            raise InvalidInputError("tangent must have the same shape as x")
        value, jvp = torch.func.jvp(lambda xx: self.forward(xx, gamma2), (x2,), (tan.contiguous(),))
        if squeeze:
            return value[0], jvp[0]
        return value, jvp

    def trace_jacobian(self, x, gamma) -> torch.Tensor:
        """Exact tr(d output / d x), per sample, via dim basis tangents."""
        x2, gamma2, squeeze = self._coerce(x, gamma)
        tr = torch.zeros(x2.shape[0], dtype=torch.float64)
        for k in range(self.dim):
            tan = torch.zeros_like(x2)
            tan[:, k] = 1.0
            _, jv = torch.func.jvp(lambda xx: self.forward(xx, gamma2), (x2,), (tan,))
            tr = tr + jv[:, k]
        return tr[0] if squeeze else tr

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([p.detach().numpy().ravel() for p in self.parameters()])

    def load_parameter_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(vec[offset : offset + n].reshape(p.shape)))
                offset += n
        if offset != vec.size:
            raise InvalidInputError(f"parameter vector has {vec.size} entries, model needs {offset}")


def loss_and_grad(model: nn.Module, loss_fn, batch):
    """Scalar loss and exact parameter gradients (reverse accumulation).

    ``loss_fn(model, batch, params)`` must return per-sample losses, calling
    the model through the supplied parameter mapping; the scalar loss is
    their mean. Gradients are computed with ``torch.func.grad`` so that losses
    containing forward-mode tangents (the trace objective) differentiate
    correctly. A non-finite per-sample loss raises NumericError carrying the
    offending batch index.
    """
    names = [n for n, _ in model.named_parameters()]
    params = {n: p.detach() for n, p in model.named_parameters()}

    def scalar(p):
        per = loss_fn(model, batch, p)
        return per.mean(), per

    grads, (loss, per_sample) = torch.func.grad_and_value(scalar, has_aux=True)(params)
    finite = torch.isfinite(per_sample)
    if not bool(finite.all()):
        idx = int(torch.nonzero(~finite)[0])
        raise NumericError(f"non-finite loss at batch index {idx}", index=idx)
    return float(loss), [grads[n] for n in names]


class MonotoneGammaNet(nn.Module):
    """Strictly increasing map t in [0,1] -> gamma in [gamma_min, gamma_max].

    gamma(t) = gamma_min + (gamma_max - gamma_min) * u(t) with
    u(t) = (g(t) - g(0)) / (g(1) - g(0)) and g(t) = w2 . sigmoid(w1 t + b1),
    where w1 = exp(raw_w1) and w2 = exp(raw_w2) are elementwise positive.
    The rescaling makes the endpoints exact by construction.
    """

    def __init__(self, gamma_min: float = -13.3, gamma_max: float = 5.0, width: int = 1024, seed: int = 0):
        super().__init__()
        self.gamma_min = float(gamma_min)
        self.gamma_max = float(gamma_max)
        self.width = int(width)
        rng = np.random.default_rng(seed)
        # near-linear initial warp: unit-scale first layer, biases spreading
        # the sigmoids across t in [0, 1]
        self.raw_w1 = nn.Parameter(torch.from_numpy(rng.normal(0.0, 0.25, self.width)))
        self.b1 = nn.Parameter(torch.from_numpy(rng.uniform(-1.5, 0.5, self.width)))
        self.raw_w2 = nn.Parameter(torch.from_numpy(rng.normal(-math.log(self.width), 0.25, self.width)))

    def raw_warp(self, t: torch.Tensor) -> torch.Tensor:
        w1 = torch.exp(self.raw_w1)
        w2 = torch.exp(self.raw_w2)
        return torch.sigmoid(t[:, None] * w1[None, :] + self.b1[None, :]) @ w2

    def gamma_of_t(self, t: torch.Tensor) -> torch.Tensor:
        """Differentiable gamma(t) for a batch of t values."""
        ends = torch.tensor([0.0, 1.0], dtype=torch.float64)
        g = self.raw_warp(torch.cat([t, ends]))
        g0, g1 = g[-2], g[-1]
        u = (g[:-2] - g0) / (g1 - g0)
        return self.gamma_min * (1.0 - u) + self.gamma_max * u


def monotone_gamma(net: MonotoneGammaNet, t):
    """gamma(t) and dgamma/dt (forward-mode tangent), scalar or batch."""
    t_t = torch.as_tensor(t, dtype=torch.float64)
    squeeze = t_t.ndim == 0
    t_t = t_t.reshape(-1)
    if bool((~torch.isfinite(t_t)).any()) or bool((t_t < 0).any()) or bool((t_t > 1).any()):
        raise InvalidInputError("t must lie in [0, 1]")
    gamma, dgamma = torch.func.jvp(net.gamma_of_t, (t_t,), (torch.ones_like(t_t),))
    if squeeze:
        return float(gamma[0]), float(dgamma[0])
    return gamma, dgamma


# ---------------------------------------------------------------------------
# Checkpoint serialization: JSON header line + raw little-endian float64 block
# ---------------------------------------------------------------------------


def save_checkpoint(model: VelocityModel, path, *, seed=None, iteration=0, schedule_kind=None, params=None):
    """Write the model (or an alternative parameter vector, e.g. EMA) to disk."""
    vec = model.parameter_vector() if params is None else np.asarray(params, dtype=np.float64)
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        **model.config(),
        "schedule": schedule_kind,
        "iteration": int(iteration),
        "param_count": int(vec.size),
    }
    if seed is not None:
        header["seed"] = int(seed)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(vec.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (model, header)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError("no header line found", offset=len(raw))
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad checkpoint header: {exc}", offset=0) from exc
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ParseError(f"not a checkpoint file (format={header.get('format')!r})", offset=0)
    if header.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {header.get('version')} not supported", offset=0
        )
    blob = raw[nl + 1 :]
    count = int(header["param_count"])
    if len(blob) != 8 * count:
        raise ParseError(
            f"parameter block has {len(blob)} bytes, expected {8 * count}", offset=nl + 1 + len(blob)
        )
    vec = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    model = VelocityModel(
        dim=header["dim"],
        hidden=header["hidden"],
        gamma_embed_dim=header["gamma_embed_dim"],
        activation=header["activation"],
        gamma_min=header["gamma_min"],
        gamma_max=header["gamma_max"],
        seed=header.get("seed", 0),
    )
    model.load_parameter_vector(vec)
    return model, header
