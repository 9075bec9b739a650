"""Desk-scale maximum-likelihood training and exact likelihood evaluation
of flow ODEs in negative log-SNR time."""

__version__ = "0.1.0"

from .data import Dataset, generate, level_center, quantize
from .dequant import (
    LikelihoodBound,
    TruncNormParams,
    bpd,
    nll_trunc_normal,
    nll_uniform,
    nll_variational,
    tn_entropy_correction,
    tn_log_density,
    tn_sample,
    trunc_norm_params,
)
from .errors import (
    DodeError,
    InvalidInputError,
    NonConvergenceError,
    NumericError,
    ParseError,
    SingularityError,
    TrainingDivergedError,
    UnsupportedVersionError,
)
from .estimator import DiffusionDensity
from .gaussian import GaussianFieldModel, IsoGaussianMixture
from .importance import (
    AdaptiveGamma,
    DesignedGamma,
    GammaDraw,
    GammaDraws,
    UniformGamma,
    adaptive_is_step,
    mse_profile,
    sample_gamma,
    variance_profile,
)
from .nets import MonotoneGammaNet, VelocityModel, load_checkpoint, loss_and_grad, monotone_gamma, save_checkpoint
from .objectives import (
    PathSample,
    PredictorKind,
    convert_predictor,
    fm_loss,
    fm_trace_loss,
    mixed_loss,
    preconditioning,
    sample_path,
)
from .odeflow import Exact, Hutchinson, divergence, drift, integrate_field, ode_log_likelihood, ode_sample
from .schedule import (
    LogSnrSchedule,
    ScheduleEval,
    ScheduleKind,
    designed_density,
    designed_gamma_of_t,
    eval_schedule,
    schedule_terms,
)
from .solver import SolverConfig, SolverRun, integrate
from .trainer import TrainConfig, TrainReport, TrainResult, adamw_step, ema_update, finetune, pretrain

__all__ = [name for name in dir() if not name.startswith("_")]
