"""Desk-scale diffusion model laboratory.

Small, fully inspectable pieces: noise schedules and the forward process, a
numpy autodiff engine, MLP and analytic noise predictors, training with
input-perturbation and Lipschitz-penalty variants, the standard reverse
samplers, and measurement tools for exposure bias and sample quality.
"""

__version__ = "0.1.0"

from .datasets import Dataset, load_idx, make_synthetic, ring_mixture_params, save_idx
from .errors import BudgetError, ConfigError, DataError, DiffusionLabError, NumericError
from .metrics import (
    BiasTable,
    ErrorStats,
    MetricReport,
    NormalityVerdict,
    PrecisionRecall,
    empirical_lipschitz,
    energy_distance,
    energy_distance_test,
    exposure_bias_deterministic,
    exposure_bias_stochastic,
    fit_gaussian_stats,
    frechet_gaussian_distance,
    knn_precision_recall,
    normality_test,
    prediction_error_stats,
)
from .models import (
    AnalyticGaussianEps,
    MlpEps,
    TimeEmbedding,
    init_mlp,
    load_checkpoint,
    predict_eps,
    save_checkpoint,
)
from .rng import stream
from .sampling import SamplerConfig, SampleTrajectory, reverse_from, reverse_step, sample
from .schedules import (
    ForwardDraw,
    NoiseSchedule,
    RespacedSchedule,
    forward_step,
    make_cosine_schedule,
    make_linear_schedule,
    predict_x0,
    q_sample,
    q_sample_perturbed,
    q_sample_scaled,
    respace,
    write_schedule_table,
)
from .tensor import (
    Tape,
    Tensor,
    grad,
    jacobian_frobenius_sq,
    load_tensors,
    no_grad,
    save_tensors,
    zero_grads,
)
from .training import (
    TrainConfig,
    TrainerState,
    ema_update,
    loss_ddpm_y,
    loss_gp,
    loss_ip,
    loss_standard,
    loss_wd,
    optimizer_step,
    train,
)
