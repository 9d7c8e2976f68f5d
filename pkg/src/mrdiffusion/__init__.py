"""Conditional denoising diffusion for under-sampled MRI reconstruction."""

from .denoiser import DenoiserConfig, init_params, param_count
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    IncompatibleCheckpointError,
    InvalidInputError,
    MRDiffusionError,
    NumericalError,
)
from .sampler import SampleConfig, ensemble_sample, reverse_step, sample_one
from .schedule import DiffusionSchedule, build_schedule, linear_beta, predict_x0, q_sample
from .trainer import Checkpoint, TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
