"""Conditional denoising diffusion: schedule, denoiser, training and sampling."""
from .schedule import NoiseSchedule, build_schedule, forward_noise, reverse_step
from .denoiser import Denoiser, DenoiserConfig
from .core import (MODES, IntegrationMode, LoadedModel, Normalizer, TrainResult, TrainRunConfig,
                   TrainingDiverged, condition_pack, load_model, predict_noise, resolve_mode,
                   sample, save_model, step_loss, train)

__all__ = ["NoiseSchedule", "build_schedule", "forward_noise", "reverse_step", "Denoiser",
           "DenoiserConfig", "MODES", "IntegrationMode", "LoadedModel", "Normalizer", "TrainResult",
           "TrainRunConfig", "TrainingDiverged", "condition_pack", "load_model", "predict_noise",
           "resolve_mode", "sample", "save_model", "step_loss", "train"]
