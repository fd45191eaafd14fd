"""Guidance laboratory on Gaussian mixtures.

Closed-form mixture oracles, a small trainable denoiser, classifier-free,
independent-condition and time-step guidance, reverse-time samplers and
sample-quality metrics.
"""

__version__ = "0.1.0"

from guidelab.denoiser import MlpDenoiser, TrainConfig, load_checkpoint, save_checkpoint, train
from guidelab.gmm import (GaussianMixture, IndependentConditionLaw, NoiseSchedule,
                          OracleDenoiser, sym_pair)
from guidelab.guidance import GuidanceConfig, TsgSchedule, guided_denoise
from guidelab.metrics import MetricsReport, evaluate, frechet_gaussian, knn_precision_recall
from guidelab.samplers import SamplerConfig, offset_time_sample, sample

__all__ = [
    "GaussianMixture", "GuidanceConfig", "IndependentConditionLaw", "MetricsReport",
    "MlpDenoiser", "NoiseSchedule", "OracleDenoiser", "SamplerConfig", "TrainConfig",
    "TsgSchedule", "evaluate", "frechet_gaussian", "guided_denoise", "knn_precision_recall",
    "load_checkpoint", "offset_time_sample", "sample", "save_checkpoint", "sym_pair", "train",
]
