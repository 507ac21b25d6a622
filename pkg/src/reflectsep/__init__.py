"""Generative single-image reflection separation.

Synthesize observations from (transmission, reflection) scene pairs, train
adversarial encoder/decoder separators, and score separations with PSNR/SSIM.
"""
from .estimator import ReflectionSeparator, check_images
from .losses import LossReport, LossWeights
from .networks import SeparatorModel, Variant, init_model, separate
from .synthesis import SynthModelKind, SynthParams, TrainingPair
from .training import Mode, TrainConfig, fit, grad_check, split_halves

__all__ = [
    "LossReport", "LossWeights", "Mode", "ReflectionSeparator", "SeparatorModel",
    "SynthModelKind", "SynthParams", "TrainConfig", "TrainingPair", "Variant",
    "check_images", "fit", "grad_check", "init_model", "separate", "split_halves",
]

__version__ = "0.1.0"
