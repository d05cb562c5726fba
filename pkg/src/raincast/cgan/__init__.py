"""Conditional GAN for per-frame radiance -> rain translation."""

from .checkpoint import load_checkpoint, save_checkpoint
from .models import (
    Discriminator,
    Generator,
    PerceptualExtractor,
    discriminator_forward,
    generator_forward,
    perceptual_features,
)
from .train import (
    Adam,
    GanArchitecture,
    GanState,
    GeneratorLossTerms,
    TrainConfig,
    cyclic_lr,
    flatten_pairs,
    loss_discriminator,
    loss_generator,
    perceptual_distance,
    predict,
    train,
    train_step,
)

__all__ = [
    "Adam",
    "Discriminator",
    "GanArchitecture",
    "GanState",
    "Generator",
    "GeneratorLossTerms",
    "PerceptualExtractor",
    "TrainConfig",
    "cyclic_lr",
    "discriminator_forward",
    "flatten_pairs",
    "generator_forward",
    "load_checkpoint",
    "loss_discriminator",
    "loss_generator",
    "perceptual_distance",
    "perceptual_features",
    "predict",
    "save_checkpoint",
    "train",
    "train_step",
]
