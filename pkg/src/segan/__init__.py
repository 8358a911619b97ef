"""Symmetric-equilibrium GAN for vessel segmentation on a minimal f64 autodiff core."""

from .tensor import Tape, Tensor, backward
from .model import ChannelPlan, Discriminator, Generator, build_discriminator, build_generator

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "ChannelPlan",
    "Generator",
    "Discriminator",
    "build_generator",
    "build_discriminator",
]
