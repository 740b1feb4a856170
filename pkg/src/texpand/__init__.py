"""Per-exemplar adversarial texture expansion."""

from .discriminator import Discriminator, DiscriminatorSpec, build_discriminator, patch_size
from .generator import Generator, GeneratorSpec, build_generator, receptive_field
from .imagecore import load_image, perlin, save_image
from .trainer import TrainingConfig, load_generator, train

__version__ = "0.1.0"

__all__ = [
    "Discriminator",
    "DiscriminatorSpec",
    "Generator",
    "GeneratorSpec",
    "TrainingConfig",
    "build_discriminator",
    "build_generator",
    "load_generator",
    "load_image",
    "patch_size",
    "perlin",
    "receptive_field",
    "save_image",
    "train",
]
