import os

import numpy as np
import pytest
import torch

from texpand.extractor import load_extractor, make_random_extractor
from texpand.generator import GeneratorSpec, build_generator
from texpand.trainer import TrainingConfig

DATA = os.path.join(os.path.dirname(__file__), "data")
EXEMPLAR = os.path.join(DATA, "stationary_256.png")

TINY_SPEC = GeneratorSpec(base_channels=4, num_resblocks=2)


def random_image(h, w, seed=0, channels=3):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(channels, h, w, generator=g) * 2 - 1


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_extractor_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("extractor") / "vgg_tiny.safetensors"
    make_random_extractor(path, seed=0, width_divisor=16)
    return str(path)


@pytest.fixture(scope="session")
def full_extractor_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("extractor") / "vgg_full.safetensors"
    make_random_extractor(path, seed=0, width_divisor=1)
    return str(path)


@pytest.fixture(scope="session")
def tiny_extractor(tiny_extractor_path):
    return load_extractor(tiny_extractor_path)


@pytest.fixture
def tiny_generator():
    return build_generator(TINY_SPEC, 0)


@pytest.fixture
def tiny_config(tmp_path, tiny_extractor_path):
    return TrainingConfig(
        exemplar=EXEMPLAR,
        output_dir=str(tmp_path / "run"),
        k=16,
        total_iterations=40,
        lr_constant_until=20,
        disc_layers=3,
        disc_base_channels=8,
        disc_channel_cap=32,
        gen_base_channels=4,
        gen_resblocks=2,
        extractor=tiny_extractor_path,
        deterministic=True,
        checkpoint_every=0,
        log_every=1,
    )
