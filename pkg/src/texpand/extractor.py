"""Frozen VGG-19 feature extractor for the style loss.

Weights come from a named-tensor archive holding ``conv1_1`` .. ``conv5_1``.
The archive also records the input normalisation (channel mean/std applied
to [0, 1] RGB) so preprocessing is data, not code.

Two archive producers are provided: ``convert_torchvision_vgg19`` for the
ImageNet-trained weights (needs torchvision and either network access or a
downloaded ``.pth``), and ``make_random_extractor`` for a seeded,
He-initialised stand-in that lets everything run offline. The stand-in is
not pretrained and is labelled as such in its metadata.
"""

from __future__ import annotations

import json
import logging
import math
import os

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import file_sha256, load_archive, save_archive
from .errors import ArchiveError, ExtractorError, IntegrityError

log = logging.getLogger(__name__)

# name -> (in, out) channels in the reference network
VGG19_CONVS = {
    "conv1_1": (3, 64),
    "conv1_2": (64, 64),
    "conv2_1": (64, 128),
    "conv2_2": (128, 128),
    "conv3_1": (128, 256),
    "conv3_2": (256, 256),
    "conv3_3": (256, 256),
    "conv3_4": (256, 256),
    "conv4_1": (256, 512),
    "conv4_2": (512, 512),
    "conv4_3": (512, 512),
    "conv4_4": (512, 512),
    "conv5_1": (512, 512),
}
TAPS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
TORCHVISION_INDEX = {
    "conv1_1": 0, "conv1_2": 2, "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14, "conv3_4": 16,
    "conv4_1": 19, "conv4_2": 21, "conv4_3": 23, "conv4_4": 25, "conv5_1": 28,
}  # fmt: skip
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

ACQUIRE_HINT = (
    "create one with `texpand extractor convert --out vgg19.safetensors` (ImageNet VGG-19 via "
    "torchvision, needs network access or --weights <vgg19.pth>), or "
    "`texpand extractor random --out vgg19-random.safetensors` for an offline, non-pretrained stand-in"
)


class FeatureExtractor(nn.Module):
    """Returns the five ``relu*_1`` activations for canonical-range input."""

    def __init__(self, convs: dict, mean, std, source: str = "unknown"):
        super().__init__()
        self.source = source
        self.convs = nn.ModuleDict()
        for name in VGG19_CONVS:
            weight, bias = convs[name]
            conv = nn.Conv2d(weight.shape[1], weight.shape[0], weight.shape[2], padding=weight.shape[2] // 2)
            with torch.no_grad():
                conv.weight.copy_(torch.as_tensor(weight))
                conv.bias.copy_(torch.as_tensor(bias))
            self.convs[name] = conv
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # frozen: never switch to training mode
        return super().train(False)

    @property
    def tap_channels(self):
        return tuple(self.convs[f"conv{i}_1"].out_channels for i in range(1, 6))

    def forward(self, x):
        x = ((x + 1.0) * 0.5 - self.mean) / self.std
        taps = []
        for block in range(1, 6):
            if block > 1:
                x = F.max_pool2d(x, 2)
            for name in (n for n in VGG19_CONVS if n.startswith(f"conv{block}_")):
                x = F.relu(self.convs[name](x))
                if name.endswith("_1"):
                    taps.append(x)
        return taps


def _check_chain(convs):
    prev = 3
    for name in VGG19_CONVS:
        weight, bias = convs[name]
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
            raise ExtractorError(f"{name}.weight has unexpected shape {weight.shape}")
        if weight.shape[1] != prev:
            raise ExtractorError(f"{name} expects {weight.shape[1]} input channels, previous layer gives {prev}")
        if bias.shape != (weight.shape[0],):
            raise ExtractorError(f"{name}.bias has shape {bias.shape}, expected ({weight.shape[0]},)")
        prev = weight.shape[0]


def load_extractor(path, expected_sha256: str | None = None) -> FeatureExtractor:
    path = os.fspath(path) if path is not None else None
    if not path or not os.path.exists(path):
        raise ExtractorError(f"extractor weights not found at {path!r}; {ACQUIRE_HINT}")
    if expected_sha256 is not None:
        actual = file_sha256(path)
        if actual != expected_sha256:
            raise IntegrityError(f"extractor checksum mismatch for {path}: expected {expected_sha256}, got {actual}")
    try:
        tensors, metadata = load_archive(path)
    except ArchiveError as exc:
        raise ExtractorError(f"cannot load extractor archive {path}: {exc}") from exc
    missing = [f"{n}.{p}" for n in VGG19_CONVS for p in ("weight", "bias") if f"{n}.{p}" not in tensors]
    if missing:
        raise ExtractorError(f"extractor archive {path} lacks layers {missing[:4]}; {ACQUIRE_HINT}")
    convs = {n: (tensors[f"{n}.weight"], tensors[f"{n}.bias"]) for n in VGG19_CONVS}
    _check_chain(convs)
    mean = json.loads(metadata.get("input_mean", json.dumps(IMAGENET_MEAN)))
    std = json.loads(metadata.get("input_std", json.dumps(IMAGENET_STD)))
    return FeatureExtractor(convs, mean, std, metadata.get("source", "unknown"))


def _save(out_path, convs, source, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    tensors = {}
    for name, (w, b) in convs.items():
        tensors[f"{name}.weight"] = np.asarray(w, dtype=np.float32)
        tensors[f"{name}.bias"] = np.asarray(b, dtype=np.float32)
    meta = {
        "kind": "vgg19-features",
        "source": source,
        "input_mean": json.dumps(list(mean)),
        "input_std": json.dumps(list(std)),
    }
    save_archive(out_path, tensors, meta)
    return file_sha256(out_path)


def make_random_extractor(out_path, seed: int = 0, width_divisor: int = 1) -> str:
    """Write a seeded He-initialised VGG-19 trunk; returns the file sha256.

    ``width_divisor`` shrinks every layer's channel count, which keeps CPU
    smoke runs affordable.
    """
    rng = np.random.default_rng(seed)
    convs = {}
    for name, (cin, cout) in VGG19_CONVS.items():
        cin = cin if cin == 3 else cin // width_divisor
        cout = cout // width_divisor
        std = math.sqrt(2.0 / (cin * 9))
        convs[name] = (rng.normal(0.0, std, size=(cout, cin, 3, 3)), np.zeros(cout))
    return _save(out_path, convs, f"random-he seed={seed} width_divisor={width_divisor} (not pretrained)")


def convert_torchvision_vgg19(out_path, weights_path=None) -> str:
    """Convert ImageNet VGG-19 weights to an extractor archive; returns the file sha256."""
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        prefix = "features."
    else:
        try:
            from torchvision.models import VGG19_Weights, vgg19
        except ImportError as exc:
            raise ExtractorError("torchvision is required to download VGG-19 weights") from exc
        state = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).state_dict()
        prefix = "features."
    convs = {}
    for name, idx in TORCHVISION_INDEX.items():
        key = f"{prefix}{idx}"
        try:
            convs[name] = (state[f"{key}.weight"].numpy(), state[f"{key}.bias"].numpy())
        except KeyError as exc:
            raise ExtractorError(f"weights lack {key}; is this a torchvision VGG-19 state dict?") from exc
    sha = _save(out_path, convs, "torchvision vgg19 IMAGENET1K_V1")
    log.info("wrote %s sha256=%s", out_path, sha)
    return sha
