import numpy as np
import pytest
import torch
import torch.nn as nn

from texpand.archive import NetworkWeights
from texpand.errors import ImageError, SpecError
from texpand.generator import (
    GeneratorSpec,
    build_generator,
    feature_difference,
    full_receptive_field,
    generator_forward,
    output_window,
    receptive_field,
    visualize_features,
)

from .conftest import TINY_SPEC, random_image


@pytest.fixture(scope="module")
def default_generator():
    return build_generator(GeneratorSpec(), 0)


@pytest.mark.parametrize("h,w", [(64, 64), (96, 128), (128, 128), (200, 256), (256, 200), (16, 20)])
def test_output_doubles(default_generator, h, w):
    out = generator_forward(default_generator, random_image(h, w))
    assert out.shape == (3, 2 * h, 2 * w)
    assert out.min() >= -1 and out.max() <= 1


def test_exemplar_scale(tiny_generator):
    out = generator_forward(tiny_generator, random_image(400, 600))
    assert out.shape == (3, 800, 1200)


def test_inference_deterministic(default_generator):
    img = random_image(64, 96, seed=4)
    a = generator_forward(default_generator, img)
    b = generator_forward(default_generator, img)
    assert torch.equal(a, b)
    assert default_generator.training  # mode restored


def test_build_is_seeded():
    a = build_generator(TINY_SPEC, 3)
    b = build_generator(TINY_SPEC, 3)
    c = build_generator(TINY_SPEC, 4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_init_statistics(default_generator):
    checked = 0
    for m in default_generator.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) and m.weight.numel() >= 10_000:
            std = float(m.weight.detach().std())
            assert 0.016 <= std <= 0.024
            assert abs(float(m.weight.detach().mean())) < 0.005
            checked += 1
        if isinstance(m, nn.BatchNorm2d):
            assert torch.all(m.bias == 0) and torch.all(m.weight == 1)
    assert checked >= 8


def test_channel_plan():
    spec = GeneratorSpec()
    assert spec.encoder_channels == (64, 128, 256)
    assert spec.decoder_channels == (512, 256, 128, 64)
    net = build_generator(spec, 0)
    assert net.widen.conv.weight.shape == (512, 256, 3, 3)
    assert net.head.weight.shape == (3, 64, 7, 7)


def test_zero_resblocks():
    spec = GeneratorSpec(base_channels=4, num_resblocks=0)
    assert receptive_field(spec) == 13
    out = generator_forward(build_generator(spec, 0), random_image(32, 32))
    assert out.shape == (3, 64, 64)


def test_input_errors(tiny_generator):
    with pytest.raises(ImageError, match="divisible by 4"):
        generator_forward(tiny_generator, random_image(30, 32))
    with pytest.raises(ImageError, match="too small"):
        generator_forward(tiny_generator, random_image(12, 32))
    with pytest.raises(ImageError):
        generator_forward(tiny_generator, random_image(32, 32, channels=1))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"encoder_strides": (2, 2, 2)},
        {"encoder_kernels": (7, 3)},
        {"num_upsamples": 2},
        {"resblock_kernel": 4},
        {"padding": "circular"},
        {"output_nonlinearity": "sigmoid"},
        {"base_channels": 0},
    ],
)
def test_spec_errors(kwargs):
    with pytest.raises(SpecError):
        GeneratorSpec(**kwargs)


def test_spec_round_trip():
    spec = GeneratorSpec(num_resblocks=3, padding="zeros")
    assert GeneratorSpec.from_dict(spec.to_dict()) == spec
    assert spec.hash() == GeneratorSpec.from_dict(spec.to_dict()).hash()
    assert spec.hash() != GeneratorSpec().hash()


def test_full_rf_and_window():
    spec = GeneratorSpec()
    assert full_receptive_field(spec) == 127
    (r0, r1), (c0, c1) = output_window(spec, 160, 160)
    assert (r0, r1) == (c0, c1) == (18, 142)


def _support(grad):
    rows = grad.abs().sum(dim=(0, 1, 3)).nonzero().flatten()
    cols = grad.abs().sum(dim=(0, 1, 2)).nonzero().flatten()
    return (int(rows.min()), int(rows.max())), (int(cols.min()), int(cols.max()))


def output_pixel_support(net, size, row, col):
    net.eval()
    x = (random_image(size, size, seed=9).unsqueeze(0) * 0.5 + 0.5).requires_grad_(True)
    net(x)[0, :, row, col].sum().backward()
    return _support(x.grad)


def test_gradient_support_random_weights(default_generator):
    (r0, r1), (c0, c1) = output_pixel_support(default_generator, 160, 160, 160)
    (wr0, wr1), (wc0, wc1) = output_window(GeneratorSpec(), 160, 160)
    assert wr0 - 1 <= r0 and r1 <= wr1 + 1
    assert wc0 - 1 <= c0 and c1 <= wc1 + 1


def test_gradient_support_fills_window():
    """With all-positive weights every path is live, so the support is the whole window."""
    spec = GeneratorSpec(base_channels=2, padding="zeros")
    net = build_generator(spec, 0)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.fill_(0.01)
    for pixel in (160, 161):
        rows, cols = output_pixel_support(net, 160, pixel, pixel)
        assert rows == cols == output_window(spec, pixel, pixel)[0]


def test_visualize_features(tiny_generator):
    img = random_image(64, 96)
    vis = visualize_features(tiny_generator, img, "resblock_2")
    assert vis.shape == (3, 16, 24)
    assert float(vis.min()) == -1.0 and float(vis.max()) == 1.0
    assert visualize_features(tiny_generator, img, "conv", channel=0).shape == (3, 16, 24)
    assert tiny_generator.layer_names() == ["relu", "resblock_1", "resblock_2", "conv"]
    with pytest.raises(KeyError):
        visualize_features(tiny_generator, img, "resblock_9")


def test_resblock_difference(default_generator):
    assert visualize_features(default_generator, random_image(64, 64), "resblock_6").shape == (3, 16, 16)
    d = feature_difference(default_generator, random_image(64, 64))
    assert np.isfinite(d) and d >= 0


def test_weights_round_trip(tmp_path, tiny_generator):
    weights = NetworkWeights.from_module(tiny_generator, spec_hash=TINY_SPEC.hash(), iteration=0)
    digest = weights.save(tmp_path / "g.safetensors")
    back = NetworkWeights.load(tmp_path / "g.safetensors")
    assert back.digest() == digest == weights.digest()
    assert back.metadata["spec_hash"] == TINY_SPEC.hash()
    for k, v in weights.entries.items():
        assert v.dtype == back.entries[k].dtype
        assert v.tobytes() == back.entries[k].tobytes()
    net = build_generator(TINY_SPEC, 99)
    back.load_into(net)
    img = random_image(32, 32)
    assert torch.equal(generator_forward(net, img), generator_forward(tiny_generator, img))
