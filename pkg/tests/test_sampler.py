import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from texpand.errors import SamplingError
from texpand.sampler import apply_tile_grid, crop, random_crop, sample_batch, sample_block_pair, shuffle_tiles

from .conftest import random_image


def test_pair_shapes_paper_scale(rng):
    ex = random_image(400, 600)
    pair = sample_block_pair(ex, 128, rng)
    assert pair.target.shape == (3, 256, 256)
    assert pair.source.shape == (3, 128, 128)
    r, c = pair.source_offset
    assert torch.equal(pair.source, pair.target[:, r : r + 128, c : c + 128])
    tr, tc = pair.target_offset
    assert torch.equal(pair.target, ex[:, tr : tr + 256, tc : tc + 256])


def test_unique_placement(rng):
    ex = random_image(256, 256)
    for _ in range(5):
        assert sample_block_pair(ex, 128, rng).target_offset == (0, 0)


def test_too_small(rng):
    with pytest.raises(SamplingError, match="256x256"):
        sample_block_pair(random_image(255, 256), 128, rng)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([4, 8, 12]), st.booleans())
def test_pair_invariants(seed, k, augment):
    ex = random_image(5 * k, 3 * k, seed=seed % 7)
    pair = sample_block_pair(ex, k, np.random.default_rng(seed), augment=augment)
    assert pair.source.shape == (3, k, k) and pair.target.shape == (3, 2 * k, 2 * k)
    r, c = pair.source_offset
    assert 0 <= r <= k and 0 <= c <= k
    assert torch.equal(pair.source, pair.target[:, r : r + k, c : c + k])


def test_offset_coverage():
    ex = torch.zeros(3, 400, 600)
    gen = np.random.default_rng(0)
    rows, cols = [], []
    for _ in range(10_000):
        pair = sample_block_pair(ex, 128, gen)
        rows.append(pair.target_offset[0])
        cols.append(pair.target_offset[1])
    rows, cols = np.array(rows), np.array(cols)
    assert rows.min() >= 0 and rows.max() <= 400 - 256
    assert cols.min() >= 0 and cols.max() <= 600 - 256
    for values, span in ((rows, 400 - 256), (cols, 600 - 256)):
        counts = np.bincount(np.minimum(values * 10 // (span + 1), 9), minlength=10)
        assert np.all(counts > 0)


def test_batch_shapes(rng):
    src, tgt = sample_batch(random_image(64, 64), 16, 3, rng)
    assert src.shape == (3, 3, 16, 16) and tgt.shape == (3, 3, 32, 32)


def test_crop():
    img = random_image(20, 30)
    assert torch.equal(crop(img, (0, 0), (20, 30)), img)
    assert torch.equal(crop(img, (2, 3), (4, 5)), img[:, 2:6, 3:8])
    with pytest.raises(SamplingError):
        crop(img, (-1, 0), (4, 4))
    with pytest.raises(SamplingError):
        crop(img, (18, 0), (4, 4))


def test_two_random_crops_differ(rng):
    img = random_image(400, 600)
    a, off_a = random_crop(img, (256, 256), rng)
    b, off_b = random_crop(img, (256, 256), rng)
    assert off_a != off_b and not torch.equal(a, b)


def test_shuffle_identity():
    img = random_image(64, 64)
    out, grid = shuffle_tiles(img, 4, 4, permutation=range(16))
    assert torch.equal(out, img)
    assert grid.tile_h == 16 and grid.tile_w == 16


def test_shuffle_preserves_tiles(rng):
    img = random_image(512, 512)
    out, grid = shuffle_tiles(img, 4, 4, rng)
    assert (grid.tile_h, grid.tile_w) == (128, 128)

    def tiles(x):
        return sorted(x[:, r : r + 128, c : c + 128].numpy().tobytes() for r in range(0, 512, 128) for c in range(0, 512, 128))

    assert tiles(out) == tiles(img)
    assert torch.equal(apply_tile_grid(out, grid.inverse()), img)


def test_shuffle_errors(rng):
    with pytest.raises(SamplingError, match="divisible"):
        shuffle_tiles(random_image(510, 512), 4, 4, rng)
    with pytest.raises(SamplingError, match="bijection"):
        shuffle_tiles(random_image(8, 8), 2, 2, permutation=[0, 0, 1, 2])
