import numpy as np
from hypothesis import given, settings, strategies as st

from fxnet.augment import AugmentConfig, affine_matrix, augment, resize_bilinear, warp
from fxnet.tensor import RngStream


def rng_image(shape=(1, 12, 12), seed=0):
    return np.random.default_rng(seed).random(shape).astype(np.float32)


def test_identity_config_leaves_image_unchanged():
    img = rng_image()
    out = augment(img, AugmentConfig.identity(), RngStream(0))
    np.testing.assert_array_equal(out, img)


def test_flip_twice_is_exact():
    img = rng_image((1, 9, 10))
    m = affine_matrix(img.shape[1:], flip=True)
    once = warp(img, m)
    np.testing.assert_array_equal(once, img[:, :, ::-1])
    np.testing.assert_array_equal(warp(once, m), img)


def test_quarter_turn_matches_coordinate_oracle():
    img = np.zeros((1, 8, 8), dtype=np.float32)
    img[0, 3:5, 3:5] = [[0.1, 0.2], [0.3, 0.4]]  # asymmetric 2x2 pattern at the centre
    out = warp(img, affine_matrix((8, 8), angle=90.0))
    # oracle: a counter-clockwise quarter turn about the centre (3.5, 3.5) sends
    # destination (row r, col c) to source (row c, col 7 - r)
    expected = np.zeros_like(img)
    for r in range(8):
        for c in range(8):
            expected[0, r, c] = img[0, c, 7 - r]
    np.testing.assert_array_equal(out, expected)
    np.testing.assert_array_equal(out[0, 3:5, 3:5], np.float32([[0.2, 0.4], [0.1, 0.3]]))
    np.testing.assert_array_equal(out, np.rot90(img, axes=(1, 2)))


def test_translation_reads_zero_outside():
    img = np.ones((1, 4, 4), dtype=np.float32)
    out = warp(img, affine_matrix((4, 4), tx=2.0))
    np.testing.assert_array_equal(out[0, :, :2], 0.0)
    np.testing.assert_array_equal(out[0, :, 2:], 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augment_preserves_shape_and_range(seed):
    img = rng_image((1, 16, 16), seed % 1000)
    out = augment(img, AugmentConfig(), RngStream(seed))
    assert out.shape == img.shape
    assert out.dtype == img.dtype
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_is_seeded():
    img = rng_image()
    a = augment(img, AugmentConfig(), RngStream(4))
    b = augment(img, AugmentConfig(), RngStream(4))
    np.testing.assert_array_equal(a, b)


def test_resize_constant_and_shape():
    img = np.full((1, 96, 64), 0.5, dtype=np.float32)
    out = resize_bilinear(img, (48, 48))
    assert out.shape == (1, 48, 48)
    np.testing.assert_allclose(out, 0.5, atol=1e-7)


def test_resize_downscale_by_two_averages_pairs():
    img = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    out = resize_bilinear(img, (2, 2))
    # pixel-centre alignment: each output samples the centre of a 2x2 block
    np.testing.assert_allclose(out[0], [[2.5, 4.5], [10.5, 12.5]])
