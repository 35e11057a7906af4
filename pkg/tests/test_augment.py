import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textinfomax.augment import (
    AugmentPolicy,
    DegenerateCropError,
    color_jitter,
    pair_index,
    resize_crop,
    sample_view,
    sample_view_pair,
)
from textinfomax.encoders import ConfigError


@pytest.fixture
def image():
    return np.random.default_rng(0).random((3, 16, 16))


def is_gray(x):
    return np.array_equal(x[0], x[1]) and np.array_equal(x[1], x[2])


def test_identity_policy_returns_input(image):
    np.testing.assert_array_equal(sample_view(AugmentPolicy.identity(), image, 5), image)


def test_identity_pair(image):
    a, b = sample_view_pair(AugmentPolicy.identity(rng_seed=3), image, 11)
    np.testing.assert_array_equal(a, image)
    np.testing.assert_array_equal(b, image)


def test_grayscale_always(image):
    policy = AugmentPolicy(grayscale_prob=1.0)
    for i in range(20):
        assert is_gray(sample_view(policy, image, i))


def test_grayscale_is_luminance(image):
    policy = AugmentPolicy(crop_scale_range=(1, 1), aspect_range=(1, 1), jitter_strength=0, grayscale_prob=1.0)
    out = sample_view(policy, image, 0)
    np.testing.assert_allclose(out[0], 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2], atol=1e-15)


def test_grayscale_frequency():
    img = np.random.default_rng(1).random((3, 8, 8))
    policy = AugmentPolicy(grayscale_prob=0.25, rng_seed=17)
    hits = sum(is_gray(sample_view(policy, img, i)) for i in range(10_000))
    assert abs(hits / 10_000 - 0.25) <= 0.02


def test_pair_is_replayable(image):
    policy = AugmentPolicy(rng_seed=9)
    a1, b1 = sample_view_pair(policy, image, 42)
    a2, b2 = sample_view_pair(policy, image, 42)
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


def test_stream_replay_out_of_order(image):
    policy = AugmentPolicy(rng_seed=2)
    n = 5
    forward = [sample_view_pair(policy, image, pair_index(1, i, n)) for i in range(n)]
    backward = [sample_view_pair(policy, image, pair_index(1, i, n)) for i in reversed(range(n))][::-1]
    for (a, b), (c, d) in zip(forward, backward):
        np.testing.assert_array_equal(a, c)
        np.testing.assert_array_equal(b, d)


def test_pair_indices_never_collide():
    seen = {pair_index(e, i, 7) for e in range(4) for i in range(7)}
    assert len(seen) == 28


def test_views_differ(image):
    policy = AugmentPolicy(rng_seed=4)
    differ = sum(not np.array_equal(*sample_view_pair(policy, image, p)) for p in range(100))
    assert differ >= 99


def test_different_seeds_differ(image):
    a = sample_view(AugmentPolicy(rng_seed=0), image, 0)
    b = sample_view(AugmentPolicy(rng_seed=1), image, 0)
    assert not np.array_equal(a, b)


@settings(max_examples=200, deadline=None, derandomize=True)
@given(st.integers(0, 10_000), st.floats(0.0, 1.5), st.floats(0.0, 1.0))
def test_output_range_and_shape(index, strength, gray):
    img = np.random.default_rng(index).random((3, 12, 12))
    out = sample_view(AugmentPolicy(jitter_strength=strength, grayscale_prob=gray, rng_seed=index), img, index)
    assert out.shape == img.shape and out.dtype == img.dtype
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_full_window_resize_is_identity(image):
    np.testing.assert_allclose(resize_crop(image, 0, 0, 16, 16, 16), image, atol=1e-15)


def test_resize_of_constant_is_constant():
    img = np.full((3, 10, 10), 0.3)
    np.testing.assert_allclose(resize_crop(img, 2.3, 1.7, 5.5, 6.1, 10), 0.3, atol=1e-15)


def test_jitter_unit_factors(image):
    np.testing.assert_allclose(color_jitter(image, 1.0, 1.0, 1.0), image, atol=1e-15)


def test_degenerate_crop():
    policy = AugmentPolicy(crop_scale_range=(0.001, 0.001))
    with pytest.raises(DegenerateCropError):
        sample_view(policy, np.zeros((3, 8, 8)), 0)


@pytest.mark.parametrize("bad", [
    dict(crop_scale_range=(0.0, 1.0)), dict(crop_scale_range=(0.8, 0.5)), dict(jitter_strength=-0.1),
    dict(grayscale_prob=1.5), dict(aspect_range=(2.0, 1.0)),
])
def test_policy_validation(bad):
    with pytest.raises(ConfigError):
        AugmentPolicy(**bad).validate()


def test_rejects_bad_image_shape():
    with pytest.raises(ValueError):
        sample_view(AugmentPolicy(), np.zeros((1, 8, 8)), 0)
