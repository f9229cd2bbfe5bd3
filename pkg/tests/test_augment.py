import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simmil.augment import (
    AugmentPolicy,
    Grayscale,
    HSVAdjust,
    augment,
    augment_batch,
    color_convert,
    gaussian_blur,
    grayscale,
    hsv_to_rgb,
    random_resized_crop,
    rgb_to_hsv,
    rng_stream,
)
from simmil.errors import ContractError


def patch(seed=0, size=16):
    return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)


class TestPolicy:
    @pytest.mark.parametrize("kwargs", [dict(jitter_p=1.5), dict(blur_p=-0.1), dict(hue=0.6),
                                        dict(scale_min=0.0), dict(scale_min=0.9, scale_max=0.5)])
    def test_rejects(self, kwargs):
        with pytest.raises(ContractError):
            AugmentPolicy(**kwargs)

    def test_defaults(self):
        p = AugmentPolicy()
        assert (p.jitter_p, p.brightness, p.hue, p.grayscale_p, p.blur_p, p.hflip_p) == (0.8, 0.4, 0.1, 0.2, 0.5, 0.5)


class TestAugment:
    def test_identity_policy_bit_exact(self):
        x = patch(size=32)
        out = augment(x, AugmentPolicy.identity(32), rng_stream(1, "a", 0))
        assert out.tobytes() == x.tobytes()

    def test_hflip_swaps_columns(self):
        x = np.array([[[0.1] * 3, [0.2] * 3], [[0.3] * 3, [0.4] * 3]], dtype=np.float32)
        pol = AugmentPolicy(output_size=2, scale_min=1.0, scale_max=1.0, ratio_min=1.0, ratio_max=1.0,
                            jitter_p=0.0, grayscale_p=0.0, blur_p=0.0, hflip_p=1.0)
        out = augment(x, pol, rng_stream(0, "x", 0))
        np.testing.assert_array_equal(out, x[:, ::-1])

    def test_deterministic_stream(self):
        x = patch()
        a = augment(x, AugmentPolicy(output_size=16), rng_stream(17, "id", 3))
        b = augment(x, AugmentPolicy(output_size=16), rng_stream(17, "id", 3))
        assert a.tobytes() == b.tobytes()

    def test_streams_differ_by_view(self):
        x = patch()
        a = augment(x, AugmentPolicy(output_size=16), rng_stream(17, "id", 3, 0))
        b = augment(x, AugmentPolicy(output_size=16), rng_stream(17, "id", 3, 1))
        assert a.tobytes() != b.tobytes()

    def test_batch_independent_of_order(self):
        xs = np.stack([patch(i) for i in range(4)])
        ids = ["a", "b", "c", "d"]
        pol = AugmentPolicy(output_size=16)
        full = augment_batch(xs, ids, pol, 5, 0)
        rev = augment_batch(xs[::-1], ids[::-1], pol, 5, 0)
        assert full.tobytes() == rev[::-1].tobytes()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(4, 40), st.integers(4, 40), st.integers(0, 2**31 - 1))
    def test_shape_and_range(self, h, w, seed):
        x = np.random.default_rng(seed).random((h, w, 3)).astype(np.float32)
        out = augment(x, AugmentPolicy(output_size=12), rng_stream(seed, "p", 0))
        assert out.shape == (12, 12, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_grayscale_rate(self):
        pol = AugmentPolicy(output_size=4, scale_min=1.0, ratio_min=1.0, ratio_max=1.0,
                            jitter_p=0.0, blur_p=0.0)
        x = patch(size=4)
        gray = sum(np.ptp(augment(x, pol, rng_stream(0, str(i), 0)), axis=-1).max() == 0
                   for i in range(10_000))
        assert abs(gray / 10_000 - 0.2) <= 0.02

    def test_crop_falls_back_to_center(self):
        pol = AugmentPolicy(output_size=4, ratio_min=50.0, ratio_max=60.0)
        out = random_resized_crop(patch(size=8), pol, np.random.default_rng(0))
        assert out.shape == (4, 4, 3)


class TestColour:
    def test_hsv_round_trip(self):
        px = np.random.default_rng(0).random((1000, 3))
        assert np.abs(hsv_to_rgb(rgb_to_hsv(px)) - px).max() < 1e-5

    def test_zero_saturation_is_grayscale(self):
        x = patch()
        np.testing.assert_allclose(color_convert(x, HSVAdjust(saturation=0.0)), grayscale(x), atol=1e-6)

    def test_neutral_adjust_is_identity(self):
        x = patch()
        np.testing.assert_allclose(color_convert(x, HSVAdjust()), x, atol=1e-6)

    def test_grayscale_luma(self):
        x = np.array([[[1.0, 0.0, 0.0]]], dtype=np.float32)
        np.testing.assert_allclose(color_convert(x, Grayscale()), [[[0.299] * 3]], atol=1e-7)

    def test_needs_three_channels(self):
        with pytest.raises(ContractError):
            color_convert(np.zeros((2, 2, 1), dtype=np.float32), Grayscale())


def test_blur_preserves_constant():
    x = np.full((9, 9, 3), 0.3, dtype=np.float32)
    np.testing.assert_allclose(gaussian_blur(x, 1.5), x, atol=1e-6)
