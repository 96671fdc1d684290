from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from histoxai.config import AugmentationPolicy
from histoxai.errors import PreprocessError
from histoxai.preprocess import (ImageTensor, augment, bilinear_resize, build_pipeline, hflip, load_image,
                                 normalize, resize, sample_rng)


def unit(arr) -> ImageTensor:
    return ImageTensor.from_array(np.asarray(arr, dtype=np.float32), "unit")


def only(**flags) -> AugmentationPolicy:
    off = dict(rotation=False, hflip=False, crop=False, brightness=False, contrast=False)
    off.update(flags)
    return AugmentationPolicy(seed=0, **off)


def test_lc25000_tile_resizes_to_299():
    tile = ImageTensor.from_array(np.random.default_rng(0).uniform(0, 255, (768, 768, 3)), "byte")
    out = resize(tile, (299, 299))
    assert out.size == (299, 299)
    assert out.value_range == "byte"


def test_same_size_resize_is_bitwise_identity():
    data = np.random.default_rng(1).random((299, 299, 3)).astype(np.float32)
    assert np.array_equal(resize(unit(data), (299, 299)).data, data)


def test_checkerboard_upsample_matches_hand_bilinear():
    board = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
    out = bilinear_resize(board, (4, 4))
    # output centers map to source coords -0.25, 0.25, 0.75, 1.25 (clamped at the edges)
    np.testing.assert_allclose(out[1:3, 1:3], [[0.375, 0.625], [0.625, 0.375]], atol=1e-7)
    np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0], atol=1e-7)
    rgb = bilinear_resize(np.repeat(board[..., None], 3, axis=2), (4, 4))
    np.testing.assert_allclose(rgb[..., 1], out, atol=0)


@pytest.mark.parametrize("target", [(0, 4), (4, 0), (-1, 3)])
def test_zero_target_is_an_error(target):
    with pytest.raises(PreprocessError):
        resize(unit(np.zeros((4, 4, 3))), target)


def test_normalize_values():
    assert np.all(normalize(ImageTensor.from_array(np.full((2, 2, 3), 255.0), "byte")).data == 1.0)
    assert np.all(normalize(ImageTensor.from_array(np.zeros((2, 2, 3)), "byte")).data == 0.0)
    out = normalize(ImageTensor.from_array(np.full((1, 1, 3), 128.0), "byte"))
    assert out.value_range == "unit"
    assert out.data[0, 0, 0] == pytest.approx(128 / 255, abs=1e-7)
    assert out.data[0, 0, 0] == pytest.approx(0.50196, abs=1e-5)


def test_double_normalization_is_refused():
    with pytest.raises(PreprocessError, match="already unit-range"):
        normalize(unit(np.zeros((2, 2, 3))))


def test_image_tensor_validation():
    with pytest.raises(PreprocessError):
        ImageTensor.from_array(np.zeros((4, 4)))
    with pytest.raises(PreprocessError):
        ImageTensor.from_array(np.zeros((0, 4, 3)))


def test_load_image_is_byte_rgb(tmp_path):
    Image.fromarray(np.full((5, 7), 9, np.uint8), mode="L").save(tmp_path / "g.png")
    img = load_image(tmp_path / "g.png")
    assert img.value_range == "byte" and img.data.shape == (5, 7, 3)
    (tmp_path / "bad.jpg").write_bytes(b"nope")
    with pytest.raises(PreprocessError, match="cannot decode"):
        load_image(tmp_path / "bad.jpg")


def test_all_flags_off_is_identity():
    img = unit(np.random.default_rng(2).random((16, 16, 3)))
    out = augment(img, AugmentationPolicy.identity(), sample_rng(AugmentationPolicy.identity(), 3))
    assert np.array_equal(out.data, img.data)


def test_hflip_is_an_involution():
    img = unit(np.random.default_rng(3).random((6, 9, 3)))
    assert np.array_equal(hflip(hflip(img)).data, img.data)
    forced = only(hflip=True, hflip_prob=1.0)
    flipped = augment(img, forced, sample_rng(forced, 0))
    assert np.array_equal(flipped.data, img.data[:, ::-1])
    assert np.array_equal(augment(flipped, forced, sample_rng(forced, 1)).data, img.data)


def test_brightness_shift_on_constant_image():
    policy = only(brightness=True, brightness_delta_max=0.1)

    class Fixed:
        # stands in for the generator: every uniform draw returns its upper bound
        def uniform(self, lo, hi):
            return hi

        def random(self):
            return 0.0

        def integers(self, lo, hi):
            return lo

    out = augment(unit(np.full((4, 4, 3), 0.5)), policy, Fixed())
    np.testing.assert_allclose(out.data, 0.6, atol=1e-7)


def test_augment_refuses_byte_images():
    with pytest.raises(PreprocessError, match="unit-range"):
        augment(ImageTensor.from_array(np.zeros((4, 4, 3)), "byte"), AugmentationPolicy(), sample_rng(
            AugmentationPolicy(), 0))


def test_rotation_uses_reflect_fill():
    img = unit(np.full((20, 20, 3), 0.7))
    policy = only(rotation=True, rotation_max_deg=30.0)
    out = augment(img, policy, sample_rng(policy, 5))
    # a constant image stays constant: corners are reflected, not zero-filled
    np.testing.assert_allclose(out.data, 0.7, atol=1e-6)


def test_seed_determinism_and_sample_keying():
    img = unit(np.random.default_rng(4).random((24, 24, 3)))
    policy = AugmentationPolicy(seed=11)
    a = augment(img, policy, sample_rng(policy, 7, epoch=2)).data
    b = augment(img, policy, sample_rng(policy, 7, epoch=2)).data
    c = augment(img, policy, sample_rng(policy, 8, epoch=2)).data
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_disabling_one_transform_keeps_the_others_draws():
    img = unit(np.full((8, 8, 3), 0.5))
    full = only(brightness=True, contrast=True)
    alone = only(brightness=True)
    a = augment(img, full, sample_rng(full, 2)).data
    b = augment(img, alone, sample_rng(alone, 2)).data
    # contrast about the mean of a constant image is a no-op, so the brightness shift must agree
    np.testing.assert_allclose(a, b, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(
    data=arrays(np.float32, (12, 10, 3), elements=st.floats(0, 1, width=32)),
    index=st.integers(0, 10_000),
    brightness=st.floats(0, 1),
    low=st.floats(0, 2),
    spread=st.floats(0, 2),
)
def test_outputs_are_always_clamped(data, index, brightness, low, spread):
    policy = AugmentationPolicy(brightness_delta_max=brightness, contrast_range=(low, low + spread), seed=3)
    out = augment(unit(data), policy, sample_rng(policy, index)).data
    assert out.shape == data.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=40, deadline=None)
@given(
    data=arrays(np.float32, (8, 8, 3), elements=st.floats(0.25, 0.75, width=32)),
    index=st.integers(0, 1000),
)
def test_contrast_preserves_the_mean(data, index):
    # factors in [0.8, 1.2] around values in [0.25, 0.75] cannot leave [0, 1], so nothing clamps
    policy = only(contrast=True)
    out = augment(unit(data), policy, sample_rng(policy, index)).data
    np.testing.assert_allclose(out.mean(axis=(0, 1)), data.mean(axis=(0, 1)), atol=1e-6)


def test_only_the_train_split_augments():
    assert build_pipeline("train", (8, 8), AugmentationPolicy()).augments
    assert not build_pipeline("val", (8, 8), AugmentationPolicy()).augments
    assert not build_pipeline("test", (8, 8), AugmentationPolicy()).augments
    img = ImageTensor.from_array(np.random.default_rng(5).uniform(0, 255, (16, 16, 3)), "byte")
    val = build_pipeline("val", (8, 8), AugmentationPolicy())
    np.testing.assert_array_equal(val(img, 3, 1).data, normalize(resize(img, (8, 8))).data)


def test_pipeline_outputs_unit_range_at_input_size():
    img = ImageTensor.from_array(np.random.default_rng(6).uniform(0, 255, (40, 30, 3)), "byte")
    out = build_pipeline("train", (32, 32), replace(AugmentationPolicy(), seed=1))(img, 0, 0)
    assert out.size == (32, 32) and out.value_range == "unit"
    assert 0.0 <= out.data.min() and out.data.max() <= 1.0
