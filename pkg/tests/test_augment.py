"""Tests for the seeded augmentations."""

import numpy as np
import pytest
from scipy import stats

from core.augment import (
    AugmentationError,
    augment_batch,
    augmix_lite,
    crop_offset,
    expand_views,
    make_augment,
    rand_augment_lite,
    random_crop,
)
from core.data_corruptions import generate_shapes
from models.run_config import AugmentSpec


class TestRandomCrop:
    """Weak augmentation."""

    def setup_method(self):
        self.image = np.random.default_rng(0).uniform(size=(3, 16, 16))

    def test_zero_padding_is_identity(self):
        """Test a crop with no padding returns the image unchanged."""
        out = random_crop(self.image, 0, seed=5)
        np.testing.assert_array_equal(out, self.image)
        assert out is not self.image

    def test_crop_is_a_shifted_window(self):
        """Test the crop equals a window of the reflect-padded image."""
        dy, dx = crop_offset(2, seed=9)
        padded = np.pad(self.image, ((0, 0), (2, 2), (2, 2)), mode="reflect")
        np.testing.assert_array_equal(random_crop(self.image, 2, seed=9), padded[:, dy:dy + 16, dx:dx + 16])

    def test_offsets_are_uniform(self):
        """Test crop offsets cover the (2p+1)^2 grid uniformly."""
        counts = np.zeros((5, 5))
        for seed in range(2500):
            dy, dx = crop_offset(2, seed)
            counts[dy, dx] += 1
        _, p_value = stats.chisquare(counts.ravel())
        assert p_value > 0.001

    def test_padding_too_large(self):
        """Test padding at least the image side is rejected."""
        with pytest.raises(AugmentationError):
            random_crop(self.image, 16, seed=0)
        with pytest.raises(AugmentationError):
            random_crop(self.image, -1, seed=0)


class TestStrongAugmentations:
    """RandAugment-lite and AugMix-lite."""

    def setup_method(self):
        self.image = np.random.default_rng(1).uniform(size=(3, 16, 16))

    def test_zero_magnitude_is_near_identity(self):
        """Test every op at magnitude 0 leaves the image almost unchanged."""
        for seed in range(20):
            out = rand_augment_lite(self.image, n_ops=2, magnitude=0, seed=seed)
            assert np.max(np.abs(out - self.image)) < 0.01

    def test_outputs_stay_in_range(self):
        """Test augmented pixels stay in [0, 1]."""
        for seed in range(20):
            out = rand_augment_lite(self.image, n_ops=3, magnitude=10, seed=seed)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic(self):
        """Test the same seed gives the same output."""
        a = rand_augment_lite(self.image, 2, 5, seed=3)
        b = rand_augment_lite(self.image, 2, 5, seed=3)
        np.testing.assert_array_equal(a, b)

    def test_invalid_magnitude(self):
        """Test magnitudes outside [0, 10] are rejected."""
        with pytest.raises(AugmentationError):
            rand_augment_lite(self.image, 2, 11, seed=0)

    def test_augmix_depth_zero_is_identity(self):
        """Test empty chains mix back to the clean image."""
        np.testing.assert_allclose(augmix_lite(self.image, depth=0, seed=4), self.image, atol=1e-12)

    def test_augmix_is_bounded(self):
        """Test the convex mixture stays in [0, 1]."""
        for seed in range(10):
            out = augmix_lite(self.image, magnitude=10, seed=seed)
            assert out.shape == self.image.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_augmix_rejects_bad_alpha(self):
        """Test a non-positive Dirichlet concentration is rejected."""
        with pytest.raises(AugmentationError):
            augmix_lite(self.image, alpha=0.0)


class TestAugmentSpec:
    """Binding specs into functions."""

    def setup_method(self):
        self.images = np.random.default_rng(2).uniform(size=(4, 3, 8, 8))

    def test_identity(self):
        """Test the identity kind copies its input."""
        fn = make_augment(AugmentSpec(kind="identity"))
        np.testing.assert_array_equal(fn(self.images[0], 0), self.images[0])

    def test_invalid_spec(self):
        """Test an unknown kind is rejected."""
        with pytest.raises(AugmentationError):
            make_augment(AugmentSpec(kind="cutout"))

    def test_batch_uses_per_image_seeds(self):
        """Test identical images in a batch receive different crops."""
        batch = np.stack([self.images[0]] * 6)
        out = augment_batch(batch, AugmentSpec(kind="weak", padding=2), seed=0)
        assert out.shape == batch.shape
        assert any(not np.array_equal(out[0], out[i]) for i in range(1, 6))

    def test_expand_views(self):
        """Test view expansion is deterministic and shaped [count, C, H, W]."""
        spec = AugmentSpec(kind="strong")
        a = expand_views(self.images[1], spec, count=5, seed=7)
        b = expand_views(self.images[1], spec, count=5, seed=7)
        assert a.shape == (5, 3, 8, 8)
        np.testing.assert_array_equal(a, b)


class TestDistortionOrder:
    """Weak views stay closer to the image than strong views."""

    def setup_method(self):
        self.images = generate_shapes(1000, image_size=32, seed=4).images

    def mean_l1(self, spec):
        views = augment_batch(self.images, spec, seed=9)
        return float(np.mean(np.abs(views - self.images)))

    def test_weak_below_strong(self):
        """Test the mean per-pixel L1 change of weak crops is below that of strong views."""
        weak = self.mean_l1(AugmentSpec(kind="weak", padding=32 // 8))
        strong = self.mean_l1(AugmentSpec(kind="strong"))
        assert 0.0 < weak < strong
