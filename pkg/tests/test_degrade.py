import numpy as np
import pytest

from conftest import structured_image
from diffrestore.degrade import add_gaussian_noise, synth_rain, synth_underwater


class TestGaussianNoise:
    def test_zero_noise_limit(self, rng):
        img = np.round(structured_image(1) * 255.0)
        out = add_gaussian_noise(img, 1e-12, rng)
        assert np.array_equal(np.round(out), img)

    def test_noise_std_at_mid_gray(self):
        img = np.full((1, 1000, 1000), 128.0)
        out = add_gaussian_noise(img, 25.0, np.random.default_rng(7))
        assert float(np.std(out - img)) == pytest.approx(25.0, rel=0.01)

    def test_clamping_bias_at_black(self, rng):
        img = np.zeros((1, 100, 100))
        out = add_gaussian_noise(img, 25.0, rng)
        assert float(np.mean(out)) > 0.0
        assert out.min() >= 0.0 and out.max() <= 255.0

    def test_rejects_nonpositive_sigma(self, rng):
        with pytest.raises(ValueError):
            add_gaussian_noise(np.zeros((1, 8, 8)), 0.0, rng)
        with pytest.raises(ValueError):
            add_gaussian_noise(np.zeros((1, 8, 8)), -1.0, rng)

    def test_determinism(self):
        img = structured_image(2) * 255.0
        a = add_gaussian_noise(img, 15.0, np.random.default_rng(3))
        b = add_gaussian_noise(img, 15.0, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_variance_composition(self):
        """Two noising passes compose like independent variances."""
        img = np.full((1, 1000, 1000), 128.0)
        rng = np.random.default_rng(11)
        out = add_gaussian_noise(add_gaussian_noise(img, 9.0, rng), 12.0, rng)
        assert float(np.std(out - img)) == pytest.approx(
            np.sqrt(9.0**2 + 12.0**2), rel=0.02
        )


class TestSynthRain:
    def test_zero_streaks_is_identity(self, rng):
        img = structured_image(4) * 255.0
        out = synth_rain(img, 0, 10.0, 16, 0.5, rng)
        np.testing.assert_array_equal(out, img)

    @pytest.mark.parametrize("angle", [0.0, 20.0, 45.0, 80.0])
    def test_full_intensity_streak_pixel_count(self, angle):
        img = np.full((3, 96, 96), 50.0)
        length = 24
        # seed chosen so the streak stays inside the frame
        out = synth_rain(img, 1, angle, length, 1.0, np.random.default_rng(2))
        brighter = np.count_nonzero(out[0] > img[0])
        assert brighter >= length

    def test_output_range(self, rng):
        img = structured_image(5) * 255.0
        out = synth_rain(img, 50, 15.0, 12, 1.0, rng)
        assert out.min() >= 0.0 and out.max() <= 255.0
        assert out.shape == img.shape

    def test_determinism(self):
        img = structured_image(6) * 255.0
        a = synth_rain(img, 30, 12.0, 10, 0.7, np.random.default_rng(8))
        b = synth_rain(img, 30, 12.0, 10, 0.7, np.random.default_rng(8))
        np.testing.assert_array_equal(a, b)

    def test_rejects_bad_parameters(self, rng):
        img = np.zeros((3, 32, 32))
        with pytest.raises(ValueError):
            synth_rain(img, 1, 0.0, 0, 0.5, rng)
        with pytest.raises(ValueError):
            synth_rain(img, 1, 0.0, 8, 0.0, rng)
        with pytest.raises(ValueError):
            synth_rain(img, 1, 0.0, 8, 1.5, rng)


class TestSynthUnderwater:
    def test_identity_parameters(self):
        img = structured_image(7) * 255.0
        out = synth_underwater(img, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 0.0)
        np.testing.assert_array_equal(out, img)

    def test_channel_ordering_on_white(self):
        img = np.full((3, 8, 8), 255.0)
        out = synth_underwater(img, (0.3, 0.9, 1.0), (0.0, 0.0, 0.0), 0.0)
        assert np.all(out[2] >= out[1]) and np.all(out[1] > out[0])

    def test_affine_mean_oracle(self):
        img = structured_image(9) * 200.0
        att = (0.6, 0.8, 0.9)
        veil = (30.0, 60.0, 90.0)
        strength = 0.2
        out = synth_underwater(img, att, veil, strength)
        for c in range(3):
            expected = att[c] * img[c].mean() + strength * veil[c]
            assert out[c].mean() == pytest.approx(expected, abs=1e-9)

    def test_rejects_bad_parameters(self):
        img = np.zeros((3, 8, 8))
        with pytest.raises(ValueError):
            synth_underwater(img, (0.0, 0.5, 0.5), (0, 0, 0), 0.0)
        with pytest.raises(ValueError):
            synth_underwater(img, (1.0, 1.0, 1.0), (0, 0, 300.0), 0.0)
        with pytest.raises(ValueError):
            synth_underwater(img, (1.0, 1.0, 1.0), (0, 0, 0), 1.0)

    def test_shape_and_domain_preserved(self):
        img = structured_image(10) * 255.0
        out = synth_underwater(img, (0.5, 0.7, 0.9), (10, 20, 30), 0.5)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 255.0
