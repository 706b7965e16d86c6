import numpy as np
import pytest

from geossl import augmentation as aug
from geossl import geometry as geo

B1 = aug.B1Config()
QUIET_B1 = aug.B1Config(jitter_prob=0, crop_prob=0, flip_prob=0, grayscale_prob=0, blur_prob=0)
IDENTITY_B2 = aug.B2Config(mode="affine", rotation=(0, 0), translation=(0, 0), scale=(1, 1), shear=(0, 0))


def image(seed=0, size=32):
    return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)


class TestDisjointness:
    def test_defaults_ok(self):
        assert aug.validate_disjointness(B1, aug.B2Config()) == []
        assert aug.validate_disjointness(B1, aug.B2Config(mode="homography")) == []

    def test_crop_in_b2(self):
        assert aug.validate_disjointness(B1, aug.B2Config(extra=("random-crop",))) == ["random crop"]

    def test_overlap_with_b1(self):
        assert aug.validate_disjointness(B1, aug.B2Config(extra=("color_jitter",))) == ["colour jitter"]

    def test_empty_b2(self):
        assert aug.validate_disjointness(B1, None) == []

    def test_crop_flagged_even_without_b1_crop(self):
        b1 = aug.B1Config(order=("horizontal flip",))
        assert aug.validate_disjointness(b1, aug.B2Config(extra=("crop",))) == ["random crop"]

    def test_sampler_refuses_overlap(self):
        with pytest.raises(aug.ConfigurationError, match="random crop"):
            aug.TripleSampler(B1, aug.B2Config(extra=("random crop",)))
        with pytest.raises(aug.ConfigurationError):
            aug.make_view_triple(image(), np.random.default_rng(0), B1, aug.B2Config(extra=("flip",)))


class TestConfigValidation:
    def test_bad_probability(self):
        with pytest.raises(aug.ConfigurationError):
            aug.B1Config(flip_prob=1.5)

    def test_bad_crop_range(self):
        with pytest.raises(aug.ConfigurationError):
            aug.B1Config(crop_scale=(0.0, 1.0))

    def test_unknown_mode(self):
        with pytest.raises(aug.ConfigurationError):
            aug.B2Config(mode="perspective-only")

    def test_table_defaults(self):
        assert (B1.brightness, B1.contrast, B1.saturation, B1.hue, B1.jitter_prob) == (0.8, 0.8, 0.8, 0.2, 0.8)
        assert (B1.crop_scale, B1.flip_prob, B1.grayscale_prob, B1.blur_kernel) == ((0.08, 1.0), 0.5, 0.2, 3)
        b2 = aug.B2Config()
        assert (b2.rotation, b2.translation, b2.scale, b2.shear, b2.perspective) == (
            (-90.0, 90.0), (0.0, 0.25), (0.7, 1.3), (-25.0, 25.0), 0.5)


class TestSampleB1:
    def test_deterministic(self):
        a = aug.sample_b1(np.random.default_rng(5), B1)
        b = aug.sample_b1(np.random.default_rng(5), B1)
        assert a.to_text() == b.to_text()

    def test_zero_probabilities(self):
        cfg = aug.B1Config(jitter_prob=0, flip_prob=0, grayscale_prob=0)
        rng = np.random.default_rng(0)
        for _ in range(200):
            spec = aug.sample_b1(rng, cfg)
            assert [s.name for s in spec.steps if s.fired] == ["random crop", "gaussian blur"]

    def test_order_recorded(self):
        spec = aug.sample_b1(np.random.default_rng(0), B1)
        assert [s.name for s in spec.steps] == list(aug.B1_MEMBERS)

    def test_firing_frequencies(self):
        rng = np.random.default_rng(123)
        n = 10_000
        counts = {name: 0 for name in aug.B1_MEMBERS}
        for _ in range(n):
            spec = aug.sample_b1(rng, B1)
            for s in spec.steps:
                counts[s.name] += s.fired
        assert abs(counts["horizontal flip"] / n - 0.5) <= 0.02
        for name, p in [("horizontal flip", 0.5), ("colour jitter", 0.8), ("grayscale", 0.2),
                        ("random crop", 1.0), ("gaussian blur", 1.0)]:
            sigma = np.sqrt(p * (1 - p) / n)
            assert abs(counts[name] / n - p) <= 3 * sigma + 1e-12, name

    def test_crop_box_in_range(self):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            p = aug.sample_b1(rng, B1).steps[0].params
            assert 0 <= p["top"] and p["top"] + p["height"] <= 1 + 1e-12
            assert 0 <= p["left"] and p["left"] + p["width"] <= 1 + 1e-12
            assert 0.08 - 1e-12 <= p["height"] * p["width"] <= 1 + 1e-12

    def test_text_round_trip(self):
        spec = aug.sample_b1(np.random.default_rng(9), B1)
        again = aug.AugmentationSpec.from_text(spec.to_text())
        np.testing.assert_array_equal(aug.apply_b1(image(), spec), aug.apply_b1(image(), again))


class TestApplyB1:
    def test_full_area_crop_is_identity(self):
        spec = aug.sample_b1(np.random.default_rng(0), QUIET_B1)
        assert not any(s.fired for s in spec.steps)
        np.testing.assert_array_equal(aug.apply_b1(image(), spec), image())

    def test_resizes_to_output(self):
        spec = aug.sample_b1(np.random.default_rng(0), QUIET_B1)
        assert aug.apply_b1(image(size=48), spec).shape == (32, 32, 3)
        spec = aug.sample_b1(np.random.default_rng(0), B1)
        assert aug.apply_b1(image(size=40), spec).shape == (32, 32, 3)

    def test_grayscale_channels_equal(self):
        cfg = aug.B1Config(jitter_prob=0, crop_prob=0, flip_prob=0, grayscale_prob=1, blur_prob=0)
        out = aug.apply_b1(image(), aug.sample_b1(np.random.default_rng(0), cfg))
        np.testing.assert_array_equal(out[..., 0], out[..., 1])
        np.testing.assert_array_equal(out[..., 1], out[..., 2])

    def test_flip(self):
        cfg = aug.B1Config(jitter_prob=0, crop_prob=0, flip_prob=1, grayscale_prob=0, blur_prob=0)
        out = aug.apply_b1(image(), aug.sample_b1(np.random.default_rng(0), cfg))
        np.testing.assert_array_equal(out, image()[:, ::-1])

    def test_blur_strength(self):
        img = image(3)

        def high_freq_energy(x):
            spec = np.abs(np.fft.fft2(x, axes=(0, 1))) ** 2
            f = np.fft.fftfreq(x.shape[0])
            radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
            return spec[radius > 0.25].sum()

        def blurred(var):
            spec = aug.AugmentationSpec([aug.AugStep("gaussian blur", True, {"kernel": 3, "variance": var})])
            return aug.apply_b1(img, spec)

        assert high_freq_energy(blurred(2.0)) < high_freq_energy(blurred(0.1)) < high_freq_energy(img)

    def test_values_stay_in_unit_range(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            out = aug.apply_b1(image(), aug.sample_b1(rng, B1))
            assert out.min() >= 0 and out.max() <= 1 + 1e-6

    def test_replay_bitwise(self):
        spec = aug.sample_b1(np.random.default_rng(11), B1)
        np.testing.assert_array_equal(aug.apply_b1(image(), spec), aug.apply_b1(image(), spec))

    def test_hsv_round_trip(self):
        img = image(5).astype(np.float64)
        np.testing.assert_allclose(aug.hsv_to_rgb(aug.rgb_to_hsv(img)), img, atol=1e-12)
        np.testing.assert_allclose(aug.adjust_hue(img, 1.0), img, atol=1e-12)


class TestSampleB2:
    @pytest.mark.parametrize("mode,dim", [("affine", 6), ("homography", 8), ("rotation", 1),
                                          ("translation", 2), ("scale", 1), ("shear", 2)])
    def test_dims(self, mode, dim):
        m, phi = aug.sample_b2(np.random.default_rng(0), aug.B2Config(mode=mode), 32, 32)
        assert len(phi) == dim and phi.mode == mode
        assert m[2, 2] == 1.0

    def test_collapsed_is_identity(self):
        m, phi = aug.sample_b2(np.random.default_rng(0), IDENTITY_B2, 32, 32)
        np.testing.assert_array_equal(m, np.eye(3))
        np.testing.assert_array_equal(phi.values, [0, 0, 0, 1, 0, 0])

    def test_affine_mode_matrices_have_zero_bottom_left(self):
        rng = np.random.default_rng(1)
        for mode in ("affine", "rotation", "translation", "scale", "shear"):
            m, _ = aug.sample_b2(rng, aug.B2Config(mode=mode), 32, 32)
            assert m[2, 0] == 0.0 and m[2, 1] == 0.0

    def test_monte_carlo_ranges(self):
        rng = np.random.default_rng(2)
        cfg = aug.B2Config()
        raws = np.array([
            geo.denormalize_params(aug.sample_b2(rng, cfg, 32, 32)[1], 32, 32).as_tuple() for _ in range(10_000)
        ])
        bounds = [cfg.rotation, cfg.translation, cfg.translation, cfg.scale, cfg.shear, cfg.shear]
        for col, (lo, hi) in enumerate(bounds):
            vals = raws[:, col]
            assert vals.min() >= lo - 1e-9 and vals.max() <= hi + 1e-9
            # mean of U(lo, hi) has std (hi - lo) / sqrt(12 n)
            assert abs(vals.mean() - (lo + hi) / 2) < 4 * (hi - lo) / np.sqrt(12 * len(vals))

    def test_normalized_ranges(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            v = aug.sample_b2(rng, aug.B2Config(), 32, 32)[1].values
            assert -0.25 <= v[0] <= 0.25
            assert 0 <= v[1] <= 0.25 and 0 <= v[2] <= 0.25
            assert 0.7 <= v[3] <= 1.3
            assert -1 <= v[4] <= 1 and -1 <= v[5] <= 1

    def test_component_mode_fixes_others(self):
        rng = np.random.default_rng(4)
        m, phi = aug.sample_b2(rng, aug.B2Config(mode="rotation"), 32, 32)
        expect = geo.affine_matrix(geo.AffineParams(rotation_deg=phi.values[0] * 360), 32, 32)
        np.testing.assert_allclose(m, expect, atol=1e-12)

    @pytest.mark.parametrize("mode", ["affine", "homography", "rotation", "translation", "scale", "shear"])
    def test_matrix_regenerates_from_params(self, mode):
        rng = np.random.default_rng(5)
        for _ in range(50):
            m, phi = aug.sample_b2(rng, aug.B2Config(mode=mode), 32, 32)
            np.testing.assert_array_equal(aug.matrix_from_params(phi, 32, 32), m)

    def test_homography_has_perspective(self):
        m, _ = aug.sample_b2(np.random.default_rng(6), aug.B2Config(mode="homography"), 32, 32)
        assert m[2, 0] != 0.0 or m[2, 1] != 0.0


class TestViewTriple:
    def test_identity_b2(self):
        x = image()
        t = aug.make_view_triple(x, np.random.default_rng(0), B1, IDENTITY_B2, interp="nearest")
        np.testing.assert_array_equal(t.x1_prime, t.x1)
        np.testing.assert_array_equal(t.phi.values, [0, 0, 0, 1, 0, 0])

    def test_deterministic(self):
        x = image()
        a = aug.make_view_triple(x, np.random.default_rng(3), B1, aug.B2Config())
        b = aug.make_view_triple(x, np.random.default_rng(3), B1, aug.B2Config())
        for name in ("x1", "x2", "x1_prime"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        np.testing.assert_array_equal(a.phi.values, b.phi.values)

    @pytest.mark.parametrize("mode", ["affine", "homography", "shear"])
    @pytest.mark.parametrize("interp", ["nearest", "bilinear"])
    def test_x1_prime_is_warp_of_x1(self, mode, interp):
        rng = np.random.default_rng(4)
        for _ in range(5):
            t = aug.make_view_triple(image(), rng, B1, aug.B2Config(mode=mode), interp=interp)
            assert t.x1.shape == t.x2.shape == t.x1_prime.shape == (32, 32, 3)
            np.testing.assert_array_equal(t.x1_prime, geo.warp_image(t.x1, t.matrix, interp))
            rebuilt = aug.matrix_from_params(t.phi, 32, 32)
            np.testing.assert_array_equal(geo.warp_image(t.x1, rebuilt, interp), t.x1_prime)

    def test_tracked_points_recover_matrix(self):
        rng = np.random.default_rng(5)
        pts = np.array([[8.0, 9.0], [23.0, 7.5], [24.0, 22.0], [9.5, 24.0], [16.0, 16.0]])
        for mode in ("affine", "homography"):
            for _ in range(20):
                t = aug.make_view_triple(image(), rng, B1, aug.B2Config(mode=mode))
                px, py = geo.apply_to_point(t.matrix, pts[:, 0], pts[:, 1])
                est = geo.estimate_homography_dlt(pts, np.stack([px, py], 1))
                np.testing.assert_allclose(est, t.matrix, atol=1e-6)

    def test_marker_image_recovers_matrix(self):
        # eight Gaussian markers, one per channel, located again after the warp by centroids
        size = 64
        ys, xs = np.mgrid[0:size, 0:size].astype(float)
        c = (size - 1) / 2
        angles = np.arange(8) * np.pi / 4
        radius = np.where(np.arange(8) % 2 == 0, 8.0, 5.0)
        pts = np.stack([c + radius * np.cos(angles), c + radius * np.sin(angles)], 1)
        img = np.stack([np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * 1.2**2)) for x, y in pts], -1)

        def centroids(im):
            w = np.clip(im - 0.05, 0, None)
            return np.stack([[(w[..., k] * xs).sum() / w[..., k].sum(), (w[..., k] * ys).sum() / w[..., k].sum()]
                             for k in range(im.shape[-1])])

        np.testing.assert_allclose(centroids(img), pts, atol=0.05)
        cfg = aug.B2Config(mode="affine", translation=(0.0, 0.1))
        rng = np.random.default_rng(6)
        corners = np.array([[16.0, 16.0], [47.0, 16.0], [47.0, 47.0], [16.0, 47.0]])
        for _ in range(10):
            m, _ = aug.sample_b2(rng, cfg, size, size)
            warped = geo.warp_image(img, m)
            est = geo.estimate_homography_dlt(pts, centroids(warped))
            ex, ey = geo.apply_to_point(est, corners[:, 0], corners[:, 1])
            tx, ty = geo.apply_to_point(m, corners[:, 0], corners[:, 1])
            assert np.hypot(ex - tx, ey - ty).max() < 0.5

    def test_two_module_triple(self):
        t = aug.TripleSampler(B1, aug.B2Config(), second=True)(image(), np.random.default_rng(7))
        np.testing.assert_array_equal(t.x2_prime, geo.warp_image(t.x2, t.matrix2))
        assert len(t.phi2) == 6
