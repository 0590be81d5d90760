import numpy as np
import pytest

from histreg import (Image, InvalidInputError, build_pyramid, load_image,
                     load_pyramid, save_png, to_gray_inverted)


class TestToGrayInverted:
    def test_white_maps_to_zero(self):
        img = to_gray_inverted(np.ones((1, 1, 3)))
        assert img.data[0, 0] == 0.0

    def test_black_maps_to_one(self):
        img = to_gray_inverted(np.zeros((1, 1, 3)))
        assert img.data[0, 0] == 1.0

    def test_mid_gray_is_fixed_point(self):
        img = to_gray_inverted(np.full((1, 1, 3), 0.5))
        assert img.data[0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_uint8_and_uint16_normalization(self):
        img8 = to_gray_inverted(np.array([[0, 255]], dtype=np.uint8))
        assert np.allclose(img8.data, [[1.0, 0.0]])
        img16 = to_gray_inverted(np.array([[0, 65535]], dtype=np.uint16))
        assert np.allclose(img16.data, [[1.0, 0.0]])

    def test_luminance_weights(self):
        rgb = np.zeros((1, 3, 3))
        rgb[0, 0, 0] = 1.0  # pure red
        rgb[0, 1, 1] = 1.0  # pure green
        rgb[0, 2, 2] = 1.0  # pure blue
        img = to_gray_inverted(rgb)
        assert np.allclose(1.0 - img.data, [[0.299, 0.587, 0.114]])

    def test_empty_raster_rejected(self):
        with pytest.raises(InvalidInputError):
            to_gray_inverted(np.zeros((0, 4)))


class TestBuildPyramid:
    def test_constant_image_stays_constant(self):
        img = Image(np.full((4, 4), 0.37))
        pyr = build_pyramid(img, 2)
        assert pyr[1].data.shape == (2, 2)
        assert np.allclose(pyr[1].data, 0.37)

    def test_two_by_two_mean(self):
        img = Image(np.array([[0.0, 1.0], [0.0, 1.0]]))
        pyr = build_pyramid(img, 2)
        assert pyr[1].data.shape == (1, 1)
        assert pyr[1].data[0, 0] == pytest.approx(0.5)

    def test_odd_dimensions_ceiling_halve(self):
        img = Image(np.random.default_rng(0).random((4, 5)))
        pyr = build_pyramid(img, 2)
        assert pyr[1].data.shape == (2, 3)

    def test_odd_edge_pools_available_pixels(self):
        img = Image(np.array([[1.0, 2.0, 3.0]]))
        # 1x3: pools [[1,2]] -> 1.5 and the lone trailing column -> 3
        pooled = build_pyramid(Image(np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])), 2)
        assert np.allclose(pooled[1].data, [[1.5, 3.0]])
        assert img.width == 3  # original untouched

    def test_spacing_doubles_exactly(self):
        img = Image(np.random.default_rng(1).random((64, 64)), spacing=0.3)
        pyr = build_pyramid(img, 5)
        for ell in range(5):
            assert pyr[ell].spacing == 0.3 * 2.0 ** ell

    def test_too_many_levels_rejected(self):
        img = Image(np.random.default_rng(2).random((8, 8)))
        build_pyramid(img, 4)  # 8 -> 4 -> 2 -> 1 is the deepest valid pyramid
        with pytest.raises(InvalidInputError):
            build_pyramid(img, 5)  # 1x1 cannot pool further

    def test_origin_tracks_block_centroids(self):
        img = Image(np.random.default_rng(3).random((8, 8)), spacing=2.0, origin=(10.0, 20.0))
        pyr = build_pyramid(img, 2)
        assert pyr[1].origin == (11.0, 21.0)

    def test_pooled_constant_samples_constant_everywhere(self):
        img = Image(np.full((16, 16), 0.61))
        pyr = build_pyramid(img, 3)
        rng = np.random.default_rng(4)
        for level in pyr.levels:
            x0, y0, x1, y1 = level.hull
            pts = np.column_stack([rng.uniform(x0, x1, 50), rng.uniform(y0, y1, 50)])
            assert np.allclose(level.sample(pts), 0.61)


class TestSample:
    def test_pixel_centers_return_data(self):
        img = Image(np.random.default_rng(5).random((6, 7)), spacing=1.5, origin=(2.0, -1.0))
        vals = img.sample(img.pixel_centers())
        assert np.allclose(vals, img.data.ravel())

    def test_midpoint_of_adjacent_centers(self):
        img = Image(np.array([[0.0, 1.0]]))
        assert img.sample((0.5, 0.0)) == pytest.approx(0.5)

    def test_far_outside_is_zero(self):
        img = Image(np.ones((4, 4)))
        assert img.sample((100.0, -50.0)) == 0.0

    def test_nonfinite_point_rejected(self):
        img = Image(np.ones((4, 4)))
        with pytest.raises(InvalidInputError):
            img.sample((np.nan, 0.0))

    def test_lipschitz_bound_inside_hull(self):
        rng = np.random.default_rng(6)
        img = Image(rng.random((10, 10)), spacing=0.7)
        lx = np.abs(np.diff(img.data, axis=1)).max() / img.spacing
        ly = np.abs(np.diff(img.data, axis=0)).max() / img.spacing
        x0, y0, x1, y1 = img.hull
        p = np.column_stack([rng.uniform(x0, x1, 300), rng.uniform(y0, y1, 300)])
        q = np.column_stack([rng.uniform(x0, x1, 300), rng.uniform(y0, y1, 300)])
        lhs = np.abs(img.sample(p) - img.sample(q))
        rhs = lx * np.abs(p[:, 0] - q[:, 0]) + ly * np.abs(p[:, 1] - q[:, 1])
        assert np.all(lhs <= rhs + 1e-12)


class TestGradient:
    def test_linear_ramp_has_exact_slope(self):
        w, h = 9, 5
        spacing = 0.5
        slope = 1.0 / (w * spacing)
        data = np.tile(slope * spacing * np.arange(w), (h, 1))
        img = Image(data, spacing=spacing)
        g = img.gradient((1.3, 0.7))
        assert g[0] == pytest.approx(slope, rel=1e-12)
        assert g[1] == pytest.approx(0.0, abs=1e-15)

    def test_constant_image_zero_gradient(self):
        img = Image(np.full((5, 5), 0.8))
        assert np.allclose(img.gradient((2.2, 3.1)), 0.0)

    def test_outside_hull_zero(self):
        img = Image(np.random.default_rng(7).random((5, 5)))
        assert np.allclose(img.gradient((-3.0, 2.0)), 0.0)

    def test_matches_finite_differences_of_sample(self):
        rng = np.random.default_rng(8)
        img = Image(rng.random((8, 8)), spacing=1.3)
        step = 1e-4 * img.spacing
        for _ in range(50):
            # stay inside one interpolation cell so the FD stencil is smooth
            j = rng.integers(1, 6)
            i = rng.integers(1, 6)
            p = np.array([(j + rng.uniform(0.2, 0.8)) * img.spacing,
                          (i + rng.uniform(0.2, 0.8)) * img.spacing])
            g = img.gradient(p)
            fd_x = (img.sample(p + [step, 0]) - img.sample(p - [step, 0])) / (2 * step)
            fd_y = (img.sample(p + [0, step]) - img.sample(p - [0, step])) / (2 * step)
            assert g[0] == pytest.approx(fd_x, rel=1e-3, abs=1e-9)
            assert g[1] == pytest.approx(fd_y, rel=1e-3, abs=1e-9)


class TestGradientField:
    def test_node_values_are_central_differences(self):
        rng = np.random.default_rng(20)
        img = Image(rng.random((6, 7)), spacing=0.5)
        g = img.gradient_field(img.pixel_centers()).reshape(6, 7, 2)
        d = img.data
        # interior node: central difference
        assert g[2, 3, 0] == pytest.approx((d[2, 4] - d[2, 2]) / (2 * 0.5))
        assert g[2, 3, 1] == pytest.approx((d[3, 3] - d[1, 3]) / (2 * 0.5))
        # border node: one-sided
        assert g[0, 3, 1] == pytest.approx((d[1, 3] - d[0, 3]) / 0.5)

    def test_continuous_across_cell_boundaries(self):
        rng = np.random.default_rng(21)
        img = Image(rng.random((8, 8)))
        for _ in range(20):
            j = rng.integers(1, 7)
            y = rng.uniform(1.0, 6.0)
            left = img.gradient_field((j - 1e-9, y))
            right = img.gradient_field((j + 1e-9, y))
            assert np.allclose(left, right, atol=1e-7)

    def test_linear_ramp_exact_everywhere(self):
        slope = 0.25
        data = np.tile(slope * np.arange(9), (9, 1))
        img = Image(data)
        pts = np.random.default_rng(22).uniform(0, 8, size=(40, 2))
        g = img.gradient_field(pts)
        assert np.allclose(g[:, 0], slope, atol=1e-13)
        assert np.allclose(g[:, 1], 0.0, atol=1e-13)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(23)
        img = Image(rng.random((8, 8)), spacing=0.8)
        step = 1e-5 * img.spacing
        for _ in range(20):
            p = np.array([(rng.integers(1, 6) + rng.uniform(0.2, 0.8)) * img.spacing,
                          (rng.integers(1, 6) + rng.uniform(0.2, 0.8)) * img.spacing])
            g, jac = img.gradient_field_jacobian(p)
            fd_x = (img.gradient_field(p + [step, 0]) - img.gradient_field(p - [step, 0])) / (2 * step)
            fd_y = (img.gradient_field(p + [0, step]) - img.gradient_field(p - [0, step])) / (2 * step)
            assert np.allclose(jac[:, 0], fd_x, rtol=1e-4, atol=1e-8)
            assert np.allclose(jac[:, 1], fd_y, rtol=1e-4, atol=1e-8)
            assert np.allclose(g, img.gradient_field(p))


class TestFileIO:
    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        data = rng.random((12, 10))
        save_png(tmp_path / "img.png", data)
        img = load_image(tmp_path / "img.png", spacing=2.0)
        # inverted grayscale of an 8-bit quantized raster
        assert img.spacing == 2.0
        assert np.abs((1.0 - img.data) - data).max() <= 0.5 / 255 + 1e-12

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(InvalidInputError):
            load_image(tmp_path / "nope.png")

    def test_pyramid_directory(self, tmp_path):
        rng = np.random.default_rng(10)
        base = rng.random((16, 16))
        img = Image(1.0 - base)  # what to_gray_inverted would produce
        pyr = build_pyramid(img, 3)
        for ell, level in enumerate(pyr.levels):
            save_png(tmp_path / f"level_{ell}.png", 1.0 - level.data)
        (tmp_path / "manifest.json").write_text('{"spacing": 4.0, "levels": 3}')
        loaded = load_pyramid(tmp_path)
        assert len(loaded) == 3
        assert loaded.spacings() == [4.0, 8.0, 16.0]
        assert loaded[1].origin == (2.0, 2.0)
        assert np.abs(loaded[0].data - img.data).max() <= 0.5 / 255 + 1e-12

    def test_pyramid_manifest_errors(self, tmp_path):
        with pytest.raises(InvalidInputError):
            load_pyramid(tmp_path)  # no manifest
        (tmp_path / "manifest.json").write_text('{"spacing": 1.0}')
        with pytest.raises(InvalidInputError):
            load_pyramid(tmp_path)
