import numpy as np
import pytest

from hydranat.attnviz import (
    AttentionMaps,
    maps_from_capture,
    na_attention_map,
    render_grayscale,
    window_partition,
    window_reverse,
    windowed_attention_map,
)
from hydranat.exceptions import DimensionError
from hydranat.io import pgm_bytes, ppm_bytes, to_uint8_rgb, write_pgm


class TestNAMap:
    def test_constant_keys_uniform(self, rng):
        q = rng.standard_normal((2, 3, 5, 6, 4))
        kt = np.broadcast_to(rng.standard_normal((2, 3, 1, 1, 4)), q.shape)
        m = na_attention_map(q, kt).maps
        np.testing.assert_allclose(m, 1 / 30, atol=1e-15)

    def test_zero_query_uniform(self, rng):
        m = na_attention_map(np.zeros((1, 2, 4, 4, 3)), rng.standard_normal((1, 2, 4, 4, 3))).maps
        np.testing.assert_allclose(m, 1 / 16)

    def test_spike_argmax(self, rng):
        q = np.tile(np.array([1.0, 0.5, -0.25]), (1, 1, 6, 6, 1))
        kt = rng.normal(0, 0.01, q.shape)
        kt[0, 0, 2, 4] = 10 * q[0, 0, 0, 0]
        m = na_attention_map(q, kt).maps
        assert np.unravel_index(m[0, 0].argmax(), (6, 6)) == (2, 4)

    def test_sums_to_one(self, rng):
        m = na_attention_map(rng.standard_normal((2, 4, 7, 5, 3)), rng.standard_normal((2, 4, 7, 5, 3)), 0.5).maps
        assert np.abs(m.sum(axis=(2, 3)) - 1).max() <= 1e-5

    def test_raw_logits_direct(self, rng):
        q, kt = rng.standard_normal((1, 1, 3, 3, 2)), rng.standard_normal((1, 1, 3, 3, 2))
        m = na_attention_map(q, kt, scale=2.0, normalized=False).maps
        q_bar = 2.0 * q[0, 0].reshape(9, 2).mean(0)
        np.testing.assert_allclose(m[0, 0].ravel(), kt[0, 0].reshape(9, 2) @ q_bar, atol=1e-14)

    def test_permutation_invariance(self, rng):
        q, kt = rng.standard_normal((1, 2, 4, 5, 3)), rng.standard_normal((1, 2, 4, 5, 3))
        perm = rng.permutation(20)

        def permute(t):
            return t.reshape(1, 2, 20, 3)[:, :, perm].reshape(t.shape)

        base = na_attention_map(q, kt).maps.reshape(1, 2, 20)[:, :, perm]
        moved = na_attention_map(permute(q), permute(kt)).maps.reshape(1, 2, 20)
        np.testing.assert_allclose(moved, base, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            na_attention_map(np.zeros((1, 1, 2, 2, 3)), np.zeros((1, 1, 2, 3, 3)))


class TestWindowing:
    @pytest.mark.parametrize("shift", [0, 2])
    def test_round_trip_bit_identical(self, rng, shift):
        x = rng.standard_normal((2, 3, 8, 12, 5))
        back = window_reverse(window_partition(x, 4, shift), 4, 8, 12, shift)
        assert back.tobytes() == x.tobytes()

    def test_partition_shape(self, rng):
        assert window_partition(rng.standard_normal((2, 3, 8, 12, 5)), 4).shape == (2 * 2 * 3, 3, 16, 5)

    def test_window_contents(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4, 1)
        w = window_partition(x, 2)
        np.testing.assert_array_equal(w[1, 0, :, 0], [2, 3, 6, 7])

    def test_single_window_matches_na_map(self, rng):
        q, kt = rng.standard_normal((1, 2, 4, 4, 3)), rng.standard_normal((1, 2, 4, 4, 3))
        qw, kw = window_partition(q, 4), window_partition(kt, 4)
        a = windowed_attention_map(qw, kw, 4, 4, 4).maps
        np.testing.assert_array_equal(a, na_attention_map(q, kt).maps)

    def test_shifted_map_undoes_shift(self, rng):
        q, kt = rng.standard_normal((1, 2, 8, 8, 3)), rng.standard_normal((1, 2, 8, 8, 3))
        qw, kw = window_partition(q, 4, 2), window_partition(kt, 4, 2)
        a = windowed_attention_map(qw, kw, 4, 8, 8, shifted=True).maps
        np.testing.assert_array_equal(a, na_attention_map(q, kt).maps)

    def test_non_factoring_leading_extent(self, rng):
        with pytest.raises(DimensionError):
            window_reverse(rng.standard_normal((5, 1, 16, 2)), 4, 8, 8)


class TestRender:
    def test_constant_mid_gray(self):
        rasters = render_grayscale(AttentionMaps(np.full((1, 2, 3, 3), 0.25)))
        assert all((r == 128).all() for r in rasters)

    def test_min_max_per_head(self, rng):
        rasters = render_grayscale(AttentionMaps(rng.standard_normal((1, 3, 4, 4))))
        for r in rasters:
            assert r.min() == 0 and r.max() == 255

    def test_monotone(self, rng):
        m = rng.standard_normal((1, 1, 6, 6))
        r = render_grayscale(AttentionMaps(m))[0].ravel().astype(int)
        order = np.argsort(m.ravel(), kind="stable")
        assert np.all(np.diff(r[order]) >= 0)

    def test_global_range(self):
        m = np.stack([np.zeros((2, 2)), np.ones((2, 2))])[None]
        r = render_grayscale(AttentionMaps(m), per_head_minmax=False)
        assert (r[0] == 0).all() and (r[1] == 255).all()

    def test_capture_concat(self, rng):
        recs = [{"q": rng.standard_normal((1, h, 4, 4, 2)), "k": rng.standard_normal((1, h, 4, 4, 2)), "scale": 0.7}
                for h in (1, 3)]
        m = maps_from_capture(recs)
        assert m.maps.shape == (1, 4, 4, 4)


class TestRasterFiles:
    def test_pgm_header_and_payload(self, tmp_path):
        g = np.arange(6, dtype=np.uint8).reshape(2, 3)
        write_pgm(tmp_path / "a.pgm", g)
        data = (tmp_path / "a.pgm").read_bytes()
        assert data == b"P5\n3 2\n255\n" + bytes(range(6))
        assert pgm_bytes(g) == data

    def test_ppm_interleaves_rgb(self):
        rgb = np.zeros((3, 1, 2), np.uint8)
        rgb[0, 0, 1] = 255
        assert ppm_bytes(rgb) == b"P6\n2 1\n255\n" + bytes([0, 0, 0, 255, 0, 0])

    def test_rgb_mapping(self):
        np.testing.assert_array_equal(to_uint8_rgb(np.array([-2.0, -1.0, 0.0, 1.0, 3.0])), [0, 0, 128, 255, 255])
