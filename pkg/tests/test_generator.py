import numpy as np
import pytest

from hydranat.exceptions import ConfigError, InvalidPlanError
from hydranat.generator import (
    build_config_2split,
    build_config_pyramid,
    config_from_dict,
    count_generator_macs,
    count_generator_params,
    fit_kernel,
    init_generator_params,
    layer_norm,
    mapping_forward,
    modulate,
    sample_latents,
    synthesis_forward,
)
from hydranat.tensor import mac_counter, make_rng


@pytest.fixture(scope="module")
def small():
    cfg = build_config_2split(16, channels={4: 32, 8: 32, 16: 16}, heads={4: 2, 8: 2, 16: 2}, mapping_layers=2,
                              latent_dim=32)
    return cfg, init_generator_params(cfg, make_rng(0))


class TestConfigs:
    def test_2split_level_256(self):
        plan = build_config_2split(256).plans[256]
        assert [s.kernel for s in plan.specs] == [7, 7]
        assert plan.specs[1].dilation == 32 and plan.specs[1].dilated_size == 224

    def test_2split_level_8(self):
        assert [s.dilation for s in build_config_2split(8).plans[8].specs] == [1, 1]

    def test_2split_target_64(self):
        cfg = build_config_2split(64)
        assert cfg.resolutions == [4, 8, 16, 32, 64]
        assert 4 not in cfg.plans
        assert [cfg.plans[lvl].specs[1].dilation for lvl in (8, 16, 32, 64)] == [1, 2, 4, 8]

    def test_pyramid_rows(self):
        cfg = build_config_pyramid(64)
        assert [s.dilation for s in cfg.plans[64].specs] == [1, 2, 4, 8]
        assert [s.dilation for s in cfg.plans[16].specs] == [1, 2]

    def test_pyramid_uneven_heads(self):
        cfg = build_config_pyramid(64, heads={64: 6}, channels={64: 48})
        assert cfg.plans[64].head_counts == [1, 1, 2, 2]

    def test_pyramid_cap(self):
        cfg = build_config_pyramid(64, num_splits_by_level={64: 2})
        assert [s.dilation for s in cfg.plans[64].specs] == [1, 2]

    def test_pyramid_needs_heads(self):
        with pytest.raises(InvalidPlanError):
            build_config_pyramid(64, heads={64: 2})

    def test_min_heads(self):
        cfg = build_config_2split(32, min_heads=8)
        assert all(h == 8 for h in cfg.heads.values())

    @pytest.mark.parametrize("target", [4, 12, 2048, 100])
    def test_bad_target(self, target):
        with pytest.raises(ConfigError):
            build_config_2split(target)

    def test_kernel_fallback(self):
        assert fit_kernel(8, 1) == 7
        assert fit_kernel(8, 2) == 3
        assert fit_kernel(4, 1) == 3
        assert fit_kernel(6, 1) == 5

    def test_json_round_trip(self):
        cfg = build_config_pyramid(32, channels={32: 48}, heads={32: 6}, seed=9)
        again = config_from_dict(cfg.to_dict())
        assert again.plans == cfg.plans and again.channels == cfg.channels and again.seed == 9

    def test_unknown_design(self):
        with pytest.raises(ConfigError):
            config_from_dict({"target": 32, "design": "swin"})


class TestMapping:
    def test_zero_weights(self, rng):
        params = {"mapping.0.weight": np.zeros((8, 8)), "mapping.0.bias": np.zeros(8)}
        np.testing.assert_array_equal(mapping_forward(rng.standard_normal((3, 8)), params), 0)

    def test_identity_weights(self, rng):
        params = {f"mapping.{i}.{n}": (np.eye(8) if n == "weight" else np.zeros(8))
                  for i in range(3) for n in ("weight", "bias")}
        z = np.abs(rng.standard_normal((2, 8)))
        expected = z / np.sqrt((z ** 2).mean(axis=1, keepdims=True) + 1e-8)
        np.testing.assert_allclose(mapping_forward(z, params), expected, atol=1e-14)

    def test_deterministic(self, small):
        cfg, params = small
        a = mapping_forward(sample_latents(make_rng(3), 2, 32), params)
        b = mapping_forward(sample_latents(make_rng(3), 2, 32), params)
        assert a.tobytes() == b.tobytes()


class TestModulate:
    def test_zero_affine_is_norm(self, rng):
        x = rng.standard_normal((2, 3, 3, 6))
        zw, zb = np.zeros((6, 4)), np.zeros(6)
        np.testing.assert_allclose(modulate(x, rng.standard_normal((2, 4)), zw, zb, zw, zb), layer_norm(x))

    def test_constant_channels_gives_shift(self, rng):
        x = np.full((2, 3, 3, 6), 1.7)
        w = rng.standard_normal((2, 4))
        sw, bw = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
        out = modulate(x, w, sw, np.zeros(6), bw, np.zeros(6))
        np.testing.assert_allclose(out, np.broadcast_to((w @ bw.T)[:, None, None, :], out.shape), atol=1e-12)

    def test_norm_statistics(self, rng):
        y = layer_norm(rng.standard_normal((2, 5, 5, 16)) * 3 + 2)
        assert np.abs(y.mean(axis=-1)).max() <= 1e-6


class TestSynthesis:
    def test_zero_weights(self, small):
        cfg, params = small
        zero = {k: np.zeros_like(v) for k, v in params.items()}
        w = mapping_forward(sample_latents(make_rng(1), 2, 32), zero)
        np.testing.assert_array_equal(synthesis_forward(w, cfg, zero), 0)

    def test_bit_identical_runs(self, small):
        cfg, params = small
        z = sample_latents(make_rng(5), 1, 32)
        a = synthesis_forward(mapping_forward(z, params), cfg, params)
        b = synthesis_forward(mapping_forward(z, params), cfg, params)
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("target", [8, 16, 32, 64])
    def test_shape_law(self, target):
        cfg = build_config_2split(target, mapping_layers=1, latent_dim=16)
        params = init_generator_params(cfg, make_rng(target))
        img = synthesis_forward(mapping_forward(sample_latents(make_rng(0), 2, 16), params), cfg, params)
        assert img.shape == (2, 3, target, target)
        assert np.isfinite(img).all()

    def test_style_sensitivity(self, small):
        cfg, params = small
        w = mapping_forward(sample_latents(make_rng(2), 2, 32), params)
        img = synthesis_forward(w, cfg, params)
        assert np.abs(img[0] - img[1]).max() > 0

    def test_params_mismatch(self, small):
        cfg, params = small
        broken = dict(params)
        broken.pop("const")
        with pytest.raises(ConfigError):
            synthesis_forward(np.zeros((1, 32), np.float32), cfg, broken)

    def test_capture(self, small):
        cfg, params = small
        cap = {}
        synthesis_forward(mapping_forward(sample_latents(make_rng(0), 1, 32), params), cfg, params, capture=cap)
        assert set(cap) == {(lvl, layer) for lvl in (4, 8, 16) for layer in (1, 2)}
        assert len(cap[(16, 1)]) == 2


class TestAccounting:
    @pytest.mark.parametrize("builder", [build_config_2split, build_config_pyramid])
    def test_params_equal_tensor_sizes(self, builder):
        cfg = builder(64)
        params = init_generator_params(cfg, make_rng(0))
        assert count_generator_params(cfg) == sum(v.size for v in params.values())

    def test_mapping_share(self):
        cfg = build_config_2split(16)
        params = init_generator_params(cfg, make_rng(0))
        mapping = sum(v.size for k, v in params.items() if k.startswith("mapping."))
        assert mapping == 8 * (512 * 512 + 512) == 2_101_248

    def test_partition_invariance(self):
        a = build_config_pyramid(64, heads={64: 8}, channels={64: 32})
        b = build_config_pyramid(64, heads={64: 8}, channels={64: 32}, num_splits_by_level={64: 1, 32: 1, 16: 1})
        assert count_generator_params(a) == count_generator_params(b)
        assert count_generator_macs(a) == count_generator_macs(b)

    def test_channel_delta_is_level_local(self):
        base = build_config_2split(32)
        wide = build_config_2split(32, channels={32: 128})
        c_old, c_new, prev, latent = 64, 128, 64, 512

        def level_params(c):
            per_layer = 2 * (latent * c + c) + 4 * c * c + 4 * c + 2 * 2 * 13 * 13
            inproj = prev * c + c if c != prev else 0
            return 2 * per_layer + 3 * c + 3 + inproj

        delta = count_generator_params(wide) - count_generator_params(base)
        assert delta == level_params(c_new) - level_params(c_old)

    def test_instrumented_macs(self, small):
        cfg, params = small
        with mac_counter() as box:
            synthesis_forward(mapping_forward(sample_latents(make_rng(0), 2, 32), params), cfg, params)
        assert box[0] == count_generator_macs(cfg, batch=2)
