"""Architecture shapes, fusion invariants, accounting, checkpoints."""

import numpy as np
import pytest

from codlab.model import (
    Model,
    ModelConfig,
    build_model,
    count_macs,
    count_params,
    dgnet_config,
    dgnet_s_config,
    git_regroup,
    load_checkpoint,
    model_from_checkpoint,
    param_breakdown,
    regroup_permutation,
    save_checkpoint,
    toy_config,
)
from codlab.tensor import Tape, Tensor, concat_channels, resize_bilinear, sum_all


def rand_image(rng, n, size, dtype=np.float32):
    return Tensor(rng.random((n, 3, size, size)).astype(dtype))


class TestConfig:
    def test_small_variant_builds_with_all_projection_factors(self):
        model = build_model(dgnet_s_config(), seed=0)
        for lvl in (3, 4, 5):
            assert set(model.git[lvl]) == {8, 16, 32}

    def test_indivisible_ci_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(ci=33, m=8).validate()

    def test_input_size_multiple_of_32(self):
        with pytest.raises(ValueError):
            ModelConfig(input_size=100).validate()

    def test_same_seed_identical_parameter_bytes(self):
        a = build_model(toy_config(), seed=3)
        b = build_model(toy_config(), seed=3)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_kv_roundtrip(self):
        cfg = dgnet_config(supervision="boundary")
        assert ModelConfig.from_kv(cfg.to_kv()) == cfg


class TestTextureEncoder:
    def test_full_resolution_shapes(self, rng):
        model = build_model(dgnet_s_config(), seed=0)
        xg, pg = model.texture_forward(rand_image(rng, 1, 352))
        assert xg.shape == (1, 32, 44, 44)
        assert pg.shape == (1, 1, 44, 44)

    def test_toy_stride_arithmetic(self, rng):
        model = build_model(toy_config(), seed=0)
        xg, pg = model.texture_forward(rand_image(rng, 2, 96))
        assert xg.shape == (2, 8, 12, 12)
        assert pg.shape == (2, 1, 12, 12)

    def test_parameter_count_per_layer_arithmetic(self):
        model = build_model(dgnet_s_config(), seed=0)
        # 9408+128 + 36864+128 + 18432+64 + 32+2
        assert count_params(model, "texture") == 65_058
        assert count_params(model, "texture.l1") == 9408 + 128
        assert count_params(model, "texture.l2") == 36864 + 128
        assert count_params(model, "texture.l3") == 18432 + 64
        assert count_params(model, "texture.l4") == 32 + 2

    def test_indivisible_input_rejected(self, rng):
        model = build_model(toy_config(), seed=0)
        with pytest.raises(ValueError):
            model.texture_forward(Tensor(rng.random((1, 3, 44, 44)).astype(np.float32)))


class TestContextEncoder:
    def test_pyramid_shapes_at_352(self, rng):
        model = build_model(dgnet_s_config(), seed=0)
        feats = model.context_forward(rand_image(rng, 1, 352))
        assert feats[3].shape == (1, 32, 44, 44)
        assert feats[4].shape == (1, 32, 22, 22)
        assert feats[5].shape == (1, 32, 11, 11)

    def test_wider_variant_channels(self, rng):
        model = build_model(dgnet_config(), seed=0)
        feats = model.context_forward(rand_image(rng, 1, 352))
        assert all(feats[lvl].shape[1] == 64 for lvl in (3, 4, 5))

    def test_zero_image_finite_in_eval(self):
        model = build_model(toy_config(), seed=0)
        x = Tensor(np.zeros((1, 3, 96, 96), dtype=np.float32))
        feats = model.context_forward(x, training=False)
        for t in feats.values():
            assert np.all(np.isfinite(t.data))


class TestRegroup:
    def test_m1_degenerates_to_concat(self, rng):
        xr = Tensor(rng.random((1, 8, 6, 6)).astype(np.float32))
        xg = Tensor(rng.random((1, 8, 12, 12)).astype(np.float32))
        q = git_regroup(xr, xg, 1)
        ref = concat_channels([resize_bilinear(xg, 6, 6), xr])
        np.testing.assert_array_equal(q.data, ref.data)

    def test_table_config_interleave_is_8_blocks_of_4_plus_4(self):
        ci = cg = 32
        m = 8
        # constant tracer: texture channel j = 1000+j, context channel j = 2000+j
        xg = Tensor(np.tile((1000 + np.arange(cg, dtype=np.float32)).reshape(1, cg, 1, 1), (1, 1, 4, 4)))
        xr = Tensor(np.tile((2000 + np.arange(ci, dtype=np.float32)).reshape(1, ci, 1, 1), (1, 1, 4, 4)))
        q = git_regroup(xr, xg, m)
        assert q.shape == (1, 64, 4, 4)
        got = q.data[0, :, 0, 0]
        expect = []
        for g in range(m):
            expect.extend(1000 + np.arange(g * 4, (g + 1) * 4))
            expect.extend(2000 + np.arange(g * 4, (g + 1) * 4))
        np.testing.assert_array_equal(got, np.array(expect, dtype=np.float32))

    def test_permutation_is_bijective_and_invertible(self):
        for ci, cg, m in ((32, 32, 8), (64, 32, 8), (8, 8, 2), (12, 6, 3)):
            perm = regroup_permutation(ci, cg, m)
            assert sorted(perm.tolist()) == list(range(ci + cg))
            inv = np.empty_like(perm)
            inv[perm] = np.arange(ci + cg)
            np.testing.assert_array_equal(perm[inv], np.arange(ci + cg))

    def test_divisibility_enforced(self, rng):
        xr = Tensor(rng.random((1, 9, 4, 4)).astype(np.float32))
        xg = Tensor(rng.random((1, 8, 4, 4)).astype(np.float32))
        with pytest.raises(ValueError):
            git_regroup(xr, xg, 2)


class TestGitTransition:
    def test_residual_identity_with_zeroed_projections(self, rng):
        model = build_model(toy_config(), seed=1)
        for lvl in (3, 4, 5):
            for block in model.git[lvl].values():
                block.w.data[...] = 0.0
                block.b.data[...] = 0.0
                block.gamma.data[...] = 0.0
        xr = Tensor(rng.random((1, 8, 12, 12)).astype(np.float32))
        xg = Tensor(rng.random((1, 8, 12, 12)).astype(np.float32))
        out = model.git_transition(3, xr, xg, training=True)
        np.testing.assert_array_equal(out.data, xr.data)

    @pytest.mark.parametrize("cfg", [dgnet_s_config(), dgnet_config()],
                             ids=["small", "large"])
    def test_shape_preserved_for_table_configs(self, cfg, rng):
        model = build_model(cfg, seed=0)
        for lvl, hw in ((3, 44), (4, 22), (5, 11)):
            xr = Tensor(rng.random((1, cfg.ci, hw, hw)).astype(np.float32))
            xg = Tensor(rng.random((1, cfg.cg, 44, 44)).astype(np.float32))
            out = model.git_transition(lvl, xr, xg)
            assert out.shape == (1, cfg.ci, hw, hw)

    def test_grouped_projection_equals_block_loop(self, rng):
        from codlab.tensor import conv2d

        model = build_model(toy_config(), seed=2)
        cfg = model.config
        xr = Tensor(rng.random((1, cfg.ci, 8, 8)).astype(np.float32))
        xg = Tensor(rng.random((1, cfg.cg, 8, 8)).astype(np.float32))
        q = git_regroup(xr, xg, cfg.m)
        for n in cfg.n_set:
            block = model.git[3][n]
            grouped = conv2d(q, block.w, block.b, groups=n).data
            cin_g = (cfg.ci + cfg.cg) // n
            cout_g = cfg.ci // n
            parts = []
            for g in range(n):
                xq = Tensor(q.data[:, g * cin_g : (g + 1) * cin_g])
                wq = Tensor(block.w.data[g * cout_g : (g + 1) * cout_g])
                bq = Tensor(block.b.data[g * cout_g : (g + 1) * cout_g])
                parts.append(conv2d(xq, wq, bq).data)
            np.testing.assert_allclose(grouped, np.concatenate(parts, axis=1),
                                       rtol=1e-6, atol=1e-6)


class TestDecoderAndForward:
    def test_full_resolution_logits(self, rng):
        model = build_model(dgnet_s_config(), seed=0)
        pc, pg = model.forward(rand_image(rng, 1, 352))
        assert pc.shape == (1, 1, 352, 352)
        assert pg.shape == (1, 1, 44, 44)

    def test_zeroed_decoder_constant_bias_map(self, rng):
        model = build_model(toy_config(), seed=0)
        for name, p in model.params.items():
            if name.startswith("ncd."):
                p.data[...] = 0.0
        model.params["ncd.head.conv.b"].data[...] = 1.25
        zt = [Tensor(rng.random((1, 8, s, s)).astype(np.float32)) for s in (12, 6, 3)]
        out = model.ncd_decode(*zt, training=False)
        np.testing.assert_allclose(out.data, 1.25, atol=1e-6)

    def test_gradient_reaches_all_three_levels(self, rng):
        model = build_model(toy_config(), seed=0)
        zt = [Tensor(rng.random((1, 8, s, s)).astype(np.float32), requires_grad=True)
              for s in (12, 6, 3)]
        with Tape() as tape:
            out = model.ncd_decode(*zt, training=True)
            tape.backward(sum_all(out), params=zt)
        for t in zt:
            assert t.grad is not None and np.abs(t.grad).max() > 0

    def test_base_ablation_pc_only(self, rng):
        model = build_model(toy_config(texture_branch=False), seed=0)
        pc, pg = model.forward(rand_image(rng, 1, 96))
        assert pc.shape == (1, 1, 96, 96)
        assert pg is None

    def test_concat_fusion_forward(self, rng):
        model = build_model(toy_config(fusion="concat"), seed=0)
        pc, pg = model.forward(rand_image(rng, 1, 96))
        assert pc.shape == (1, 1, 96, 96)
        assert pg is not None


class TestAccounting:
    def test_git_projection_params_match_grouped_formula(self):
        model = build_model(dgnet_s_config(), seed=0)
        # sum_N [(ci+cg)*ci/N + ci] = 448 + 96 per level
        for lvl in (3, 4, 5):
            conv_params = sum(
                t.size for name, t in model.params.items()
                if name.startswith(f"git{lvl}.") and ".conv." in name
            )
            assert conv_params == 544
        total_conv = sum(
            t.size for name, t in model.params.items()
            if name.startswith("git") and ".conv." in name
        )
        assert total_conv == 1632

    def test_param_delta_vs_base(self):
        full = build_model(dgnet_s_config(), seed=0)
        base = build_model(dgnet_s_config(texture_branch=False), seed=0)
        delta = count_params(full) - count_params(base)
        assert 55_000 <= delta <= 75_000

    def test_parameter_count_additivity(self):
        full = build_model(dgnet_s_config(), seed=0)
        base = build_model(dgnet_s_config(texture_branch=False), seed=0)
        texture = count_params(full, "texture")
        git = count_params(full, "git")
        assert count_params(full) == count_params(base) + texture + git

    def test_macs_counts_conv_work_only(self, rng):
        model = build_model(toy_config(), seed=0)
        total, scoped = count_macs(model, 96, 96, breakdown=True)
        # texture layer 1: 8 * 3 * 49 * 48 * 48 MACs
        assert scoped["texture"] >= 8 * 3 * 49 * 48 * 48
        assert total == sum(scoped.values())

    def test_macs_delta_direction(self):
        full = build_model(dgnet_s_config(), seed=0)
        base = build_model(dgnet_s_config(texture_branch=False), seed=0)
        delta = count_macs(full, 352) - count_macs(base, 352)
        assert 0.5e9 <= delta <= 0.8e9


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        model = build_model(toy_config(), seed=5)
        path = tmp_path / "m.ckpt"
        kv = {f"model.{k}": v for k, v in model.config.to_kv().items()}
        save_checkpoint(path, kv, model.state_tensors())
        kv2, tensors = load_checkpoint(path)
        assert kv2 == kv
        path2 = tmp_path / "m2.ckpt"
        save_checkpoint(path2, kv2, tensors)
        assert path.read_bytes() == path2.read_bytes()

    def test_model_restores_forward_exactly(self, tmp_path, rng):
        model = build_model(toy_config(), seed=6)
        x = rand_image(rng, 1, 96)
        pc, _ = model.forward(x)
        path = tmp_path / "m.ckpt"
        kv = {f"model.{k}": v for k, v in model.config.to_kv().items()}
        save_checkpoint(path, kv, model.state_tensors())
        restored, _, _ = model_from_checkpoint(path)
        pc2, _ = restored.forward(x)
        np.testing.assert_array_equal(pc.data, pc2.data)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_missing_parameter_rejected(self, tmp_path):
        model = build_model(toy_config(), seed=0)
        state = model.state_tensors()
        state.pop(sorted(k for k in state if k.startswith("param."))[0])
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, {}, state)
        _, tensors = load_checkpoint(p)
        with pytest.raises(KeyError):
            model.load_state(tensors)


class TestBreakdown:
    def test_scopes_cover_everything(self):
        model = build_model(dgnet_s_config(), seed=0)
        assert sum(param_breakdown(model).values()) == count_params(model)
