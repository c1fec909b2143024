import numpy as np
import pytest

from detrack.model import DeTrackModel, ModelConfig
from detrack.vit import (DenoisingViT, ImageAttentionBlock, VitConfig,
                         intermediate_decode, zero_residual_branches)
from detrack.vocab import Vocabulary, decode_box

from conftest import finite_diff, model_inputs, rel_err, tiny_model


def test_config_validation():
    with pytest.raises(ValueError):
        VitConfig(depth=0)
    with pytest.raises(ValueError):
        VitConfig(noise_pred_mode="both")
    with pytest.raises(ValueError):
        VitConfig(template_size=30)


class TestShapes:
    def test_token_counts(self, rng):
        # 2 templates of 32x32 at patch 16 -> 8 tokens; 64x64 search -> 16
        model = tiny_model(dim=128, heads=4)
        templates, search, tokens, _ = model_inputs(rng, batch=1, n_templates=2,
                                                    bins=model.vocab.bins)
        image_tokens, trace, _ = model.vit.forward(templates, search, tokens)
        assert image_tokens.z.shape == (1, 8, 128)
        assert image_tokens.s.shape == (1, 16, 128)
        assert len(trace.states) == model.mc.vit.depth + 1
        assert all(s.shape == (1, 4, 128) for s in trace.states)
        assert len(trace.eps) == model.mc.vit.depth

    def test_width_mismatch_rejected(self, rng):
        block = ImageAttentionBlock(VitConfig(dim=16, heads=2), rng)
        with pytest.raises(ValueError, match="width mismatch"):
            block.forward(rng.random((1, 4, 16)), rng.random((1, 4, 8)))

    def test_wrong_image_size_rejected(self, rng):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.vit.forward(rng.random((1, 1, 16, 16, 3)), rng.random((1, 64, 64, 3)),
                              np.zeros((1, 4), dtype=int))


class TestDeterminism:
    def test_same_inputs_same_trace(self, rng):
        model = tiny_model()
        templates, search, tokens, _ = model_inputs(rng)
        _, t1, _ = model.vit.forward(templates, search, tokens)
        _, t2, _ = model.vit.forward(templates, search, tokens)
        for a, b in zip(t1.states, t2.states):
            assert np.array_equal(a, b)


class TestBlockAlgebra:
    def test_subtraction_identity_random_weights(self):
        # x_next == x'' - eps for every block of every forward pass
        for seed in range(10):
            model = tiny_model(seed=seed)
            gen = np.random.default_rng(seed)
            templates, search, tokens, _ = model_inputs(gen, bins=model.vocab.bins)
            _, trace, _ = model.vit.forward(templates, search, tokens)
            for j in range(model.mc.vit.depth):
                lhs = trace.states[j + 1]
                rhs = trace.ffn_states[j] - trace.eps[j]
                assert np.max(np.abs(lhs - rhs)) < 1e-6

    def test_zero_noise_head(self, rng):
        model = tiny_model()
        for blk in model.vit.denoise_blocks:
            blk.np1.w.value[...] = 0.0
            blk.np1.b.value[...] = 0.0
            blk.np2.w.value[...] = 0.0
            blk.np2.b.value[...] = 0.0
        templates, search, tokens, _ = model_inputs(rng, bins=model.vocab.bins)
        _, trace, _ = model.vit.forward(templates, search, tokens)
        for j in range(model.mc.vit.depth):
            assert np.array_equal(trace.eps[j], np.zeros_like(trace.eps[j]))
            assert np.array_equal(trace.states[j + 1], trace.ffn_states[j])

    def test_zeroed_residual_regime_total_noise(self, rng):
        # with attention out-projections and FFN second layers zeroed the
        # final latent equals the input minus the summed predicted noises
        model = tiny_model(depth=4)
        zero_residual_branches(model.vit)
        templates, search, tokens, _ = model_inputs(rng, bins=model.vocab.bins)
        _, trace, _ = model.vit.forward(templates, search, tokens)
        total = trace.states[0] - sum(trace.eps)
        assert np.max(np.abs(trace.states[-1] - total)) < 1e-5
        # residuals really were inert
        for j in range(4):
            assert np.max(np.abs(trace.ffn_states[j] - trace.states[j])) == 0.0


class TestNoisePredModes:
    def test_total_mode_only_last_block_predicts(self, rng):
        model = tiny_model(noise_pred_mode="total", depth=3)
        templates, search, tokens, _ = model_inputs(rng, bins=model.vocab.bins)
        _, trace, _ = model.vit.forward(templates, search, tokens)
        assert np.array_equal(trace.eps[0], np.zeros_like(trace.eps[0]))
        assert np.array_equal(trace.eps[1], np.zeros_like(trace.eps[1]))
        assert np.any(trace.eps[2] != 0.0)

    def test_modes_share_checkpoint_shapes(self):
        a = tiny_model(noise_pred_mode="per_block")
        b = tiny_model(noise_pred_mode="total")
        pa = {k: v.value.shape for k, v in a.params().items()}
        pb = {k: v.value.shape for k, v in b.params().items()}
        assert pa == pb

    def test_mode_switch_in_place(self, rng):
        model = tiny_model(depth=3)
        model.vit.set_noise_pred_mode("total")
        assert [blk.head_active for blk in model.vit.denoise_blocks] == [False, False, True]
        model.vit.set_noise_pred_mode("per_block")
        assert all(blk.head_active for blk in model.vit.denoise_blocks)


class TestImageBlockResidual:
    def test_zero_output_projections_give_identity(self, rng):
        cfg = VitConfig(dim=16, heads=2)
        block = ImageAttentionBlock(cfg, rng)
        block.attn.wo.w.value[...] = 0.0
        block.attn.wo.b.value[...] = 0.0
        block.ffn.lin2.w.value[...] = 0.0
        block.ffn.lin2.b.value[...] = 0.0
        z = rng.standard_normal((2, 3, 16))
        s = rng.standard_normal((2, 5, 16))
        z2, s2, _ = block.forward(z, s)
        assert np.array_equal(z2, z)
        assert np.array_equal(s2, s)

    def test_attention_rows_sum_to_one(self, rng):
        cfg = VitConfig(dim=16, heads=2)
        block = ImageAttentionBlock(cfg, rng)
        z = rng.standard_normal((1, 3, 16))
        s = rng.standard_normal((1, 5, 16))
        _, _, cache = block.forward(z, s)
        weights = cache[2][7]  # attention cache inside the block cache
        assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-6)


class TestPermutationEquivariance:
    def test_template_token_permutation(self, rng):
        # no positional encoding on templates: permuting template tokens
        # permutes template outputs identically and leaves search unchanged
        model = tiny_model(template_pos_emb=False)
        templates, search, tokens, _ = model_inputs(rng, n_templates=2,
                                                    bins=model.vocab.bins)
        z0, s0, _ = model.vit.embed_images(templates, search)
        perm = np.random.default_rng(0).permutation(z0.shape[1])

        def run(z, s):
            for ib in model.vit.image_blocks:
                z, s, _ = ib.forward(z, s)
            return z, s

        z_out, s_out = run(z0, s0)
        z_perm, s_perm = run(z0[:, perm], s0)
        assert np.allclose(z_perm, z_out[:, perm], atol=1e-10)
        assert np.allclose(s_perm, s_out, atol=1e-10)


class TestGradients:
    def test_noise_pred_weight_matches_finite_differences(self, rng):
        # depth-2 toy: d(sum of final latent)/d(one NoisePred weight)
        model = tiny_model(depth=2, dim=16, heads=2, bins=8)
        templates, search, tokens, _ = model_inputs(rng, batch=1, bins=8)

        def scalar():
            _, trace, _ = model.vit.forward(templates, search, tokens)
            return float(trace.states[-1].sum())

        for p in model.params().values():
            p.zero_grad()
        _, trace, cache = model.vit.forward(templates, search, tokens)
        model.vit.backward(None, None, np.ones_like(trace.states[-1]), cache)
        checks = 0
        for name in ("vit.denoise_block0.np1.w", "vit.denoise_block1.np2.w",
                     "vit.image_block0.attn.wq.w", "vit.patch_embed.w"):
            p = model.params()[name]
            fd = finite_diff(scalar, p.value, [(1, 2), (3, 0)], eps=1e-6)
            for idx, val in fd.items():
                assert rel_err(val, p.grad[idx], floor=1e-8) < 1e-3, name
                checks += 1
        assert checks == 8


class TestStability:
    def test_no_nan_over_seeds(self):
        # random init plus random inputs never propagates NaN
        for seed in range(100):
            model = tiny_model(depth=2, dim=16, heads=2, bins=8, seed=seed)
            gen = np.random.default_rng(seed)
            templates, search, tokens, _ = model_inputs(gen, batch=1, bins=8)
            _, trace, _ = model.vit.forward(templates, search, tokens)
            assert all(np.all(np.isfinite(s)) for s in trace.states)


class TestIntermediateDecode:
    def test_final_step_matches_direct_decode(self, rng):
        model = tiny_model()
        templates, search, tokens, _ = model_inputs(rng, bins=model.vocab.bins)
        _, trace, _ = model.vit.forward(templates, search, tokens)
        bb, conf = intermediate_decode(trace, model.mc.vit.depth, model.vocab)
        direct, direct_conf = decode_box(model.vocab.readout(trace.states[-1][0]),
                                         model.vocab.bins)
        assert bb == direct
        assert conf == direct_conf

    def test_out_of_range_step(self, rng):
        model = tiny_model()
        templates, search, tokens, _ = model_inputs(rng, bins=model.vocab.bins)
        _, trace, _ = model.vit.forward(templates, search, tokens)
        with pytest.raises(ValueError):
            intermediate_decode(trace, model.mc.vit.depth + 1, model.vocab)
