"""Tests for the two CNN profiles, their ops, and checkpointing."""

import numpy as np
import pytest
import torch

from guided_sed.errors import ConfigError, InputError, ValidationError
from guided_sed.nets import (
    CnnBlockSpec,
    CnnModuleSpec,
    ModelSpec,
    attention_pooling,
    build_model,
    count_params,
    gaussian_input_noise,
    _generator_dropout,
    load_checkpoint,
    ps_spec,
    pt_spec,
    restore_frames,
    save_checkpoint,
    temporal_receptive_field,
)


def tiny_ps(n_mels=16, n_classes=3):
    modules = (
        CnnModuleSpec(CnnBlockSpec(4, (3, 3)), (1, 2)),
        CnnModuleSpec(CnnBlockSpec(6, (5, 5)), (1, 2)),
    )
    return ModelSpec("ps", n_mels, n_classes, modules)


class TestSpecs:
    def test_pt_defaults(self):
        spec = pt_spec()
        spec.validate()
        assert [m.block.out_channels for m in spec.modules] == [16, 32, 64, 128]
        assert spec.tail.out_channels == 128
        assert all(m.pool == (2, 2) and m.dropout == 0.3 for m in spec.modules)
        assert spec.input_noise_std == 0.15
        assert spec.temporal_compression == 16
        assert spec.output_frames(500) == 31

    def test_ps_defaults(self):
        spec = ps_spec()
        spec.validate()
        assert [m.block.out_channels for m in spec.modules] == [64, 128, 128]
        assert [m.block.kernel[0] for m in spec.modules] == [3, 5, 5]
        assert all(m.pool == (1, 2) and m.dropout == 0.0 for m in spec.modules)
        assert spec.input_noise_std == 0.0
        assert spec.temporal_compression == 1
        assert spec.output_frames(500) == 500

    def test_width_scaling(self):
        assert [m.block.out_channels for m in pt_spec(width=0.5).modules] == [8, 16, 32, 64]
        assert pt_spec(width=0.5).tail.out_channels == 64
        assert [m.block.out_channels for m in ps_spec(width=0.125).modules] == [8, 16, 16]

    def test_frame_preserving_model_rejects_stochastic_layers(self):
        modules = (CnnModuleSpec(CnnBlockSpec(4, (3, 3)), (1, 2), dropout=0.2),)
        with pytest.raises(ConfigError):
            ModelSpec("ps", 64, 5, modules).validate()
        with pytest.raises(ConfigError):
            ModelSpec("ps", 64, 5, (CnnModuleSpec(CnnBlockSpec(4, (3, 3)), (1, 2)),),
                      input_noise_std=0.1).validate()

    def test_time_compressing_model_requires_pooling(self):
        modules = (CnnModuleSpec(CnnBlockSpec(4, (3, 3)), (1, 2)),)
        with pytest.raises(ConfigError):
            ModelSpec("pt", 64, 5, modules).validate()

    def test_even_kernel_is_rejected(self):
        with pytest.raises(ConfigError):
            CnnBlockSpec(4, (2, 3)).validate()

    def test_collapsing_frequency_axis_is_rejected(self):
        modules = tuple(CnnModuleSpec(CnnBlockSpec(4, (3, 3)), (1, 2)) for _ in range(3))
        with pytest.raises(ConfigError):
            ModelSpec("ps", 4, 5, modules).validate()


class TestReceptiveField:
    def test_frame_preserving_profile_spans_eleven_frames(self):
        assert temporal_receptive_field(ps_spec()) == 11

    def test_time_compressing_profile_value(self):
        # Jump recursion, worked by hand: conv3/pool2 four times then conv3
        # at jump 16 gives 1+2+1 +4+2 +8+4 +16+8 +32 = 78.
        assert temporal_receptive_field(pt_spec()) == 78

    def test_width_does_not_change_receptive_field(self):
        assert temporal_receptive_field(ps_spec(width=0.125)) == 11
        assert temporal_receptive_field(pt_spec(width=0.5)) == 78

    def test_empirical_influence_stays_inside_receptive_field(self):
        spec = ps_spec(n_mels=16, n_classes=2, width=0.0625)
        model = build_model(spec, seed=0).eval()
        half = (temporal_receptive_field(spec) - 1) // 2
        x = torch.randn(1, 48, 16, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            base = model(x).frame_probs
            bumped = x.clone()
            bumped[0, 24, :] += 5.0
            moved = model(bumped).frame_probs
        changed = torch.nonzero((base - moved).abs().sum(dim=2)[0] > 1e-7).flatten().tolist()
        assert changed, "the perturbation must reach the output"
        assert min(changed) >= 24 - half
        assert max(changed) <= 24 + half
        assert 24 in changed


class TestAttentionPooling:
    def test_matches_numpy_reference(self):
        rng = np.random.default_rng(0)
        frame = rng.normal(size=(4, 9, 5))
        attn = rng.normal(size=(4, 9, 5))
        got = attention_pooling(torch.from_numpy(frame), torch.from_numpy(attn)).numpy()
        weights = np.exp(attn - attn.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        expected = (weights * (1.0 / (1.0 + np.exp(-frame)))).sum(axis=1)
        np.testing.assert_allclose(got, expected, atol=1e-9)

    def test_output_is_convex_combination_of_frame_probs(self):
        gen = torch.Generator().manual_seed(2)
        frame = torch.randn(3, 7, 4, generator=gen)
        attn = torch.randn(3, 7, 4, generator=gen)
        clip = attention_pooling(frame, attn)
        probs = torch.sigmoid(frame)
        assert torch.all(clip >= probs.min(dim=1).values - 1e-7)
        assert torch.all(clip <= probs.max(dim=1).values + 1e-7)

    def test_uniform_attention_reduces_to_mean(self):
        gen = torch.Generator().manual_seed(3)
        frame = torch.randn(2, 6, 3, generator=gen)
        clip = attention_pooling(frame, torch.zeros_like(frame))
        torch.testing.assert_close(clip, torch.sigmoid(frame).mean(dim=1))

    def test_shape_mismatch_is_rejected(self):
        with pytest.raises(InputError):
            attention_pooling(torch.zeros(2, 5, 3), torch.zeros(2, 4, 3))


class TestStochasticOps:
    def test_noise_statistics(self):
        gen = torch.Generator().manual_seed(0)
        noisy = gaussian_input_noise(torch.zeros(400000), 0.15, gen)
        assert float(noisy.std()) == pytest.approx(0.15, rel=2e-2)
        assert float(noisy.mean()) == pytest.approx(0.0, abs=2e-3)

    def test_noise_is_generator_deterministic(self):
        x = torch.ones(64)
        a = gaussian_input_noise(x, 0.5, torch.Generator().manual_seed(9))
        b = gaussian_input_noise(x, 0.5, torch.Generator().manual_seed(9))
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_zero_std_is_identity(self):
        x = torch.randn(8, generator=torch.Generator().manual_seed(1))
        assert torch.equal(gaussian_input_noise(x, 0.0), x)

    def test_dropout_preserves_scale_and_quantizes(self):
        gen = torch.Generator().manual_seed(4)
        out = _generator_dropout(torch.ones(200000), 0.3, gen)
        assert float(out.mean()) == pytest.approx(1.0, abs=5e-3)
        uniques = np.unique(out.numpy())
        assert len(uniques) == 2
        assert uniques[0] == 0.0
        assert uniques[1] == pytest.approx(1 / 0.7, rel=1e-6)


class TestModelForward:
    def test_frame_preserving_shapes_and_range(self):
        spec = ps_spec(n_mels=16, n_classes=3, width=0.0625)
        model = build_model(spec, seed=0).eval()
        x = torch.randn(2, 40, 16, generator=torch.Generator().manual_seed(0))
        out = model(x)
        assert out.frame_probs.shape == (2, 40, 3)
        assert out.clip_probs.shape == (2, 3)
        for t in (out.frame_probs, out.clip_probs):
            assert torch.all((t >= 0) & (t <= 1))

    def test_time_compressing_output_grid(self):
        spec = pt_spec(n_classes=5, width=0.125)
        model = build_model(spec, seed=0).eval()
        x = torch.randn(1, 500, 64, generator=torch.Generator().manual_seed(0))
        out = model(x)
        assert out.frame_probs.shape == (1, 31, 5)
        assert out.clip_probs.shape == (1, 5)

    def test_too_short_input_is_rejected(self):
        model = build_model(pt_spec(width=0.125), seed=0)
        with pytest.raises(InputError):
            model(torch.zeros(1, 8, 64))

    def test_wrong_mel_count_is_rejected(self):
        model = build_model(tiny_ps(n_mels=16), seed=0)
        with pytest.raises(InputError):
            model(torch.zeros(1, 20, 32))

    def test_eval_is_deterministic_but_training_draws_noise(self):
        model = build_model(pt_spec(width=0.125), seed=0)
        x = torch.randn(1, 64, 64, generator=torch.Generator().manual_seed(5))
        model.eval()
        with torch.no_grad():
            a = model(x).clip_probs
            b = model(x).clip_probs
        assert torch.equal(a, b)
        model.train()
        with torch.no_grad():
            c = model(x).clip_probs
            d = model(x).clip_probs
        assert not torch.equal(c, d)

    def test_build_is_seed_deterministic(self):
        spec = tiny_ps()
        a = build_model(spec, seed=7).state_dict()
        b = build_model(spec, seed=7).state_dict()
        c = build_model(spec, seed=8).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
        assert any(not torch.equal(a[k], c[k]) for k in a if a[k].dtype.is_floating_point)

    def test_frame_outputs_shift_with_the_input(self):
        spec = tiny_ps(n_mels=16, n_classes=2)
        model = build_model(spec, seed=3).eval()
        gen = torch.Generator().manual_seed(6)
        x = torch.randn(1, 60, 16, generator=gen)
        shift = 7
        shifted = torch.zeros_like(x)
        shifted[:, shift:] = x[:, :-shift]
        with torch.no_grad():
            base = model(x).frame_probs
            moved = model(shifted).frame_probs
        margin = temporal_receptive_field(spec) // 2 + 1
        lo, hi = shift + margin, 60 - margin
        torch.testing.assert_close(moved[:, lo:hi], base[:, lo - shift : hi - shift], atol=1e-6, rtol=0)

    def test_gradients_match_central_differences(self):
        spec = tiny_ps(n_mels=8, n_classes=2)
        model = build_model(spec, seed=0).double().eval()
        x = torch.randn(2, 12, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))

        def objective():
            return model(x).clip_probs.sum()

        loss = objective()
        loss.backward()
        weight = model.blocks[0].conv.weight
        grad = weight.grad.clone()
        eps = 1e-6
        flat = weight.detach().view(-1)
        picks = np.random.default_rng(0).choice(flat.numel(), size=6, replace=False)
        for idx in picks:
            original = float(flat[idx])
            with torch.no_grad():
                flat[idx] = original + eps
                up = float(objective())
                flat[idx] = original - eps
                down = float(objective())
                flat[idx] = original
            fd = (up - down) / (2 * eps)
            assert fd == pytest.approx(float(grad.view(-1)[idx]), rel=1e-4, abs=1e-9)


class TestParamCount:
    @pytest.mark.parametrize(
        "spec", [pt_spec(), ps_spec(), pt_spec(width=0.5), ps_spec(width=0.125), tiny_ps()]
    )
    def test_analytic_count_matches_introspection(self, spec):
        model = build_model(spec, seed=0)
        total = sum(p.numel() for p in model.parameters() if p.requires_grad)
        assert count_params(spec) == total

    def test_tagger_is_smaller_than_detector_at_defaults(self):
        assert count_params(pt_spec()) < count_params(ps_spec())


class TestRestoreFrames:
    def test_expands_compressed_grid_with_tail_clamp(self):
        frames = np.arange(31 * 2, dtype=np.float32).reshape(31, 2)
        out = restore_frames(frames, 500, stride=16)
        assert out.shape == (500, 2)
        np.testing.assert_array_equal(out[0], frames[0])
        np.testing.assert_array_equal(out[15], frames[0])
        np.testing.assert_array_equal(out[16], frames[1])
        np.testing.assert_array_equal(out[495], frames[30])
        # 500 input frames pooled by 16 keep only 31*16=496; the tail clamps.
        np.testing.assert_array_equal(out[499], frames[30])

    def test_stride_one_is_identity(self):
        frames = np.random.default_rng(0).normal(size=(20, 3))
        np.testing.assert_array_equal(restore_frames(frames, 20, 1), frames)

    def test_batched_input(self):
        frames = np.arange(2 * 4 * 3, dtype=float).reshape(2, 4, 3)
        out = restore_frames(frames, 8, stride=2)
        assert out.shape == (2, 8, 3)
        np.testing.assert_array_equal(out[:, 1], frames[:, 0])

    def test_bad_arguments_are_rejected(self):
        with pytest.raises(InputError):
            restore_frames(np.zeros((4, 2)), 8, stride=0)
        with pytest.raises(InputError):
            restore_frames(np.zeros((0, 2)), 8, stride=2)


class TestCheckpoints:
    def test_round_trip_reproduces_outputs_exactly(self, tmp_path):
        spec = pt_spec(n_classes=4, width=0.125)
        model = build_model(spec, seed=1)
        x = torch.randn(2, 64, 64, generator=torch.Generator().manual_seed(0))
        model.train()
        with torch.no_grad():
            model(x)  # move batch-norm running stats off their defaults
        model.eval()
        with torch.no_grad():
            before = model(x)
        save_checkpoint(model, tmp_path / "ckpt")
        restored = load_checkpoint(tmp_path / "ckpt")
        assert restored.spec == spec
        with torch.no_grad():
            after = restored(x)
        assert torch.equal(before.clip_probs, after.clip_probs)
        assert torch.equal(before.frame_probs, after.frame_probs)

    def test_spec_mismatch_is_rejected(self, tmp_path):
        model = build_model(tiny_ps(), seed=0)
        save_checkpoint(model, tmp_path / "ckpt")
        with pytest.raises(ValidationError):
            load_checkpoint(tmp_path / "ckpt", spec=pt_spec())

    def test_truncated_weights_are_rejected(self, tmp_path):
        model = build_model(tiny_ps(), seed=0)
        save_checkpoint(model, tmp_path / "ckpt")
        blob = (tmp_path / "ckpt" / "weights.bin").read_bytes()
        (tmp_path / "ckpt" / "weights.bin").write_bytes(blob[:-8])
        with pytest.raises(ValidationError):
            load_checkpoint(tmp_path / "ckpt")

    def test_missing_checkpoint_is_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            load_checkpoint(tmp_path / "nope")
