"""Tests for the assembled gaze network."""

import math

import numpy as np
import pytest

from signgaze.autodiff import backward
from signgaze.errors import ConfigMismatch, DimensionMismatch, EmptyBatch, EmptyEnsemble
from signgaze.imaging import Image
from signgaze.model import (
    SignConfig,
    SignParams,
    batch_loss,
    config_from_text,
    config_to_text,
    extract_pattern,
    forward_batch,
    load_model,
    predict_gaze_seconds,
    preprocess,
    save_model,
    sign_forward,
    sign_loss,
)
from signgaze.nn import FlatParameters


def small_config(**overrides):
    base = dict(
        patch_size=8,
        feature_dim=8,
        input_height=32,
        input_width=32,
        gist_size=8,
        gist_sigma=2.0,
        depth=1,
        heads=2,
        mlp_hidden=8,
    )
    base.update(overrides)
    return SignConfig(**base)


def random_image(rng, h=32, w=32):
    return Image(rng.integers(0, 256, size=(h, w, 1), dtype=np.uint8))


def zero_final_layer(mlp):
    mlp.layers[-1].w.value[:] = 0.0
    mlp.layers[-1].b.value[:] = 0.0


class TestConfig:
    def test_rejects_bad_patch_size(self):
        with pytest.raises(ValueError):
            small_config(patch_size=10)

    def test_rejects_indivisible_input(self):
        with pytest.raises(ValueError):
            small_config(input_height=36)

    def test_rejects_negative_sparsity(self):
        with pytest.raises(ValueError):
            small_config(sparsity=-0.1)

    def test_grid_shape(self):
        cfg = small_config()
        assert (cfg.grid_rows, cfg.grid_cols, cfg.num_patches) == (4, 4, 16)

    def test_text_roundtrip(self):
        cfg = small_config(sparsity=1e-3, context_enabled=True)
        assert config_from_text(config_to_text(cfg)) == cfg


class TestForward:
    def test_output_decomposition_is_exact(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        out = sign_forward(random_image(rng), None, cfg, params)
        assert out.predicted_log_gaze == out.gist_term + out.local_term
        assert out.weights.shape == (16,)
        assert np.all(out.weights > 0) and np.all(out.weights < 1)
        assert abs(out.pattern.sum() - 1.0) < 1e-12

    def test_zeroed_weight_head_gives_half(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        zero_final_layer(params.weight_mlp)
        out = sign_forward(random_image(rng), None, cfg, params)
        np.testing.assert_allclose(out.weights, 0.5, atol=1e-15)
        # local term is then half the sum of the per-region durations
        patches, gist, ctx = preprocess(random_image(rng), None, cfg)

    def test_zeroed_mu_head_leaves_only_gist(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        zero_final_layer(params.mu_mlp)
        out = sign_forward(random_image(rng), None, cfg, params)
        assert out.local_term == 0.0
        assert out.predicted_log_gaze == out.gist_term

    def test_context_changes_gist_only(self, rng):
        img = random_image(rng)
        ctx_img = random_image(rng)
        cfg_off = small_config(context_enabled=False)
        cfg_on = small_config(context_enabled=True)
        params_off = SignParams(cfg_off, np.random.default_rng(7))
        params_on = SignParams(cfg_on, np.random.default_rng(7))
        out_off = sign_forward(img, ctx_img, cfg_off, params_off)
        out_on = sign_forward(img, ctx_img, cfg_on, params_on)
        np.testing.assert_array_equal(out_off.weights, out_on.weights)
        assert out_off.local_term == out_on.local_term
        assert out_off.gist_term != out_on.gist_term

    def test_config_mismatch_rejected(self, rng):
        cfg = small_config()
        params = SignParams(small_config(feature_dim=16), rng)
        with pytest.raises(ConfigMismatch):
            sign_forward(random_image(rng), None, cfg, params)

    @pytest.mark.parametrize("patch_size", [8, 16, 32])
    def test_patch_count_consistency(self, patch_size):
        rng = np.random.default_rng(patch_size)
        cfg = SignConfig(
            patch_size=patch_size,
            feature_dim=8,
            input_height=64,
            input_width=64,
            gist_size=8,
            depth=1,
            heads=2,
            mlp_hidden=8,
        )
        params = SignParams(cfg, rng)
        out = sign_forward(random_image(rng, 64, 64), None, cfg, params)
        assert out.weights.shape == (cfg.num_patches,)
        assert out.pattern.shape == (cfg.num_patches,)

    def test_resizes_foreign_dims(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        out = sign_forward(random_image(rng, 50, 70), None, cfg, params)
        assert math.isfinite(out.predicted_log_gaze)

    def test_gradient_reaches_every_branch(self, rng):
        cfg = small_config(context_enabled=True)
        params = SignParams(cfg, rng)
        flat = FlatParameters(params.param_dict())
        patches = rng.random((4, 16, 8, 8, 1))
        gists = rng.random((4, 8, 8, 1))
        ctx = rng.random((4, 8, 8, 1))
        targets = rng.normal(size=4)
        loss, _ = batch_loss(params, patches, gists, ctx, targets, 0.0)
        backward(loss)
        for branch, names in params.branch_names().items():
            by_name = dict(params.named_parameters())
            assert any(
                np.any(by_name[n].grad != 0) for n in names
            ), f"branch {branch} received no gradient"
            assert all(np.all(np.isfinite(by_name[n].grad)) for n in names)


class TestLoss:
    def test_perfect_predictions_zero_loss(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        outs = [sign_forward(random_image(rng), None, cfg, params) for _ in range(3)]
        targets = [o.predicted_log_gaze for o in outs]
        assert sign_loss(outs, targets, 0.0) == 0.0

    def test_single_sample_squared_error(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        out = sign_forward(random_image(rng), None, cfg, params)
        assert sign_loss([out], [out.predicted_log_gaze - 2.0], 0.0) == pytest.approx(4.0)

    def test_sparsity_term_monotone(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        out = sign_forward(random_image(rng), None, cfg, params)
        t = [out.predicted_log_gaze]
        assert sign_loss([out], t, 1e-2) > sign_loss([out], t, 1e-3) > sign_loss([out], t, 0.0)

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            sign_loss([], [], 0.0)

    def test_length_mismatch(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        out = sign_forward(random_image(rng), None, cfg, params)
        with pytest.raises(DimensionMismatch):
            sign_loss([out], [1.0, 2.0], 0.0)

    def test_graph_loss_matches_float_loss(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        images = [random_image(rng) for _ in range(3)]
        pre = [preprocess(im, None, cfg) for im in images]
        patches = np.stack([p[0] for p in pre])
        gists = np.stack([p[1] for p in pre])
        ctx = np.stack([p[2] for p in pre])
        targets = rng.normal(size=3)
        loss, _ = batch_loss(params, patches, gists, ctx, targets, 0.0)
        outs = [sign_forward(im, None, cfg, params) for im in images]
        assert float(loss.value) == pytest.approx(sign_loss(outs, targets, 0.0), rel=1e-12)


class TestPatternAndEnsemble:
    def test_uniform_weights_uniform_pattern(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        zero_final_layer(params.weight_mlp)
        out = sign_forward(random_image(rng), None, cfg, params)
        np.testing.assert_allclose(extract_pattern(out).pattern, 1 / 16, atol=1e-15)

    def test_pattern_preserves_order_and_scale_invariance(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        out = sign_forward(random_image(rng), None, cfg, params)
        pattern = extract_pattern(out).pattern
        assert np.array_equal(np.argsort(pattern), np.argsort(out.weights))
        scaled = pattern / pattern.sum() * 3.0
        np.testing.assert_allclose(scaled / scaled.sum(), pattern, atol=1e-15)

    def test_single_member_ensemble(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        img = random_image(rng)
        out = sign_forward(img, None, cfg, params)
        assert predict_gaze_seconds(img, None, cfg, [params]) == pytest.approx(
            math.exp(out.predicted_log_gaze)
        )

    def test_two_identical_members(self, rng):
        cfg = small_config()
        params = SignParams(cfg, rng)
        img = random_image(rng)
        single = predict_gaze_seconds(img, None, cfg, [params])
        double = predict_gaze_seconds(img, None, cfg, [params, params])
        assert double == pytest.approx(single)

    def test_log_space_averaging(self):
        # members predicting 0 and ln 4 average to ln 2 -> 2 seconds
        logs = [0.0, math.log(4.0)]
        assert math.exp(np.mean(logs)) == pytest.approx(2.0)

    def test_empty_ensemble(self, rng):
        cfg = small_config()
        with pytest.raises(EmptyEnsemble):
            predict_gaze_seconds(random_image(rng), None, cfg, [])


class TestPersistence:
    def test_save_load_roundtrip(self, rng, tmp_path):
        cfg = small_config()
        params = SignParams(cfg, rng)
        path = tmp_path / "m.ckpt"
        save_model(path, params)
        loaded = load_model(path, expected=cfg)
        for (n1, t1), (n2, t2) in zip(params.named_parameters(), loaded.named_parameters()):
            assert n1 == n2
            assert t1.value.tobytes() == t2.value.tobytes()

    def test_load_checks_config(self, rng, tmp_path):
        cfg = small_config()
        params = SignParams(cfg, rng)
        path = tmp_path / "m.ckpt"
        save_model(path, params)
        with pytest.raises(ConfigMismatch):
            load_model(path, expected=small_config(feature_dim=16))

    def test_loaded_model_predicts_identically(self, rng, tmp_path):
        cfg = small_config()
        params = SignParams(cfg, rng)
        img = random_image(rng)
        before = sign_forward(img, None, cfg, params)
        path = tmp_path / "m.ckpt"
        save_model(path, params)
        after = sign_forward(img, None, cfg, load_model(path))
        assert before.predicted_log_gaze == after.predicted_log_gaze
        np.testing.assert_array_equal(before.weights, after.weights)
