"""Layer, optimizer, schedule, and checkpoint tests."""

import numpy as np
import pytest

from signgaze.autodiff import Tensor, backward, mul, tensor_sum, zero_grads
from signgaze.checkpoint import load_checkpoint, save_checkpoint
from signgaze.errors import ShapeMismatch, TruncatedData, UnsupportedFormat
from signgaze.gradcheck import check_gradients
from signgaze.nn import MLP, Conv, FeatureCNN, Linear, TransformerEncoder, parameter_count
from signgaze.optim import AdamState, adam_step, lr_schedule


class TestFeatureCNN:
    def test_zero_patch_zero_bias_zero_features(self):
        rng = np.random.default_rng(0)
        cnn = FeatureCNN(rng, in_channels=1, out_dim=16)
        for name, p in cnn.named_parameters():
            if name.endswith(".b"):
                p.value[:] = 0.0
        out = cnn(Tensor(np.zeros((3, 16, 16, 1))))
        np.testing.assert_array_equal(out.value, 0.0)

    def test_weight_sharing_across_patches(self):
        rng = np.random.default_rng(1)
        cnn = FeatureCNN(rng, in_channels=1, out_dim=16)
        patch = np.random.default_rng(2).random((1, 16, 16, 1))
        both = cnn(Tensor(np.concatenate([patch, patch], axis=0)))
        np.testing.assert_array_equal(both.value[0], both.value[1])

    @pytest.mark.parametrize("patch_size", [8, 16, 32])
    def test_output_dim_for_all_patch_sizes(self, patch_size):
        rng = np.random.default_rng(3)
        cnn = FeatureCNN(rng, in_channels=1, out_dim=32)
        out = cnn(Tensor(np.random.default_rng(4).random((2, patch_size, patch_size, 1))))
        assert out.value.shape == (2, 32)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        cnn = FeatureCNN(rng, in_channels=1, out_dim=8)
        params = dict(cnn.named_parameters())
        # nudge biases off zero so relu kinks stay away from the FD step
        for name, p in params.items():
            if name.endswith(".b"):
                p.value += rng.normal(scale=0.05, size=p.value.shape)
        patches = Tensor(rng.random((2, 8, 8, 1)))
        proj = Tensor(rng.normal(size=(2, 8)))

        def build():
            return tensor_sum(mul(cnn(patches), proj))

        result = check_gradients(build, params)
        assert result.ok, result.failures[:5]


class TestTransformer:
    def test_zeroed_weights_pass_input_plus_positions(self):
        rng = np.random.default_rng(0)
        enc = TransformerEncoder(rng, n_positions=5, dim=8, depth=2, heads=2, mlp_hidden=16)
        for name, p in enc.named_parameters():
            if name != "positions":
                p.value[:] = 0.0
        x = np.random.default_rng(1).normal(size=(3, 5, 8))
        out = enc(Tensor(x))
        np.testing.assert_allclose(out.value, x + enc.positions.value, atol=1e-15)

    def test_output_shape(self):
        rng = np.random.default_rng(2)
        enc = TransformerEncoder(rng, n_positions=7, dim=8, depth=1, heads=4, mlp_hidden=8)
        out = enc(Tensor(np.random.default_rng(3).normal(size=(2, 7, 8))))
        assert out.value.shape == (2, 7, 8)

    def test_permutation_equivariance_without_positions(self):
        rng = np.random.default_rng(4)
        enc = TransformerEncoder(rng, n_positions=6, dim=8, depth=2, heads=2, mlp_hidden=12)
        x = np.random.default_rng(5).normal(size=(1, 6, 8))
        perm = np.array([3, 1, 5, 0, 2, 4])
        straight = enc(Tensor(x), add_positions=False).value
        permuted = enc(Tensor(x[:, perm]), add_positions=False).value
        np.testing.assert_allclose(permuted, straight[:, perm], atol=1e-12)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ShapeMismatch):
            TransformerEncoder(np.random.default_rng(0), 4, dim=10, depth=1, heads=4, mlp_hidden=8)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        enc = TransformerEncoder(rng, n_positions=4, dim=8, depth=1, heads=2, mlp_hidden=8)
        params = dict(enc.named_parameters())
        x = Tensor(rng.normal(size=(2, 4, 8)))
        proj = Tensor(rng.normal(size=(2, 4, 8)))

        def build():
            return tensor_sum(mul(enc(x), proj))

        result = check_gradients(build, params, max_entries_per_tensor=6, rng=rng)
        assert result.ok, result.failures[:5]


class TestAdam:
    def test_first_step_closed_form(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(3, 2))
        p = Tensor(np.zeros((3, 2)), requires_grad=True)
        state = AdamState.for_params({"p": p}, lr=0.01)
        adam_step(state, {"p": p}, {"p": g})
        expected = -0.01 * g / (np.abs(g) + state.eps)
        np.testing.assert_allclose(p.value, expected, rtol=1e-12)

    def test_zero_grad_leaves_params(self):
        p = Tensor(np.full((4,), 1.5), requires_grad=True)
        state = AdamState.for_params({"p": p}, lr=0.1)
        for _ in range(10):
            adam_step(state, {"p": p}, {"p": np.zeros(4)})
        np.testing.assert_array_equal(p.value, 1.5)

    def test_optimizes_quadratic(self):
        x = Tensor(1.0, requires_grad=True)
        state = AdamState.for_params({"x": x}, lr=0.1)
        for _ in range(200):
            zero_grads([x])
            backward(mul(x, x))
            adam_step(state, {"x": x})
        assert abs(float(x.value)) < 0.05

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        state = AdamState.for_params({"p": p}, lr=0.1)
        with pytest.raises(ShapeMismatch):
            adam_step(state, {"p": p}, {"p": np.zeros(4)})


class TestLrSchedule:
    def test_values(self):
        assert lr_schedule(0, 1e-3) == 1e-3
        assert lr_schedule(4, 1e-3) == 1e-3
        assert lr_schedule(5, 1e-3) == pytest.approx(5e-4)
        assert lr_schedule(59, 1e-3) == pytest.approx(1e-3 * 0.5**11)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, 1e-3)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        tensors = {
            "a.w": rng.normal(size=(3, 4, 5)),
            "a.b": rng.normal(size=(7,)),
            "scalarish": rng.normal(size=(1,)),
        }
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tensors)
        loaded = load_checkpoint(path)
        assert list(loaded) == list(tensors)
        for name in tensors:
            assert loaded[name].tobytes() == tensors[name].tobytes()

    def test_double_roundtrip_identical_bytes(self, rng, tmp_path):
        tensors = {"x": rng.normal(size=(6, 6))}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, tensors)
        save_checkpoint(p2, load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(UnsupportedFormat):
            load_checkpoint(path)

    def test_truncated(self, rng, tmp_path):
        path = tmp_path / "t.ckpt"
        save_checkpoint(path, {"x": rng.normal(size=(10, 10))})
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(TruncatedData):
            load_checkpoint(path)


class TestParameterCount:
    def test_linear_count(self):
        layer = Linear(np.random.default_rng(0), 4, 3)
        assert parameter_count(layer.named_parameters()) == 4 * 3 + 3

    def test_mlp_and_conv_names_unique(self):
        rng = np.random.default_rng(0)
        mlp = MLP(rng, (4, 8, 2))
        conv = Conv(rng, 3, 2, 5)
        names = [n for n, _ in mlp.named_parameters()] + [n for n, _ in conv.named_parameters()]
        assert len(names) == len(set(names))
