"""Layers for the gaze network: conv stacks, MLPs, transformer encoder.

Parameters are plain autodiff Tensors created from a shared numpy
Generator in construction order, so a seed fixes the full initialization.
Weights and biases use scaled-uniform fan-in init (nonzero biases keep
narrow relu stacks from dying at init); layer-norm gains start at one.
Every container exposes ``named_parameters()`` with dot-separated
hierarchical names; those names are the checkpoint keys.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    conv2d,
    layer_norm,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
)
from .errors import ShapeMismatch


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int):
        self.w = Tensor(_uniform(rng, in_dim, (in_dim, out_dim)), requires_grad=True)
        self.b = Tensor(_uniform(rng, in_dim, (out_dim,)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}w", self.w
        yield f"{prefix}b", self.b


class Conv:
    """Square-kernel same-padding convolution with bias."""

    def __init__(self, rng, kernel: int, c_in: int, c_out: int, stride: int = 1):
        self.kernel = kernel
        self.stride = stride
        fan_in = c_in * kernel * kernel
        self.w = Tensor(
            _uniform(rng, fan_in, (kernel, kernel, c_in, c_out)), requires_grad=True
        )
        self.b = Tensor(_uniform(rng, fan_in, (c_out,)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(conv2d(x, self.w, stride=self.stride, padding=self.kernel // 2), self.b)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}w", self.w
        yield f"{prefix}b", self.b


class MLP:
    """Linear stack with relu between layers."""

    def __init__(self, rng, dims: tuple[int, ...]):
        self.layers = [Linear(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = relu(x)
        return x

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}fc{i}.")


class FeatureCNN:
    """The 5-layer patch feature extractor: one 5x5 conv, four 3x3 convs,
    relu between, global average pool to ``out_dim``.

    Shared by the local branch (raw patches) and the gist branch (blurred
    downscaled images); weight sharing across an image's patches comes for
    free because every patch goes through the same instance.  The stride
    plan (2, 2, 2, 1, 1) keeps at least one spatial cell for inputs of
    8 to 32 pixels.
    """

    STRIDES = (2, 2, 2, 1, 1)

    def __init__(self, rng, in_channels: int, out_dim: int):
        widths = (
            max(out_dim // 8, 2),
            max(out_dim // 4, 2),
            max(out_dim // 4, 2),
            max(out_dim // 2, 2),
            out_dim,
        )
        kernels = (5, 3, 3, 3, 3)
        self.convs = []
        c = in_channels
        for kernel, width, stride in zip(kernels, widths, self.STRIDES):
            self.convs.append(Conv(rng, kernel, c, width, stride))
            c = width
        self.out_dim = out_dim

    def __call__(self, patches: Tensor) -> Tensor:
        """(M, P, P, C) image stack -> (M, out_dim) feature matrix."""
        h = patches
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i + 1 < len(self.convs):
                h = relu(h)
        return mean(h, axis=(1, 2))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, conv in enumerate(self.convs):
            yield from conv.named_parameters(f"{prefix}conv{i}.")


class _EncoderLayer:
    def __init__(self, rng, dim: int, heads: int, mlp_hidden: int):
        if dim % heads:
            raise ShapeMismatch(f"feature dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.ln1_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(dim), requires_grad=True)
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.ln2_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(dim), requires_grad=True)
        self.mlp = MLP(rng, (dim, mlp_hidden, dim))

    def _heads(self, x: Tensor, batch: int, n: int) -> Tensor:
        dh = self.dim // self.heads
        return transpose(reshape(x, (batch, n, self.heads, dh)), (0, 2, 1, 3))

    def __call__(self, h: Tensor) -> Tensor:
        batch, n, dim = h.shape
        dh = dim // self.heads

        u = add(mul(layer_norm(h), self.ln1_g), self.ln1_b)
        flat = reshape(u, (batch * n, dim))
        q = self._heads(self.wq(flat), batch, n)
        k = self._heads(self.wk(flat), batch, n)
        v = self._heads(self.wv(flat), batch, n)
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), Tensor(dh**-0.5))
        attended = matmul(softmax(scores, axis=-1), v)
        merged = reshape(transpose(attended, (0, 2, 1, 3)), (batch * n, dim))
        h = add(h, reshape(self.wo(merged), (batch, n, dim)))

        u2 = add(mul(layer_norm(h), self.ln2_g), self.ln2_b)
        m = self.mlp(reshape(u2, (batch * n, dim)))
        return add(h, reshape(m, (batch, n, dim)))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}ln1.g", self.ln1_g
        yield f"{prefix}ln1.b", self.ln1_b
        yield from self.wq.named_parameters(f"{prefix}attn.q.")
        yield from self.wk.named_parameters(f"{prefix}attn.k.")
        yield from self.wv.named_parameters(f"{prefix}attn.v.")
        yield from self.wo.named_parameters(f"{prefix}attn.o.")
        yield f"{prefix}ln2.g", self.ln2_g
        yield f"{prefix}ln2.b", self.ln2_b
        yield from self.mlp.named_parameters(f"{prefix}mlp.")


class TransformerEncoder:
    """Pre-norm multi-head self-attention encoder with residuals and a
    learned positional table added to the inputs."""

    def __init__(self, rng, n_positions: int, dim: int, depth: int, heads: int, mlp_hidden: int):
        self.positions = Tensor(_uniform(rng, dim, (n_positions, dim)), requires_grad=True)
        self.layers = [_EncoderLayer(rng, dim, heads, mlp_hidden) for _ in range(depth)]

    def __call__(self, x: Tensor, add_positions: bool = True) -> Tensor:
        """(B, N, dim) -> (B, N, dim).  With ``add_positions`` off the
        encoder is permutation-equivariant over the N axis."""
        if x.shape[1] != self.positions.shape[0] and add_positions:
            raise ShapeMismatch(
                f"{x.shape[1]} tokens vs positional table {self.positions.shape}"
            )
        h = add(x, self.positions) if add_positions else x
        for layer in self.layers:
            h = layer(h)
        return h

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}positions", self.positions
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}layer{i}.")


def parameter_count(named_params) -> int:
    return sum(int(np.prod(t.value.shape)) for _, t in named_params)


class FlatParameters:
    """Repack parameter tensors as views into one flat value buffer and one
    flat gradient buffer.

    The optimizer then updates a single contiguous vector instead of ~100
    small tensors, and zeroing gradients is one fill.  The tensors keep
    working in graphs as before: backward accumulates into the grad views.
    Do not call ``zero_grads`` on repacked tensors (it would detach the
    views); use ``zero`` here instead.
    """

    def __init__(self, params: dict[str, Tensor]):
        self.names = list(params)
        sizes = [params[n].value.size for n in self.names]
        total = int(np.sum(sizes))
        self.values = np.empty(total)
        self.grads = np.zeros(total)
        offset = 0
        for name, size in zip(self.names, sizes):
            t = params[name]
            shape = t.value.shape
            self.values[offset : offset + size] = t.value.reshape(-1)
            t.value = self.values[offset : offset + size].reshape(shape)
            t.grad = self.grads[offset : offset + size].reshape(shape)
            offset += size

    def zero(self):
        self.grads.fill(0.0)
