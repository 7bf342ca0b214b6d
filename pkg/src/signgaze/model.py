"""The gaze-time network: gist branch, local branch, weight head.

Wiring, per forward pass on one image (batching is the same with a leading
axis):

    gist image  -> FeatureCNN -> S0 --+
    context     -> FeatureCNN -> Sc --+-> concat -> MLP -> mu0 (scalar)
    patches -> FeatureCNN -> S_j --+-> MLP -> mu_j            (per region)
                                   +-> Transformer -> MLP -> sigmoid -> w_j
    predicted log gaze  g = mu0 + sum_j mu_j * w_j

The same FeatureCNN instance embeds the image gist and the context gist;
a separate instance embeds raw patches.  When the context is disabled or
absent its feature slot is zero-filled, keeping one parameterization for
both regimes.  Weights w_j live strictly inside (0, 1) by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigMismatch, DimensionMismatch, EmptyBatch, EmptyEnsemble
from .gaze_core import WeightMap
from .imaging import Image, make_gist_input, patchify, resize
from .nn import MLP, FeatureCNN, TransformerEncoder, parameter_count


@dataclass(frozen=True)
class SignConfig:
    """Hyperparameters that fix the network's shape and preprocessing."""

    patch_size: int = 16
    feature_dim: int = 32
    input_height: int = 128
    input_width: int = 128
    channels: int = 1
    gist_size: int = 32
    gist_sigma: float = 8.0
    depth: int = 2
    heads: int = 4
    mlp_hidden: int = 64
    sparsity: float = 0.0
    context_enabled: bool = False

    def __post_init__(self):
        if self.patch_size not in (8, 16, 32):
            raise ValueError(f"patch_size must be 8, 16 or 32, got {self.patch_size}")
        if self.sparsity < 0:
            raise ValueError("sparsity coefficient must be >= 0")
        if self.input_height % self.patch_size or self.input_width % self.patch_size:
            raise ValueError(
                f"input {self.input_height}x{self.input_width} not divisible "
                f"by patch size {self.patch_size}"
            )
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")

    @property
    def grid_rows(self) -> int:
        return self.input_height // self.patch_size

    @property
    def grid_cols(self) -> int:
        return self.input_width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass(frozen=True)
class SignOutput:
    """One forward pass, decomposed."""

    predicted_log_gaze: float
    gist_term: float
    local_term: float
    weights: np.ndarray
    pattern: np.ndarray


class SignParams:
    """All trainable tensors for one model instance.

    Construction order is fixed, so a seeded Generator reproduces the
    initialization bit for bit.
    """

    def __init__(self, config: SignConfig, rng: np.random.Generator):
        self.config = config
        k = config.feature_dim
        self.local_cnn = FeatureCNN(rng, config.channels, k)
        self.gist_cnn = FeatureCNN(rng, config.channels, k)
        self.mu0_mlp = MLP(rng, (2 * k, config.mlp_hidden, 1))
        self.mu_mlp = MLP(rng, (k, config.mlp_hidden, 1))
        self.encoder = TransformerEncoder(
            rng, config.num_patches, k, config.depth, config.heads, config.mlp_hidden
        )
        self.weight_mlp = MLP(rng, (k, config.mlp_hidden, 1))

    def named_parameters(self):
        yield from self.local_cnn.named_parameters("local_cnn.")
        yield from self.gist_cnn.named_parameters("gist_cnn.")
        yield from self.mu0_mlp.named_parameters("mu0.")
        yield from self.mu_mlp.named_parameters("mu.")
        yield from self.encoder.named_parameters("encoder.")
        yield from self.weight_mlp.named_parameters("weight_head.")

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def parameter_count(self) -> int:
        return parameter_count(self.named_parameters())

    def branch_names(self) -> dict[str, list[str]]:
        """Parameter names grouped by architectural branch."""
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".", 1)[0], []).append(name)
        return groups


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def _match_channels(img: Image, channels: int) -> Image:
    if img.channels == channels:
        return img
    if channels == 1:
        return Image.from_float(img.to_float().mean(axis=2, keepdims=True))
    return Image(np.repeat(img.pixels, 3, axis=2))


def preprocess(
    img: Image, context: Image | None, config: SignConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Image (+ optional context) -> float inputs for the network.

    Returns (patches (N, P, P, C), gist (G, G, C), context_gist (G, G, C)),
    all unit-interval float64.  The context gist is zero-filled when the
    context is absent or disabled in the config.
    """
    img = _match_channels(img, config.channels)
    if (img.height, img.width) != (config.input_height, config.input_width):
        img = resize(img, config.input_height, config.input_width)
    grid = patchify(img, config.patch_size)
    patches = grid.patches.astype(np.float64) / 255.0

    gist_img, _ = make_gist_input(img, None, config.gist_size, config.gist_sigma)
    gist = gist_img.to_float()

    ctx_gist = np.zeros_like(gist)
    if config.context_enabled and context is not None:
        context = _match_channels(context, config.channels)
        if (context.height, context.width) != (config.input_height, config.input_width):
            context = resize(context, config.input_height, config.input_width)
        ctx_img, _ = make_gist_input(context, None, config.gist_size, config.gist_sigma)
        ctx_gist = ctx_img.to_float()
    return patches, gist, ctx_gist


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def forward_batch(
    params: SignParams,
    patches: np.ndarray,
    gists: np.ndarray,
    context_gists: np.ndarray,
) -> dict[str, Tensor]:
    """Batched forward pass on preprocessed arrays.

    ``patches`` is (B, N, P, P, C); ``gists`` and ``context_gists`` are
    (B, G, G, C).  Returns graph tensors: ``g`` (B,), ``mu0`` (B,),
    ``mu`` (B, N), ``w`` (B, N), ``local`` (B,).
    """
    cfg = params.config
    batch, n = patches.shape[0], patches.shape[1]
    if n != cfg.num_patches:
        raise ConfigMismatch(f"{n} patches per image, config expects {cfg.num_patches}")

    flat = Tensor(patches.reshape(batch * n, *patches.shape[2:]))
    feats = params.local_cnn(flat)  # (B*N, K)

    mu = ad.reshape(params.mu_mlp(feats), (batch, n))

    tokens = ad.reshape(feats, (batch, n, cfg.feature_dim))
    encoded = params.encoder(tokens)
    logits = ad.reshape(
        params.weight_mlp(ad.reshape(encoded, (batch * n, cfg.feature_dim))), (batch, n)
    )
    w = ad.sigmoid(logits)

    s0 = params.gist_cnn(Tensor(gists))
    if cfg.context_enabled:
        sc = params.gist_cnn(Tensor(context_gists))
    else:
        sc = Tensor(np.zeros((batch, cfg.feature_dim)))
    mu0 = ad.reshape(params.mu0_mlp(ad.concat([s0, sc], axis=1)), (batch,))

    local = ad.tensor_sum(ad.mul(mu, w), axis=1)
    g = ad.add(mu0, local)
    return {"g": g, "mu0": mu0, "mu": mu, "w": w, "local": local}


def batch_loss(
    params: SignParams,
    patches: np.ndarray,
    gists: np.ndarray,
    context_gists: np.ndarray,
    targets: np.ndarray,
    sparsity: float,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Training objective: mean squared error on log gaze plus the L1
    weight penalty (sigmoid weights are positive, so |w| is just w)."""
    out = forward_batch(params, patches, gists, context_gists)
    diff = ad.sub(out["g"], Tensor(np.asarray(targets, dtype=np.float64)))
    loss = ad.mean(ad.mul(diff, diff))
    if sparsity > 0:
        loss = ad.add(loss, ad.mul(ad.mean(out["w"]), Tensor(float(sparsity))))
    return loss, out


def sign_forward(
    img: Image, context: Image | None, config: SignConfig, params: SignParams
) -> SignOutput:
    """Full pipeline on one image: preprocess, run the network, decompose."""
    if params.config != config:
        raise ConfigMismatch(
            f"params built for {params.config}, forward requested with {config}"
        )
    patches, gist, ctx = preprocess(img, context, config)
    out = forward_batch(params, patches[None], gist[None], ctx[None])
    gist_term = float(out["mu0"].value[0])
    local_term = float(out["local"].value[0])
    weights = out["w"].value[0].copy()
    return SignOutput(
        predicted_log_gaze=gist_term + local_term,
        gist_term=gist_term,
        local_term=local_term,
        weights=weights,
        pattern=WeightMap.from_weights(weights).pattern,
    )


def sign_loss(outputs: list[SignOutput], targets, sparsity: float) -> float:
    """Scalar loss over already-computed outputs (no graph)."""
    targets = np.asarray(targets, dtype=np.float64)
    if len(outputs) == 0:
        raise EmptyBatch("loss over an empty batch")
    if len(outputs) != targets.shape[0]:
        raise DimensionMismatch(f"{len(outputs)} outputs vs {targets.shape[0]} targets")
    preds = np.array([o.predicted_log_gaze for o in outputs])
    mse = float(np.mean((preds - targets) ** 2))
    if sparsity > 0:
        mse += sparsity * float(np.mean([np.abs(o.weights).mean() for o in outputs]))
    return mse


def extract_pattern(output: SignOutput) -> WeightMap:
    """Normalized gaze pattern from one forward pass."""
    return WeightMap.from_weights(output.weights)


def predict_gaze_seconds(
    img: Image,
    context: Image | None,
    config: SignConfig,
    ensemble: list[SignParams],
) -> float:
    """Ensemble prediction in seconds.

    Members' predicted log gazes are averaged in log space, then
    exponentiated, i.e. the geometric mean of per-member second-scale
    predictions.
    """
    if not ensemble:
        raise EmptyEnsemble("prediction requires at least one model")
    logs = [sign_forward(img, context, config, p).predicted_log_gaze for p in ensemble]
    return float(np.exp(np.mean(logs)))


# ---------------------------------------------------------------------------
# persistence (binary checkpoint + plain-text config sidecar)
# ---------------------------------------------------------------------------


def config_to_text(config: SignConfig) -> str:
    lines = [f"{f.name}={getattr(config, f.name)}" for f in fields(SignConfig)]
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> SignConfig:
    values: dict[str, object] = {}
    types = {f.name: f.type for f in fields(SignConfig)}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in types:
            raise ConfigMismatch(f"unknown config key {key!r}")
        kind = types[key]
        if kind in ("int", int):
            values[key] = int(value)
        elif kind in ("float", float):
            values[key] = float(value)
        elif kind in ("bool", bool):
            values[key] = value in ("True", "true", "1")
        else:
            values[key] = value
    return SignConfig(**values)


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".cfg")


def save_model(path: str | Path, params: SignParams) -> None:
    save_checkpoint(path, {name: t.value for name, t in params.named_parameters()})
    sidecar_path(path).write_text(config_to_text(params.config))


def load_model(path: str | Path, expected: SignConfig | None = None) -> SignParams:
    """Load a checkpoint; verifies the sidecar config against ``expected``."""
    config = config_from_text(sidecar_path(path).read_text())
    if expected is not None and config != expected:
        raise ConfigMismatch(f"checkpoint config {config} != requested {expected}")
    params = SignParams(config, np.random.default_rng(0))
    tensors = load_checkpoint(path)
    for name, t in params.named_parameters():
        if name not in tensors:
            raise ConfigMismatch(f"checkpoint missing tensor {name}")
        if tensors[name].shape != t.value.shape:
            raise ConfigMismatch(
                f"{name}: checkpoint shape {tensors[name].shape} vs model {t.value.shape}"
            )
        t.value = tensors[name]
    return params
