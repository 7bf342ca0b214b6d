"""Synthetic dataset generator with exact ground truth.

Each scene is a noisy background with a few bright Gaussian blobs.  The
scan-path process is driven by patch brightness: the initial distribution
and every affinity row are proportional to patch mean intensity, and
per-region log durations are linear in it.  Expected log gaze and the true
visit weights come from the exact marginal recursion in gaze_core (Monte
Carlo only as a fallback for oversized configurations), so the dataset
carries per-image ground-truth weight maps that a trained model's inferred
patterns can be scored against.

Observed gaze seconds are exp(expected log gaze + Gaussian noise), i.e.
lognormal around the process mean.  Everything derives from one seeded
generator in a fixed order: a seed reproduces the dataset byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import ManifestRecord, save_manifest
from .errors import ExplosionGuard
from .gaze_core import (
    DurationModel,
    GazeField,
    TransitionKernel,
    WeightMap,
    _sample_path,
    expected_log_gaze_weighted,
    occupancy_weights,
)
from .imaging import Image, patchify, save_image

MC_FALLBACK_SAMPLES = 50_000


@dataclass(frozen=True)
class SyntheticSpec:
    """Everything that determines the dataset, bit for bit."""

    grid_rows: int = 8
    grid_cols: int = 8
    patch_size: int = 16
    n_train: int = 500
    n_test: int = 50
    blobs_min: int = 1
    blobs_max: int = 3
    blob_sigma_min: float = 8.0
    blob_sigma_max: float = 18.0
    blob_amplitude_min: float = 0.5
    blob_amplitude_max: float = 0.85
    background: float = 0.15
    background_noise: float = 0.05
    kernel_family: str = "saliency"
    mu_intercept: float = 0.05
    mu_slope: float = 1.5
    mu0_intercept: float = 0.5
    mu0_slope: float = 0.5
    n_fixations: int = 4
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kernel_family != "saliency":
            raise ValueError(f"unknown kernel family {self.kernel_family!r}")
        if not 0 <= self.blobs_min <= self.blobs_max:
            raise ValueError("blob count range is invalid")

    @property
    def image_height(self) -> int:
        return self.grid_rows * self.patch_size

    @property
    def image_width(self) -> int:
        return self.grid_cols * self.patch_size


def render_scene(spec: SyntheticSpec, rng: np.random.Generator) -> Image:
    """One procedural scene: noisy background plus random bright blobs."""
    h, w = spec.image_height, spec.image_width
    field = spec.background + spec.background_noise * rng.uniform(-1.0, 1.0, size=(h, w))
    n_blobs = int(rng.integers(spec.blobs_min, spec.blobs_max + 1))
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(n_blobs):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        sigma = rng.uniform(spec.blob_sigma_min, spec.blob_sigma_max)
        amp = rng.uniform(spec.blob_amplitude_min, spec.blob_amplitude_max)
        field += amp * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma**2))
    return Image.from_float(np.clip(field, 0.0, 1.0)[:, :, None])


def saliency_kernel(saliency: np.ndarray) -> TransitionKernel:
    """Affinities and initial distribution proportional to patch saliency."""
    n = saliency.shape[0]
    affinity = np.tile(saliency, (n, 1))
    return TransitionKernel(affinity, saliency / saliency.sum())


def true_gaze_quantities(
    spec: SyntheticSpec, img: Image
) -> tuple[WeightMap, float, np.ndarray]:
    """Ground truth (visit weights, expected log gaze, patch saliency) for
    one scene under the generating process."""
    grid = patchify(img, spec.patch_size)
    saliency = grid.patches.astype(np.float64).mean(axis=(1, 2, 3)) / 255.0
    gaze_field = GazeField(spec.grid_rows, spec.grid_cols, saliency[:, None])
    kernel = saliency_kernel(saliency)
    durations = DurationModel(
        mu0=lambda gist, ctx: spec.mu0_intercept + spec.mu0_slope * float(gist[0]),
        mu=lambda f: spec.mu_intercept + spec.mu_slope * float(f[0]),
        noise_sigma=spec.noise_sigma,
    )
    try:
        weights = occupancy_weights(gaze_field, kernel, spec.n_fixations)
    except ExplosionGuard:
        weights = _monte_carlo_weights(kernel, spec.n_fixations)
    global_mean = float(img.pixels.astype(np.float64).mean() / 255.0)
    gist_term = durations.mu0(np.array([global_mean]), None)
    expected = expected_log_gaze_weighted(gaze_field, durations, weights, gist_term)
    return weights, expected, saliency


def _monte_carlo_weights(kernel: TransitionKernel, n_fixations: int) -> WeightMap:
    """Sampled fallback for grids too large for the exact recursion.

    Visit-frequency standard error is at most 1/(2*sqrt(samples)) per
    region (binomial worst case), ~0.002 at the default sample count.
    """
    rng = np.random.default_rng(kernel.size * 1_000_003 + n_fixations)
    counts = np.zeros(kernel.size)
    for _ in range(MC_FALLBACK_SAMPLES):
        path = _sample_path(kernel, n_fixations, rng)
        counts[list(set(path.fixations))] += 1.0
    return WeightMap.from_weights(counts / MC_FALLBACK_SAMPLES)


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write images, ground-truth sidecars, and the manifest; returns the
    manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    records = []
    total = spec.n_train + spec.n_test
    for i in range(total):
        img = render_scene(spec, rng)
        name = f"img_{i:05d}"
        save_image(out / "images" / f"{name}.pgm", img)

        weights, expected_log, saliency = true_gaze_quantities(spec, img)
        observed_log = expected_log + rng.normal(0.0, spec.noise_sigma)
        truth = {
            "weights": weights.weights.tolist(),
            "pattern": weights.pattern.tolist(),
            "expected_log_gaze": expected_log,
            "saliency": saliency.tolist(),
        }
        (out / "truth" / f"{name}.json").write_text(json.dumps(truth, sort_keys=True))
        records.append(
            ManifestRecord(
                image_path=f"images/{name}.pgm",
                gaze_seconds=math.exp(observed_log),
                split_tag="train" if i < spec.n_train else "test",
                truth_path=f"truth/{name}.json",
            )
        )
    manifest = out / "manifest.jsonl"
    save_manifest(manifest, records)
    (out / "spec.json").write_text(json.dumps(asdict(spec), sort_keys=True, indent=2))
    return manifest


def load_truth(record: ManifestRecord) -> dict:
    if record.truth_path is None:
        raise FileNotFoundError(f"record {record.image_path} has no truth sidecar")
    return json.loads(Path(record.truth_path).read_text())
