"""Training harness: k-fold cross-validation, evaluation, pattern recovery,
and the patch-size sweep.

Fold training always runs in spawned worker processes (one per fold, up to
the SIGN_THREADS cap), each seeded from (seed, fold) and pinned to
single-threaded BLAS, so results are bit-identical regardless of how many
folds run concurrently.  Workers return parameter arrays; every file write
happens in the coordinating process.
"""

from __future__ import annotations

import hashlib
import json
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward
from .dataset import KFoldSplit, ManifestRecord, kfold_split, load_manifest
from .errors import ConstantTargets, ConstantVector, DimensionMismatch
from .imaging import load_image
from .model import SignConfig, SignParams, batch_loss, forward_batch, preprocess, save_model
from .nn import FlatParameters
from .optim import AdamState, adam_step, lr_schedule
from .synthetic import load_truth

DEFAULT_BATCH_SIZE = 16

# Full-scale results on AdGaze3500 for the same patch-size sweep, quoted
# for context only; not reproducible with this synthetic, toy-scale setup.
SWEEP_REFERENCE = {8: 0.137, 16: 0.134, 32: 0.135}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def pearson_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Plain Pearson r; raises ConstantVector when either input has zero
    variance (the statistic is undefined there)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"correlation inputs {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    na = float(np.sqrt(da @ da))
    nb = float(np.sqrt(db @ db))
    if na == 0.0 or nb == 0.0:
        raise ConstantVector("correlation undefined for a constant vector")
    return float(da @ db / (na * nb))


def recovery_score(predicted_pattern: np.ndarray, true_pattern: np.ndarray) -> float:
    """Pearson correlation between an inferred gaze pattern and the ground
    truth pattern of the generating process."""
    return pearson_correlation(predicted_pattern, true_pattern)


@dataclass
class EvalReport:
    """Ensemble metrics on a record set, with per-member breakdown."""

    mse: float
    pearson_r: float | None
    n_records: int
    per_fold: list[dict]
    baseline_mse: float | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "pearson_r": self.pearson_r,
            "n_records": self.n_records,
            "per_fold": self.per_fold,
            "baseline_mse": self.baseline_mse,
            "note": self.note,
        }


# ---------------------------------------------------------------------------
# preprocessing cache
# ---------------------------------------------------------------------------


def preprocess_records(
    records: list[ManifestRecord], config: SignConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Load and preprocess every record once.

    Returns stacked (patches, gists, context_gists, log_targets).
    """
    patches, gists, contexts, targets = [], [], [], []
    for record in records:
        img = load_image(record.image_path)
        ctx = load_image(record.context_path) if record.context_path else None
        p, g, c = preprocess(img, ctx, config)
        patches.append(p)
        gists.append(g)
        contexts.append(c)
        targets.append(math.log(record.gaze_seconds))
    return (
        np.stack(patches),
        np.stack(gists),
        np.stack(contexts),
        np.array(targets),
    )


def _batch_digest(digest: "hashlib._Hash", names: list[str]):
    digest.update(("|".join(names) + ";").encode())


# ---------------------------------------------------------------------------
# single-fold training (worker side)
# ---------------------------------------------------------------------------


def _train_fold(payload: dict) -> dict:
    """Train one fold; returns parameter arrays and diagnostics.

    Runs in a spawned worker with single-threaded BLAS so the result is
    independent of fold parallelism.
    """
    config: SignConfig = payload["config"]
    records: list[ManifestRecord] = payload["records"]
    train_idx = payload["train_idx"]
    val_idx = payload["val_idx"]
    fold = payload["fold"]
    seed = payload["seed"]
    epochs = payload["epochs"]
    lr0 = payload["lr0"]
    batch_size = payload["batch_size"]

    train_records = [records[i] for i in train_idx]
    patches, gists, contexts, targets = preprocess_records(train_records, config)

    init_rng = np.random.default_rng([seed, fold, 0])
    shuffle_rng = np.random.default_rng([seed, fold, 1])
    params = SignParams(config, init_rng)
    flat = FlatParameters(params.param_dict())
    flat_tensor = Tensor(flat.values, requires_grad=True)
    flat_tensor.grad = flat.grads
    state = AdamState.for_params({"flat": flat_tensor}, lr=lr0)

    n = len(train_records)
    names = [Path(r.image_path).name for r in train_records]
    digest = hashlib.sha256()
    used_paths: set[str] = set()
    epoch_losses = []
    for epoch in range(epochs):
        state.lr = lr_schedule(epoch, lr0)
        order = shuffle_rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            take = order[start : start + batch_size]
            flat.zero()
            loss, _ = batch_loss(
                params, patches[take], gists[take], contexts[take], targets[take], config.sparsity
            )
            value = float(loss.value)
            if not math.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss {value} at fold {fold}, epoch {epoch}, batch {batches}"
                )
            backward(loss)
            adam_step(state, {"flat": flat_tensor})
            total += value
            batches += 1
            batch_names = [names[i] for i in take]
            used_paths.update(batch_names)
            _batch_digest(digest, batch_names)
        epoch_losses.append(total / batches)

    val_records = [records[i] for i in val_idx]
    vp, vg, vc, vt = preprocess_records(val_records, config)
    val_pred = forward_batch(params, vp, vg, vc)["g"].value
    val_mse = float(np.mean((val_pred - vt) ** 2))

    return {
        "fold": fold,
        "tensors": {name: t.value.copy() for name, t in params.named_parameters()},
        "epoch_losses": epoch_losses,
        "val_mse": val_mse,
        "audit": {"paths": sorted(used_paths), "digest": digest.hexdigest()},
    }


def _params_from_tensors(config: SignConfig, tensors: dict[str, np.ndarray]) -> SignParams:
    params = SignParams(config, np.random.default_rng(0))
    for name, t in params.named_parameters():
        t.value = tensors[name]
    return params


def _fold_threads(k: int, requested: int | None) -> int:
    if requested is None:
        env = os.environ.get("SIGN_THREADS")
        requested = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(k, requested))


# ---------------------------------------------------------------------------
# training coordinator
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    ensemble: list[SignParams]
    report: dict
    checkpoint_paths: list[Path]
    audit: list[dict]
    split: KFoldSplit
    records: list[ManifestRecord]
    report_path: Path


def train(
    manifest: str | Path | list[ManifestRecord],
    config: SignConfig,
    out_dir: str | Path,
    epochs: int = 60,
    lr0: float = 1e-3,
    k: int = 10,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH_SIZE,
    threads: int | None = None,
    quiet: bool = True,
) -> TrainResult:
    """k-fold ensemble training with a held-out test evaluation.

    Writes fold checkpoints (with config sidecars) and report.json into
    ``out_dir``; the report carries per-fold losses, ensemble test metrics,
    and the predict-the-mean baseline.
    """
    records = manifest if isinstance(manifest, list) else load_manifest(manifest)
    split = kfold_split(records, k=k, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    payloads = [
        {
            "config": config,
            "records": records,
            "train_idx": split.folds[f][0],
            "val_idx": split.folds[f][1],
            "fold": f,
            "seed": seed,
            "epochs": epochs,
            "lr0": lr0,
            "batch_size": batch_size,
        }
        for f in range(k)
    ]

    workers = _fold_threads(k, threads)
    saved_env = {}
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS"):
        saved_env[var] = os.environ.get(var)
        os.environ[var] = "1"
    try:
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
            results = list(pool.map(_train_fold, payloads))
    finally:
        for var, old in saved_env.items():
            if old is None:
                os.environ.pop(var, None)
            else:
                os.environ[var] = old

    ensemble, checkpoint_paths, audit, per_fold = [], [], [], []
    for result in results:
        params = _params_from_tensors(config, result["tensors"])
        path = out / f"fold{result['fold']:02d}.ckpt"
        save_model(path, params)
        ensemble.append(params)
        checkpoint_paths.append(path)
        audit.append(result["audit"])
        per_fold.append(
            {
                "fold": result["fold"],
                "first_epoch_loss": result["epoch_losses"][0],
                "final_epoch_loss": result["epoch_losses"][-1],
                "val_mse": result["val_mse"],
            }
        )
        if not quiet:
            print(
                f"fold {result['fold']}: loss {result['epoch_losses'][0]:.4f} -> "
                f"{result['epoch_losses'][-1]:.4f}, val mse {result['val_mse']:.4f}"
            )

    pool_idx = sorted(set(range(len(records))) - set(split.test))
    baseline_log = float(
        np.mean([math.log(records[i].gaze_seconds) for i in pool_idx])
    )
    test_records = [records[i] for i in split.test]
    evaluation = evaluate(
        test_records, ensemble, config, baseline_log=baseline_log, allow_constant=True
    )

    report = {
        "config": {f: getattr(config, f) for f in config.__dataclass_fields__},
        "seed": seed,
        "epochs": epochs,
        "lr0": lr0,
        "k": k,
        "batch_size": batch_size,
        "n_records": len(records),
        "n_test": len(split.test),
        "param_count": ensemble[0].parameter_count(),
        "per_fold": per_fold,
        "test": evaluation.to_dict(),
        "audit_digest": hashlib.sha256(
            "".join(a["digest"] for a in audit).encode()
        ).hexdigest(),
    }
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return TrainResult(
        ensemble=ensemble,
        report=report,
        checkpoint_paths=checkpoint_paths,
        audit=audit,
        split=split,
        records=records,
        report_path=report_path,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def ensemble_log_predictions(
    records: list[ManifestRecord], ensemble: list[SignParams], config: SignConfig
) -> np.ndarray:
    """(members, records) matrix of predicted log gaze."""
    patches, gists, contexts, _ = preprocess_records(records, config)
    rows = []
    for params in ensemble:
        rows.append(forward_batch(params, patches, gists, contexts)["g"].value.copy())
    return np.stack(rows)


def evaluate(
    records: list[ManifestRecord],
    ensemble: list[SignParams],
    config: SignConfig,
    baseline_log: float | None = None,
    allow_constant: bool = False,
) -> EvalReport:
    """MSE on log gaze and Pearson r between ensemble predictions and truth.

    Raises ConstantTargets when every target is identical (r is undefined)
    unless ``allow_constant`` reports MSE only.
    """
    if not records:
        raise ValueError("evaluate needs at least one record")
    targets = np.array([math.log(r.gaze_seconds) for r in records])
    member_preds = ensemble_log_predictions(records, ensemble, config)
    prediction = member_preds.mean(axis=0)
    mse = float(np.mean((prediction - targets) ** 2))

    def corr_or_none(p):
        try:
            return pearson_correlation(p, targets)
        except ConstantVector:
            return None

    note = ""
    if np.all(targets == targets[0]):
        if not allow_constant:
            raise ConstantTargets("all targets identical; correlation undefined")
        r = None
        note = "constant targets: correlation undefined, MSE only"
    else:
        r = corr_or_none(prediction)
        if r is None:
            note = "constant predictions: correlation undefined"

    per_fold = []
    for i in range(member_preds.shape[0]):
        per_fold.append(
            {
                "fold": i,
                "mse": float(np.mean((member_preds[i] - targets) ** 2)),
                "pearson_r": corr_or_none(member_preds[i]),
            }
        )
    baseline = None
    if baseline_log is not None:
        baseline = float(np.mean((baseline_log - targets) ** 2))
    return EvalReport(
        mse=mse,
        pearson_r=r,
        n_records=len(records),
        per_fold=per_fold,
        baseline_mse=baseline,
        note=note,
    )


# ---------------------------------------------------------------------------
# pattern recovery
# ---------------------------------------------------------------------------


def ensemble_pattern(
    record: ManifestRecord, ensemble: list[SignParams], config: SignConfig
) -> np.ndarray:
    """Ensemble inferred gaze pattern: member weight maps averaged, then
    normalized to a probability vector."""
    img = load_image(record.image_path)
    ctx = load_image(record.context_path) if record.context_path else None
    p, g, c = preprocess(img, ctx, config)
    weights = np.zeros(config.num_patches)
    for params in ensemble:
        weights += forward_batch(params, p[None], g[None], c[None])["w"].value[0]
    weights /= len(ensemble)
    return weights / weights.sum()


def recovery_report(
    records: list[ManifestRecord], ensemble: list[SignParams], config: SignConfig
) -> dict:
    """Recovery scores of inferred patterns against ground truth sidecars."""
    scores = []
    for record in records:
        truth = load_truth(record)
        predicted = ensemble_pattern(record, ensemble, config)
        scores.append(recovery_score(predicted, np.array(truth["pattern"])))
    return {"mean": float(np.mean(scores)), "per_image": scores}


def label_shuffled_records(
    records: list[ManifestRecord], seed: int
) -> list[ManifestRecord]:
    """Control dataset: permute gaze times among the non-test records,
    destroying the image-gaze correspondence while keeping the marginal
    target distribution."""
    rng = np.random.default_rng(seed)
    pool = [i for i, r in enumerate(records) if r.split_tag != "test"]
    shuffled_targets = rng.permutation([records[i].gaze_seconds for i in pool])
    out = list(records)
    for i, target in zip(pool, shuffled_targets):
        out[i] = replace(records[i], gaze_seconds=float(target))
    return out


# ---------------------------------------------------------------------------
# patch-size sweep
# ---------------------------------------------------------------------------


def patch_sweep(
    manifest: str | Path | list[ManifestRecord],
    config: SignConfig,
    out_dir: str | Path,
    sizes: tuple[int, ...] = (8, 16, 32),
    **train_kwargs,
) -> list[dict]:
    """Train and evaluate once per patch size with a shared seed."""
    records = manifest if isinstance(manifest, list) else load_manifest(manifest)
    rows = []
    for size in sizes:
        cfg = replace(config, patch_size=size)
        result = train(records, cfg, Path(out_dir) / f"patch{size}", **train_kwargs)
        rows.append(
            {
                "patch_size": size,
                "test_mse": result.report["test"]["mse"],
                "test_pearson_r": result.report["test"]["pearson_r"],
            }
        )
    return rows


def format_sweep_table(rows: list[dict]) -> str:
    lines = ["patch_size  test_mse    test_pearson_r"]
    for row in rows:
        r = row["test_pearson_r"]
        r_text = f"{r:.4f}" if r is not None else "n/a"
        lines.append(f"{row['patch_size']:>10d}  {row['test_mse']:<10.4f}  {r_text}")
    lines.append("")
    lines.append(
        "Reference, full-scale AdGaze3500 sweep (context only, not reproducible here): "
        + ", ".join(f"{p}px {v}" for p, v in SWEEP_REFERENCE.items())
    )
    return "\n".join(lines)
