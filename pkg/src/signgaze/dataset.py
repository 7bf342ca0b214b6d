"""JSON Lines dataset manifests and cross-validation splits."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import TooFewRecords


@dataclass(frozen=True)
class ManifestRecord:
    """One supervised example: an image and its aggregate gaze time.

    ``gaze_seconds`` must be positive (training targets are its log).
    ``split_tag`` is "train"/"test" when the dataset fixes its own split;
    untagged manifests get split by ``kfold_split``.  ``truth_path``
    optionally points at a ground-truth sidecar (synthetic data only).
    """

    image_path: str
    gaze_seconds: float
    context_path: str | None = None
    split_tag: str | None = None
    truth_path: str | None = None

    def __post_init__(self):
        if not self.gaze_seconds > 0:
            raise ValueError(f"gaze_seconds must be > 0, got {self.gaze_seconds}")


def save_manifest(path: str | Path, records: list[ManifestRecord]) -> None:
    lines = []
    for record in records:
        row = {k: v for k, v in asdict(record).items() if v is not None}
        lines.append(json.dumps(row, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path, check_paths: bool = True) -> list[ManifestRecord]:
    """Read a JSONL manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}:{lineno}: invalid JSON ({err})") from None
        for key in ("image_path", "context_path", "truth_path"):
            if row.get(key) is not None and not Path(row[key]).is_absolute():
                row[key] = str(base / row[key])
        record = ManifestRecord(**row)
        if check_paths:
            for p in (record.image_path, record.context_path, record.truth_path):
                if p is not None and not Path(p).exists():
                    raise FileNotFoundError(f"{path}:{lineno}: missing file {p}")
        records.append(record)
    return records


@dataclass(frozen=True)
class KFoldSplit:
    """Index-based split: a held-out test set plus k train/val fold pairs
    over the remaining records."""

    test: tuple[int, ...]
    folds: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]


def kfold_split(records: list[ManifestRecord], k: int = 10, seed: int = 0) -> KFoldSplit:
    """Carve a test set, then k disjoint validation folds over the rest.

    Records tagged "test" form the test set; with no test tags, a seeded
    shuffle holds out 10% (at least one record).  Fold validation sets are
    disjoint, cover the training pool, and differ in size by at most 1.
    """
    tagged = [i for i, r in enumerate(records) if r.split_tag == "test"]
    rng = np.random.default_rng(seed)
    if tagged:
        test = tagged
        pool = [i for i in range(len(records)) if records[i].split_tag != "test"]
    else:
        order = rng.permutation(len(records))
        n_test = max(1, len(records) // 10)
        test = sorted(int(i) for i in order[:n_test])
        pool = sorted(int(i) for i in order[n_test:])
    if len(pool) < k:
        raise TooFewRecords(f"{len(pool)} training records for {k} folds")
    shuffled = rng.permutation(len(pool))
    folds = []
    for f in range(k):
        val = sorted(int(pool[j]) for j in shuffled[f::k])
        train = sorted(set(pool) - set(val))
        folds.append((tuple(train), tuple(val)))
    return KFoldSplit(test=tuple(test), folds=tuple(folds))
