"""Datasets, cross-validation folds, and the on-disk layout.

A dataset directory holds ``meta.json`` plus one raw little-endian blob per
array: ``modality_<m>.bin`` (float32, row-major, shape (N, C_m, T_m)),
``labels.bin`` (int32) and ``ids.bin`` (int64). The fold table lives inside
``meta.json`` as explicit index lists, so a fold load never re-derives the
split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, TooFewSamplesError
from .numerics import STREAM_FOLDS, STREAM_SYNTH, keyed_generator

SCHEMA_VERSION = 1
NUM_FOLDS = 10


@dataclass(frozen=True)
class FoldSpec:
    """Index lists for one fold. Disjoint; union covers every sample."""

    fold_index: int
    train_idx: tuple[int, ...]
    val_idx: tuple[int, ...]
    test_idx: tuple[int, ...]


@dataclass
class MultimodalDataset:
    """Aligned multimodal samples: one float32 (N, C_m, T_m) array per stream."""

    modalities: list[np.ndarray]
    labels: np.ndarray
    sample_ids: np.ndarray
    num_classes: int

    def validate(self) -> "MultimodalDataset":
        if not self.modalities:
            raise ConfigError("dataset needs at least one modality")
        n = self.modalities[0].shape[0]
        for i, arr in enumerate(self.modalities):
            if arr.ndim != 3:
                raise ConfigError(f"modality {i} must be (N, C, T), got {arr.shape}")
            if arr.shape[0] != n:
                raise ConfigError(
                    f"modality {i} has {arr.shape[0]} samples, expected {n}"
                )
        if self.labels.shape != (n,):
            raise ConfigError(f"labels shape {self.labels.shape} != ({n},)")
        if self.sample_ids.shape != (n,):
            raise ConfigError(f"sample_ids shape {self.sample_ids.shape} != ({n},)")
        if len(np.unique(self.sample_ids)) != n:
            raise ConfigError("sample_ids must be unique")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(
                f"labels must lie in [0, {self.num_classes}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        return self

    @property
    def num_samples(self) -> int:
        return self.modalities[0].shape[0]

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    @property
    def modality_shapes(self) -> list[tuple[int, int]]:
        return [(arr.shape[1], arr.shape[2]) for arr in self.modalities]

    def subset(self, indices) -> "MultimodalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return MultimodalDataset(
            modalities=[arr[idx] for arr in self.modalities],
            labels=self.labels[idx],
            sample_ids=self.sample_ids[idx],
            num_classes=self.num_classes,
        )


@dataclass(frozen=True)
class FoldBundle:
    train: MultimodalDataset
    val: MultimodalDataset
    test: MultimodalDataset


# ---------------------------------------------------------------------------
# Fold construction
# ---------------------------------------------------------------------------


def make_folds(num_samples: int, seed: int) -> list[FoldSpec]:
    """Ten folds over one seeded shuffle with a rotating val/test window.

    The shuffled order splits into 10 slices of floor(N/10). Fold i takes
    slice i for validation and slice i+1 for test; fold 9 wraps around to
    slice 0. Everything else, including the N mod 10 tail, trains.
    """
    if num_samples < 2 * NUM_FOLDS:
        raise TooFewSamplesError(
            f"need at least {2 * NUM_FOLDS} samples for {NUM_FOLDS} folds, got {num_samples}"
        )
    rng = keyed_generator(seed, STREAM_FOLDS)
    perm = rng.permutation(num_samples)  # Fisher-Yates under the hood
    slice_len = num_samples // NUM_FOLDS
    folds = []
    for i in range(NUM_FOLDS):
        val = perm[i * slice_len:(i + 1) * slice_len]
        j = (i + 1) % NUM_FOLDS
        test = perm[j * slice_len:(j + 1) * slice_len]
        held = set(val.tolist()) | set(test.tolist())
        train = tuple(int(p) for p in perm if int(p) not in held)
        folds.append(
            FoldSpec(
                fold_index=i,
                train_idx=train,
                val_idx=tuple(int(p) for p in val),
                test_idx=tuple(int(p) for p in test),
            )
        )
    return folds


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def generate_synthetic(num_modalities: int, num_samples: int, num_classes: int,
                       channels: int, timesteps: int, separability: float,
                       seed: int) -> MultimodalDataset:
    """Class-dependent sinusoids plus unit Gaussian noise.

    Sample with class c, modality m, channel h carries
    separability * sin(2*pi * (c+1) * (m+1) * (t/T) + phase(h)) + noise,
    so class identity lives in the frequency while the modality index
    scales it. separability 0 leaves pure noise.
    """
    if num_modalities < 1 or num_samples < 1 or channels < 1 or timesteps < 1:
        raise ConfigError("synthetic dimensions must be positive")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if separability < 0:
        raise ConfigError(f"separability must be >= 0, got {separability}")
    rng = keyed_generator(seed, STREAM_SYNTH)
    labels = (np.arange(num_samples) % num_classes).astype(np.int32)
    grid = np.arange(timesteps, dtype=np.float64) / timesteps
    phases = 2.0 * np.pi * np.arange(channels, dtype=np.float64) / (channels + 1)
    modalities = []
    for m in range(num_modalities):
        freq = (labels.astype(np.float64) + 1.0) * (m + 1)
        angle = (
            2.0 * np.pi * freq[:, None, None] * grid[None, None, :]
            + phases[None, :, None]
        )
        signal = separability * np.sin(angle)
        noise = rng.standard_normal((num_samples, channels, timesteps))
        modalities.append((signal + noise).astype(np.float32))
    return MultimodalDataset(
        modalities=modalities,
        labels=labels,
        sample_ids=np.arange(num_samples, dtype=np.int64),
        num_classes=num_classes,
    ).validate()


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _write_blob(path: Path, array: np.ndarray, dtype: str) -> None:
    path.write_bytes(np.ascontiguousarray(array).astype(dtype).tobytes())


def _read_blob(path: Path, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise FormatError("file is missing", path=path.name)
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise FormatError(
            f"expected {expected} bytes for shape {shape}, found {len(raw)}",
            path=path.name,
            offset=min(expected, len(raw)),
        )
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_dataset(dataset: MultimodalDataset, out_dir, *, seed: int,
                 folds: list[FoldSpec] | None = None) -> Path:
    """Write the dataset directory; include the fold table when given."""
    dataset.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "num_modalities": dataset.num_modalities,
        "num_samples": dataset.num_samples,
        "num_classes": dataset.num_classes,
        "modalities": [
            {"channels": c, "timesteps": t} for c, t in dataset.modality_shapes
        ],
        "seed": int(seed),
    }
    if folds is not None:
        meta["folds"] = [
            {
                "fold": f.fold_index,
                "train": list(f.train_idx),
                "val": list(f.val_idx),
                "test": list(f.test_idx),
            }
            for f in folds
        ]
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for m, arr in enumerate(dataset.modalities):
        _write_blob(out / f"modality_{m}.bin", arr, "<f4")
    _write_blob(out / "labels.bin", dataset.labels, "<i4")
    _write_blob(out / "ids.bin", dataset.sample_ids, "<i8")
    return out


def save_folds(dataset: MultimodalDataset, folds: list[FoldSpec], out_dir,
               *, seed: int) -> Path:
    """Dataset plus fold table in one directory; blobs round-trip bit-exact."""
    _validate_fold_table(folds, dataset.num_samples)
    return save_dataset(dataset, out_dir, seed=seed, folds=folds)


def _require(meta: dict, key: str, path: Path):
    if key not in meta:
        raise FormatError(f"meta.json lacks required field {key!r}", path=path.name)
    return meta[key]


def load_dataset(dir_path) -> tuple[MultimodalDataset, list[FoldSpec] | None, dict]:
    """Read a dataset directory back; returns (dataset, folds or None, meta)."""
    root = Path(dir_path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FormatError("file is missing", path="meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"not valid JSON: {exc}", path="meta.json") from exc
    version = _require(meta, "schema_version", meta_path)
    if version != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {version}", path="meta.json")
    n = int(_require(meta, "num_samples", meta_path))
    m_count = int(_require(meta, "num_modalities", meta_path))
    shapes = _require(meta, "modalities", meta_path)
    if len(shapes) != m_count:
        raise FormatError(
            f"modalities list has {len(shapes)} entries, expected {m_count}",
            path="meta.json",
        )
    modalities = []
    for m, spec in enumerate(shapes):
        c, t = int(spec["channels"]), int(spec["timesteps"])
        modalities.append(_read_blob(root / f"modality_{m}.bin", "<f4", (n, c, t)))
    labels = _read_blob(root / "labels.bin", "<i4", (n,))
    ids = _read_blob(root / "ids.bin", "<i8", (n,))
    dataset = MultimodalDataset(
        modalities=modalities,
        labels=labels,
        sample_ids=ids,
        num_classes=int(_require(meta, "num_classes", meta_path)),
    )
    try:
        dataset.validate()
    except ConfigError as exc:
        raise FormatError(str(exc), path="meta.json") from exc
    folds = None
    if "folds" in meta:
        folds = [
            FoldSpec(
                fold_index=int(f["fold"]),
                train_idx=tuple(int(i) for i in f["train"]),
                val_idx=tuple(int(i) for i in f["val"]),
                test_idx=tuple(int(i) for i in f["test"]),
            )
            for f in meta["folds"]
        ]
        _validate_fold_table(folds, n)
    return dataset, folds, meta


def _validate_fold_table(folds: list[FoldSpec], num_samples: int) -> None:
    if len(folds) != NUM_FOLDS:
        raise FormatError(f"fold table has {len(folds)} folds, expected {NUM_FOLDS}")
    slice_len = num_samples // NUM_FOLDS
    for f in folds:
        train, val, test = set(f.train_idx), set(f.val_idx), set(f.test_idx)
        if len(f.val_idx) != slice_len or len(f.test_idx) != slice_len:
            raise FormatError(
                f"fold {f.fold_index}: val/test sizes {len(f.val_idx)}/{len(f.test_idx)} "
                f"!= {slice_len}"
            )
        if train & val or train & test or val & test:
            raise FormatError(f"fold {f.fold_index}: train/val/test overlap")
        if train | val | test != set(range(num_samples)):
            raise FormatError(f"fold {f.fold_index}: indices do not cover the dataset")


def load_fold(dir_path, fold_index: int) -> FoldBundle:
    """Materialize (train, val, test) datasets for one fold."""
    dataset, folds, _ = load_dataset(dir_path)
    if folds is None:
        raise FormatError("directory has no fold table; run split first", path="meta.json")
    if not 0 <= fold_index < len(folds):
        raise ConfigError(f"fold index {fold_index} out of range [0, {len(folds)})")
    spec = folds[fold_index]
    return FoldBundle(
        train=dataset.subset(spec.train_idx),
        val=dataset.subset(spec.val_idx),
        test=dataset.subset(spec.test_idx),
    )


def load_all_folds(dir_path) -> list[FoldBundle]:
    dataset, folds, _ = load_dataset(dir_path)
    if folds is None:
        raise FormatError("directory has no fold table; run split first", path="meta.json")
    bundles = []
    for spec in folds:
        bundles.append(
            FoldBundle(
                train=dataset.subset(spec.train_idx),
                val=dataset.subset(spec.val_idx),
                test=dataset.subset(spec.test_idx),
            )
        )
    return bundles
