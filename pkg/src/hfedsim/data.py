"""Non-iid synthetic shard generation, refresh, and shard file I/O.

Devices hold samples from a small subset of classes (label skew). Classes are
Gaussian clusters around unit-sphere centroids, so the global problem stays
learnable by the small models while per-device distributions differ sharply.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DatasetFormatError
from .learning import Shard

TEST_SAMPLES_PER_CLASS = 100


@dataclass(frozen=True)
class DataSpec:
    num_devices: int
    num_classes: int
    classes_per_device: int = 2
    samples_per_device: int = 100
    input_dim: int = 2
    cluster_spread: float = 0.3
    refresh: bool = False

    def __post_init__(self):
        if self.num_devices < 1:
            raise ConfigurationError("num_devices must be >= 1")
        if not 1 <= self.classes_per_device <= self.num_classes:
            raise ConfigurationError(
                "classes_per_device must be in [1, num_classes]"
            )
        if self.samples_per_device < 1 or self.input_dim < 1:
            raise ConfigurationError("samples_per_device and input_dim must be >= 1")
        if self.cluster_spread <= 0:
            raise ConfigurationError("cluster_spread must be > 0")


@dataclass
class FederatedDataset:
    shards: list[Shard]
    test: Shard
    class_map: list[list[int]]
    # Class centroids used by the generator; None for datasets loaded from disk
    # (refresh is only possible when these are known).
    centroids: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_devices(self) -> int:
        return len(self.shards)


def _per_class_counts(spec: DataSpec) -> list[int]:
    """Split samples_per_device as evenly as possible across the device's classes."""
    c = spec.classes_per_device
    base, extra = divmod(spec.samples_per_device, c)
    return [base + (1 if k < extra else 0) for k in range(c)]


def _draw_class_samples(rng, centroid, count, spread, dim):
    return centroid + spread * rng.standard_normal((count, dim))


def gen_synthetic(spec: DataSpec, seed: int) -> FederatedDataset:
    """Generate per-device label-skewed shards plus a class-balanced global test set."""
    rng = np.random.default_rng(seed)
    k, dim = spec.num_classes, spec.input_dim

    centroids = rng.standard_normal((k, dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)

    shards, class_map = [], []
    counts = _per_class_counts(spec)
    for _ in range(spec.num_devices):
        classes = sorted(int(c) for c in rng.choice(k, spec.classes_per_device, replace=False))
        feats, labels = [], []
        for cls, cnt in zip(classes, counts):
            feats.append(_draw_class_samples(rng, centroids[cls], cnt, spec.cluster_spread, dim))
            labels.append(np.full(cnt, cls, dtype=np.int64))
        shards.append(Shard(np.concatenate(feats), np.concatenate(labels)))
        class_map.append(classes)

    test_feats, test_labels = [], []
    for cls in range(k):
        test_feats.append(
            _draw_class_samples(rng, centroids[cls], TEST_SAMPLES_PER_CLASS, spec.cluster_spread, dim)
        )
        test_labels.append(np.full(TEST_SAMPLES_PER_CLASS, cls, dtype=np.int64))
    test = Shard(np.concatenate(test_feats), np.concatenate(test_labels))

    return FederatedDataset(shards, test, class_map, centroids)


def refresh_shard(
    shard: Shard,
    class_map_entry: list[int],
    spec: DataSpec,
    round_seed: int,
    centroids: np.ndarray | None,
) -> Shard:
    """Redraw a shard from its device's class distribution; no-op when refresh is off."""
    if not spec.refresh:
        return shard
    if centroids is None:
        raise ConfigurationError("refresh requires generator centroids (synthetic data)")
    rng = np.random.default_rng(round_seed)
    counts = _per_class_counts(spec)
    feats, labels = [], []
    for cls, cnt in zip(class_map_entry, counts):
        feats.append(
            _draw_class_samples(rng, centroids[cls], cnt, spec.cluster_spread, spec.input_dim)
        )
        labels.append(np.full(cnt, cls, dtype=np.int64))
    return Shard(np.concatenate(feats), np.concatenate(labels))


def save_dataset(ds: FederatedDataset, out_dir: str | Path) -> Path:
    """Write one CSV per device plus test.csv and a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dim = ds.test.features.shape[1]
    num_classes = int(ds.test.labels.max()) + 1

    def write_shard(name: str, shard: Shard):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{j}" for j in range(dim)] + ["label"])
            for row, lab in zip(shard.features, shard.labels):
                w.writerow([repr(float(v)) for v in row] + [int(lab)])

    device_files = []
    for i, shard in enumerate(ds.shards):
        name = f"device_{i}.csv"
        write_shard(name, shard)
        device_files.append(name)
    write_shard("test.csv", ds.test)

    manifest = {
        "num_devices": ds.num_devices,
        "num_classes": num_classes,
        "input_dim": dim,
        "devices": device_files,
        "test": "test.csv",
        "class_map": ds.class_map,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _read_shard_file(path: Path, dim: int, num_classes: int) -> Shard:
    feats, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != dim + 1 or header[-1] != "label":
            raise DatasetFormatError(f"{path.name}: bad or missing header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise DatasetFormatError(
                    f"{path.name} line {lineno}: expected {dim + 1} fields, got {len(row)}"
                )
            try:
                feats.append([float(v) for v in row[:-1]])
                label = int(row[-1])
            except ValueError as exc:
                raise DatasetFormatError(f"{path.name} line {lineno}: {exc}") from exc
            if not 0 <= label < num_classes:
                raise DatasetFormatError(
                    f"{path.name} line {lineno}: label {label} outside [0, {num_classes})"
                )
            labels.append(label)
    if not feats:
        raise DatasetFormatError(f"{path.name}: shard has no samples")
    return Shard(np.asarray(feats, dtype=np.float64), np.asarray(labels, dtype=np.int64))


def load_shards(path: str | Path) -> FederatedDataset:
    """Load a dataset from a manifest file (or a directory containing manifest.json)."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise DatasetFormatError(f"manifest not found: {p}")
    try:
        manifest = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{p.name}: invalid JSON ({exc})") from exc

    for key in ("num_classes", "input_dim", "devices", "test"):
        if key not in manifest:
            raise DatasetFormatError(f"{p.name}: missing field {key!r}")
    if not manifest["devices"]:
        raise DatasetFormatError("at least one device required")

    dim = int(manifest["input_dim"])
    num_classes = int(manifest["num_classes"])
    base = p.parent
    shards = [_read_shard_file(base / name, dim, num_classes) for name in manifest["devices"]]
    test = _read_shard_file(base / manifest["test"], dim, num_classes)

    if len(set(test.labels.tolist())) != num_classes:
        raise DatasetFormatError("test set must cover all classes")

    class_map = manifest.get("class_map")
    if class_map is None:
        class_map = [sorted(set(s.labels.tolist())) for s in shards]
    else:
        class_map = [[int(c) for c in entry] for entry in class_map]
        for i, (shard, allowed) in enumerate(zip(shards, class_map)):
            extra = set(shard.labels.tolist()) - set(allowed)
            if extra:
                raise DatasetFormatError(
                    f"device {i}: labels {sorted(extra)} not in declared class list"
                )
    return FederatedDataset(shards, test, class_map, centroids=None)
