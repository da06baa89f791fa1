"""Dataset loading (MNIST IDX, delimited text), normalization, splits.

Every loader produces the same in-memory shape: float64 feature matrix,
dense integer labels, and stable per-row instance ids that survive
splitting (fixed-mask dropout keys off them).
"""

import csv
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConsistencyError, DataError, FormatError, ParameterError
from .rng import RngKey, permutation

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MISSING_MARKERS = ("", "?", "NA", "na", "nan")


@dataclass
class Dataset:
    name: str
    features: np.ndarray
    labels: np.ndarray
    instance_ids: np.ndarray
    class_count: int
    dropped_rows: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        n = self.features.shape[0]
        if not (len(self.labels) == n and len(self.instance_ids) == n):
            raise DataError(
                f"{self.name}: {n} feature rows vs {len(self.labels)} labels "
                f"vs {len(self.instance_ids)} ids"
            )
        if n > 0 and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"{self.name}: labels outside [0, {self.class_count})")
        if len(np.unique(self.instance_ids)) != n:
            raise DataError(f"{self.name}: instance ids are not unique")
        if not np.isfinite(self.features).all():
            raise DataError(f"{self.name}: non-finite feature values")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices, name: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            name=name or self.name,
            features=self.features[indices],
            labels=self.labels[indices],
            instance_ids=self.instance_ids[indices],
            class_count=self.class_count,
        )


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float
    seed: RngKey
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ParameterError(f"test_fraction must be in (0, 1), got {self.test_fraction}")


def _read_be32(buf: bytes, offset: int) -> int:
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Load an IDX image/label file pair; pixels scale to [0, 1]."""
    img_bytes = Path(images_path).read_bytes()
    lab_bytes = Path(labels_path).read_bytes()
    if len(img_bytes) < 16 or len(lab_bytes) < 8:
        raise IOError(f"truncated IDX header in {images_path} / {labels_path}")
    magic = _read_be32(img_bytes, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad image magic 0x{magic:08x}")
    lmagic = _read_be32(lab_bytes, 0)
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad label magic 0x{lmagic:08x}")
    n = _read_be32(img_bytes, 4)
    rows = _read_be32(img_bytes, 8)
    cols = _read_be32(img_bytes, 12)
    n_labels = _read_be32(lab_bytes, 4)
    if n != n_labels:
        raise ConsistencyError(f"{n} images but {n_labels} labels")
    if len(img_bytes) < 16 + n * rows * cols:
        raise IOError(f"{images_path}: truncated pixel payload")
    if len(lab_bytes) < 8 + n:
        raise IOError(f"{labels_path}: truncated label payload")
    pixels = np.frombuffer(img_bytes, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab_bytes, dtype=np.uint8, count=n, offset=8)
    features = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(
        name=name,
        features=features,
        labels=labels.astype(np.int64),
        instance_ids=np.arange(n, dtype=np.int64),
        class_count=int(labels.max()) + 1 if n else 0,
    )


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write (n, rows, cols) uint8 images + labels in IDX format."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if images.ndim != 3 or len(labels) != images.shape[0]:
        raise DataError(f"write_idx expects (n, rows, cols) images, got {images.shape}")
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(labels.tobytes())


@dataclass(frozen=True)
class CsvSchema:
    label_column: int
    feature_columns: Optional[tuple] = None  # None = every other column
    delimiter: str = ","
    header: bool = False


def load_csv(path, schema: CsvSchema, name: Optional[str] = None) -> Dataset:
    """Parse a delimited file into features + densely re-indexed labels.

    Rows with missing feature values are dropped and counted; anything
    else unparseable raises with its row number. Class labels map to
    0..C-1 in order of first appearance.
    """
    path = Path(path)
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f, delimiter=schema.delimiter)
        for row in reader:
            if row:
                rows.append(row)
    if schema.header:
        rows = rows[1:]
    if not rows:
        raise FormatError(f"{path}: no data rows")

    n_cols = len(rows[0])
    label_col = schema.label_column % n_cols
    if schema.feature_columns is None:
        feat_cols = [i for i in range(n_cols) if i != label_col]
    else:
        feat_cols = [c % n_cols for c in schema.feature_columns]

    label_index: dict = {}
    features, labels, kept_ids = [], [], []
    dropped = 0
    for row_no, row in enumerate(rows):
        if len(row) != n_cols:
            raise FormatError(f"{path}: row {row_no + 1} has {len(row)} columns, expected {n_cols}")
        raw = [row[c].strip() for c in feat_cols]
        if any(v in MISSING_MARKERS for v in raw):
            dropped += 1
            continue
        try:
            values = [float(v) for v in raw]
        except ValueError as exc:
            raise FormatError(f"{path}: row {row_no + 1}: {exc}") from None
        label_raw = row[label_col].strip()
        if label_raw not in label_index:
            label_index[label_raw] = len(label_index)
        features.append(values)
        labels.append(label_index[label_raw])
        kept_ids.append(row_no)
    if dropped:
        logger.warning("%s: dropped %d rows with missing feature values", path, dropped)
    if not features:
        raise DataError(f"{path}: every row was dropped")
    return Dataset(
        name=name or path.stem,
        features=np.array(features, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        instance_ids=np.array(kept_ids, dtype=np.int64),
        class_count=len(label_index),
        dropped_rows=dropped,
    )


def normalize(ds: Dataset, method: str, stats_from: Dataset) -> Dataset:
    """Feature normalization with statistics taken from stats_from only."""
    if method == "none":
        return ds
    if stats_from.n_features != ds.n_features:
        raise DataError(
            f"stats source has {stats_from.n_features} features, dataset has {ds.n_features}"
        )
    x = ds.features
    if method == "zscore":
        mu = stats_from.features.mean(axis=0)
        sigma = np.maximum(stats_from.features.std(axis=0), 1e-8)
        scaled = (x - mu) / sigma
    elif method == "minmax":
        lo = stats_from.features.min(axis=0)
        span = np.maximum(stats_from.features.max(axis=0) - lo, 1e-8)
        scaled = (x - lo) / span
    else:
        raise ParameterError(f"unknown normalization method {method!r}")
    return Dataset(
        name=ds.name,
        features=scaled,
        labels=ds.labels,
        instance_ids=ds.instance_ids,
        class_count=ds.class_count,
        dropped_rows=ds.dropped_rows,
    )


def split(ds: Dataset, spec: SplitSpec) -> tuple:
    """Deterministic disjoint (train, test) partition; ids carry over."""
    n = ds.n_samples
    if n < 2:
        raise DataError(f"{ds.name}: need at least 2 samples to split")
    if spec.stratified:
        test_idx = []
        train_only = 0
        for c in range(ds.class_count):
            members = np.flatnonzero(ds.labels == c)
            if len(members) == 0:
                continue
            if len(members) == 1:
                train_only += 1
                continue
            order = permutation(spec.seed.with_fields(purpose="split"), len(members), lane=c)
            n_test = int(round(spec.test_fraction * len(members)))
            n_test = min(max(n_test, 1), len(members) - 1)
            test_idx.extend(members[order[:n_test]])
        if train_only:
            logger.warning(
                "%s: %d single-sample classes placed entirely in train", ds.name, train_only
            )
        test_mask = np.zeros(n, dtype=bool)
        test_mask[test_idx] = True
    else:
        order = permutation(spec.seed.with_fields(purpose="split"), n)
        n_test = min(max(int(round(spec.test_fraction * n)), 1), n - 1)
        test_mask = np.zeros(n, dtype=bool)
        test_mask[order[:n_test]] = True
    test_indices = np.flatnonzero(test_mask)
    train_indices = np.flatnonzero(~test_mask)
    if len(test_indices) == 0 or len(train_indices) == 0:
        raise DataError(f"{ds.name}: split produced an empty partition")
    return ds.subset(train_indices), ds.subset(test_indices)


def synthetic_blobs(
    samples: int,
    features: int,
    classes: int,
    seed: int,
    name: str = "blobs",
    center_scale: float = 2.0,
    noise: float = 1.0,
) -> Dataset:
    """Gaussian class blobs; deterministic given the integer seed."""
    if samples < classes:
        raise DataError(f"need at least {classes} samples for {classes} classes")
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    centers = gen.standard_normal((classes, features)) * center_scale
    labels = np.arange(samples, dtype=np.int64) % classes
    x = centers[labels] + gen.standard_normal((samples, features)) * noise
    return Dataset(
        name=name,
        features=x,
        labels=labels,
        instance_ids=np.arange(samples, dtype=np.int64),
        class_count=classes,
    )


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_manifest(path) -> dict:
    """Read the name -> source-description manifest (YAML or JSON)."""
    import yaml

    path = Path(path)
    with open(path) as f:
        obj = yaml.safe_load(f)
    if not isinstance(obj, dict) or "datasets" not in obj:
        raise FormatError(f"{path}: manifest must be a mapping with a 'datasets' key")
    return obj["datasets"]


def _checked_path(base_dir: Path, rel, expected_sha: Optional[str]) -> Path:
    p = (base_dir / rel) if not Path(rel).is_absolute() else Path(rel)
    if not p.exists():
        raise DataError(f"dataset file not found: {p}")
    if expected_sha:
        actual = sha256_file(p)
        if actual != expected_sha:
            raise DataError(f"{p}: sha256 mismatch (expected {expected_sha}, got {actual})")
    return p


def resolve_dataset(name: str, entry: dict, base_dir) -> dict:
    """Materialize one manifest entry.

    Returns {'full': Dataset} for sources that get split per trial, or
    {'train': Dataset, 'test': Dataset} for sources with canonical files.
    """
    base_dir = Path(base_dir)
    kind = entry.get("kind")
    if kind == "csv":
        schema = CsvSchema(
            label_column=int(entry.get("label_column", -1)),
            feature_columns=tuple(entry["feature_columns"])
            if entry.get("feature_columns")
            else None,
            delimiter=entry.get("delimiter", ","),
            header=bool(entry.get("header", False)),
        )
        path = _checked_path(base_dir, entry["path"], entry.get("sha256"))
        return {"full": load_csv(path, schema, name=name)}
    if kind == "idx":
        pairs = {}
        for part in ("train", "test"):
            images = _checked_path(
                base_dir, entry[f"{part}_images"], entry.get(f"{part}_images_sha256")
            )
            labels = _checked_path(
                base_dir, entry[f"{part}_labels"], entry.get(f"{part}_labels_sha256")
            )
            pairs[part] = load_idx(images, labels, name=f"{name}-{part}")
        return pairs
    if kind == "synthetic":
        ds = synthetic_blobs(
            samples=int(entry["samples"]),
            features=int(entry["features"]),
            classes=int(entry["classes"]),
            seed=int(entry.get("seed", 0)),
            name=name,
            center_scale=float(entry.get("center_scale", 2.0)),
            noise=float(entry.get("noise", 1.0)),
        )
        return {"full": ds}
    raise FormatError(f"dataset {name!r}: unknown kind {kind!r}")
