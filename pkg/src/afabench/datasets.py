"""Synthetic AFA datasets (CUBE, AFAContext), CSV ingestion and masking.

All generators are pure functions of ``(spec, seed)``. Synthetic features are
left on their natural scale (means in {0, 0.5, 1}); CSV data is standardised
with train-split statistics.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


class SchemaError(ValueError):
    pass


@dataclass
class TabularDataset:
    """One split of a labelled feature matrix."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str
    name: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be n x d with one label per row")
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split tag {self.split!r}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("missing or non-finite feature values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass
class DatasetBundle:
    """Train/val/test splits plus provenance."""

    name: str
    train: TabularDataset
    val: TabularDataset
    test: TabularDataset
    num_classes: int
    seed: int
    spec: dict = field(default_factory=dict)
    standardization: dict | None = None
    metric: str = "accuracy"

    @property
    def d(self) -> int:
        return self.train.d

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.val, self.test):
            h.update(np.ascontiguousarray(part.features).tobytes())
            h.update(np.ascontiguousarray(part.labels).tobytes())
        return h.hexdigest()[:16]

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "num_features": self.d,
            "num_classes": self.num_classes,
            "sizes": {"train": self.train.n, "val": self.val.n, "test": self.test.n},
            "spec": self.spec,
            "standardization": self.standardization,
            "metric": self.metric,
            "fingerprint": self.fingerprint(),
        }


@dataclass(frozen=True)
class CubeSpec:
    n_features: int = 20
    n_classes: int = 8
    informative_sigma: float = 0.3
    noise_mean: float = 0.5
    noise_sigma: float = 0.3
    sizes: tuple[int, int, int] = (700, 150, 150)


@dataclass(frozen=True)
class AFAContextSpec:
    n_features: int = 30
    n_classes: int = 8
    context_indices: tuple[int, int] = (0, 1)
    group_a: tuple[int, ...] = tuple(range(2, 12))
    group_b: tuple[int, ...] = tuple(range(12, 22))
    padding: tuple[int, ...] = tuple(range(22, 30))
    informative_sigma: float = 0.3
    noise_mean: float = 0.5
    noise_sigma: float = 0.3
    sizes: tuple[int, int, int] = (700, 150, 150)

    def __post_init__(self):
        if set(self.group_a) & set(self.group_b):
            raise ValueError("context groups must be disjoint")
        if len(self.group_a) < self.n_classes + 2:
            raise ValueError("group too small for the sliding CUBE pattern")


@dataclass(frozen=True)
class MaskingDistribution:
    """Per-batch masking probability ~ Uniform(low, high)."""

    low: float = 0.0
    high: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.low <= self.high < 1.0:
            raise ValueError("need 0 <= low <= high < 1")

    @property
    def minimum(self) -> float:
        return self.low


MASKING_PRESETS = {
    "mnist": MaskingDistribution(0.75, 0.99),
    "fashionmnist": MaskingDistribution(0.75, 0.99),
    "default": MaskingDistribution(0.0, 0.9),
}


def masking_preset(dataset_name: str) -> MaskingDistribution:
    return MASKING_PRESETS.get(dataset_name.lower(), MASKING_PRESETS["default"])


def cube_bit_means(k: int) -> np.ndarray:
    """Means of the three informative features of class ``k`` (3-bit encoding)."""
    return np.array([(k >> j) & 1 for j in range(3)], dtype=np.float64)


def cube_pattern(n_classes: int, width: int, noise_mean: float) -> np.ndarray:
    """Class-conditional means over a window of ``width`` features."""
    means = np.full((n_classes, width), noise_mean)
    for k in range(n_classes):
        means[k, k:k + 3] = cube_bit_means(k)
    return means


def sample_cube(n: int, spec: CubeSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = rng.integers(0, spec.n_classes, size=n)
    x = rng.normal(spec.noise_mean, spec.noise_sigma, size=(n, spec.n_features))
    pattern = cube_pattern(spec.n_classes, spec.n_classes + 2, spec.noise_mean)
    rows = np.arange(n)[:, None]
    cols = y[:, None] + np.arange(3)[None, :]
    x[rows, cols] = pattern[y[:, None], cols] + spec.informative_sigma * rng.standard_normal((n, 3))
    return x, y


def sample_afacontext(n: int, spec: AFAContextSpec,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns features, labels and the context (0 = group A, 1 = group B)."""
    context = rng.integers(0, 2, size=n)
    y = rng.integers(0, spec.n_classes, size=n)
    x = rng.normal(spec.noise_mean, spec.noise_sigma, size=(n, spec.n_features))
    x[:, list(spec.context_indices)] = 0.0
    x[np.arange(n), np.asarray(spec.context_indices)[context]] = 1.0
    groups = np.array([spec.group_a, spec.group_b])
    width = spec.n_classes + 2
    pattern = cube_pattern(spec.n_classes, width, spec.noise_mean)
    offsets = y[:, None] + np.arange(3)[None, :]
    cols = groups[context][np.arange(n)[:, None], offsets]
    x[np.arange(n)[:, None], cols] = (
        pattern[y[:, None], offsets] + spec.informative_sigma * rng.standard_normal((n, 3))
    )
    return x, y, context


def _bundle(name, x, y, num_classes, sizes, seed, spec_dict) -> DatasetBundle:
    a, b = sizes[0], sizes[0] + sizes[1]
    parts = [TabularDataset(x[s], y[s], num_classes, tag, name)
             for s, tag in ((slice(0, a), "train"), (slice(a, b), "val"), (slice(b, None), "test"))]
    return DatasetBundle(name, *parts, num_classes=num_classes, seed=seed, spec=spec_dict)


def generate_cube(spec: CubeSpec = CubeSpec(), seed: int = 0) -> DatasetBundle:
    rng = np.random.default_rng(seed)
    x, y = sample_cube(sum(spec.sizes), spec, rng)
    return _bundle("cube", x, y, spec.n_classes, spec.sizes, seed, asdict(spec))


def generate_afacontext(spec: AFAContextSpec = AFAContextSpec(), seed: int = 0) -> DatasetBundle:
    rng = np.random.default_rng(seed)
    x, y, _ = sample_afacontext(sum(spec.sizes), spec, rng)
    return _bundle("afacontext", x, y, spec.n_classes, spec.sizes, seed, asdict(spec))


def split_sizes(n: int) -> tuple[int, int, int]:
    """70/15/15 split: floor for train and val, remainder to test."""
    n_train = int(np.floor(SPLIT_FRACTIONS[0] * n + 1e-9))
    n_val = int(np.floor(SPLIT_FRACTIONS[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split_permutation(n: int, seed: int) -> np.ndarray:
    """Row order used for splitting: ``default_rng(seed).permutation(n)``."""
    return np.random.default_rng(seed).permutation(n)


@dataclass
class CsvSchema:
    label_column: str
    num_classes: int
    name: str = "csv"
    label_values: list[str] | None = None
    metric: str = "accuracy"


def load_csv(path, schema: CsvSchema, seed: int = 0) -> DatasetBundle:
    """Read a numeric CSV, split it 70/15/15 by seeded shuffle and standardise.

    Labels are either integers in ``[0, num_classes)`` or, when
    ``schema.label_values`` is given, one of those strings (mapped to their
    position).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    if schema.label_column not in header:
        raise SchemaError(f"{path}: label column {schema.label_column!r} not found")
    li = header.index(schema.label_column)
    feature_names = [h for i, h in enumerate(header) if i != li]
    x = np.empty((len(rows), len(feature_names)))
    y = np.empty(len(rows), dtype=np.int64)
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(f"{path}: row {r + 2} has {len(row)} cells, expected {len(header)}")
        y[r] = _parse_label(row[li].strip(), schema, r + 2)
        cells = [c for i, c in enumerate(row) if i != li]
        for j, c in enumerate(cells):
            try:
                x[r, j] = float(c)
            except ValueError:
                raise SchemaError(f"{path}: non-numeric cell {c!r} at row {r + 2}, "
                                  f"column {feature_names[j]!r}") from None
    if not np.all(np.isfinite(x)):
        raise SchemaError(f"{path}: non-finite feature values")

    order = split_permutation(len(rows), seed)
    x, y = x[order], y[order]
    sizes = split_sizes(len(rows))
    mean, std = standardization_stats(x[:sizes[0]])
    x = (x - mean) / std
    bundle = _bundle(schema.name, x, y, schema.num_classes, sizes, seed,
                     {"source": str(path), "label_column": schema.label_column,
                      "feature_names": feature_names})
    bundle.standardization = {"mean": mean.tolist(), "std": std.tolist()}
    bundle.metric = schema.metric
    return bundle


def _parse_label(cell: str, schema: CsvSchema, lineno: int) -> int:
    if schema.label_values is not None:
        if cell not in schema.label_values:
            raise SchemaError(f"unknown label value {cell!r} at row {lineno}")
        return schema.label_values.index(cell)
    try:
        v = float(cell)
    except ValueError:
        raise SchemaError(f"unknown label value {cell!r} at row {lineno}") from None
    if v != int(v) or not 0 <= v < schema.num_classes:
        raise SchemaError(f"unknown label value {cell!r} at row {lineno}")
    return int(v)


def standardization_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and standard deviations; zero-variance columns get std 1."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def sample_mask(batch_size: int, d: int, dist: MaskingDistribution,
                rng: np.random.Generator | int) -> np.ndarray:
    """Binary observation mask (1 = observed).

    One masking probability ``p ~ U(low, high)`` is drawn for the whole batch
    and each entry is hidden independently with probability ``p``.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    p = rng.uniform(dist.low, dist.high)
    return (rng.random((batch_size, d)) >= p).astype(np.float64)


def write_bundle(bundle: DatasetBundle, out_dir) -> Path:
    """Write ``<name>_{train,val,test}.csv`` and ``<name>_manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = [f"f{i + 1}" for i in range(bundle.d)] + ["label"]
    for part in (bundle.train, bundle.val, bundle.test):
        with open(out / f"{bundle.name}_{part.split}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row, label in zip(part.features, part.labels):
                w.writerow([repr(float(v)) for v in row] + [int(label)])
    path = out / f"{bundle.name}_manifest.json"
    path.write_text(json.dumps(bundle.manifest(), indent=2, sort_keys=True))
    return path


def read_bundle(manifest_path) -> DatasetBundle:
    """Inverse of :func:`write_bundle`."""
    manifest_path = Path(manifest_path)
    man = json.loads(manifest_path.read_text())
    parts = []
    for tag in ("train", "val", "test"):
        data = np.loadtxt(manifest_path.parent / f"{man['name']}_{tag}.csv", delimiter=",",
                          skiprows=1, ndmin=2)
        parts.append(TabularDataset(data[:, :-1], data[:, -1].astype(np.int64),
                                    man["num_classes"], tag, man["name"]))
    bundle = DatasetBundle(man["name"], *parts, num_classes=man["num_classes"], seed=man["seed"],
                           spec=man.get("spec") or {}, standardization=man.get("standardization"),
                           metric=man.get("metric", "accuracy"))
    if bundle.fingerprint() != man["fingerprint"]:
        raise ValueError(f"{manifest_path}: dataset fingerprint mismatch")
    return bundle


def make_dataset(name: str, seed: int = 0, **kwargs) -> DatasetBundle:
    """Build a named synthetic dataset."""
    if name == "cube":
        return generate_cube(CubeSpec(**kwargs), seed)
    if name == "afacontext":
        return generate_afacontext(AFAContextSpec(**kwargs), seed)
    raise KeyError(f"unknown dataset id {name!r}")
