"""
Datasets, normalization, synthetic coupled data and checkpoint files.

CSV files carry one header row, numeric feature columns and optional integer
"label" / "sublabel" columns. Checkpoints use a small self-describing binary
layout:

    5 bytes   magic "DMEC1"
    1 byte    format version
    4 bytes   little-endian length of the metadata document
    N bytes   UTF-8 JSON metadata, including the ordered block table
    ...       raw little-endian float64 blocks, in block-table order
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DataError,
    UsageError,
)


LABEL_COLUMN = "label"
SUBLABEL_COLUMN = "sublabel"

MAGIC = b"DMEC1"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<I")

GENERATORS = ("gmm_rotate", "linear_map", "checkerboard")


# =============================================================================
# DATASETS
# =============================================================================

@dataclass
class TabularDataset:
    """n x d real samples with optional class and subclass labels."""
    points: np.ndarray
    labels: np.ndarray | None = None
    sublabels: np.ndarray | None = None
    name: str = ""
    columns: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise DataError(f"dataset '{self.name}' must be a matrix, got shape {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise DataError(f"dataset '{self.name}' contains non-finite values")
        for label_name in ("labels", "sublabels"):
            values = getattr(self, label_name)
            if values is not None:
                values = np.asarray(values, dtype=np.int64)
                if values.shape != (self.points.shape[0],):
                    raise DataError(f"dataset '{self.name}': {label_name} length does not match row count")
                setattr(self, label_name, values)
        if not self.columns:
            self.columns = [f"f{i}" for i in range(self.dim)]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def require_rows(self, minimum: int = 1) -> None:
        """Raise DataError unless the dataset is usable as training data."""
        if self.n < minimum:
            raise DataError(f"dataset '{self.name}' has {self.n} rows, at least {minimum} required")

    def subset(self, rows: np.ndarray, name: str | None = None) -> TabularDataset:
        return TabularDataset(
            points=self.points[rows],
            labels=None if self.labels is None else self.labels[rows],
            sublabels=None if self.sublabels is None else self.sublabels[rows],
            name=self.name if name is None else name,
            columns=list(self.columns),
        )


def _parse_float(text: str, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {line}: column '{column}' is not numeric: {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"line {line}: column '{column}' is not finite: {text!r}")
    return value


def _parse_label(text: str, line: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataError(f"line {line}: column '{column}' must be an integer label: {text!r}") from None


def load_csv(path: Path | str) -> TabularDataset:
    """
    Read a dataset from CSV.

    Args:
        path: UTF-8 CSV with a header row

    Returns:
        TabularDataset in file row order; "label"/"sublabel" columns become
        label arrays and are excluded from the features

    Raises:
        DataError: On a missing header, ragged rows, non-numeric or
            non-finite features (message names the line)
    """
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8-sig")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None

    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        lowered = [h.lower() for h in header]
        label_at = lowered.index(LABEL_COLUMN) if LABEL_COLUMN in lowered else None
        sublabel_at = lowered.index(SUBLABEL_COLUMN) if SUBLABEL_COLUMN in lowered else None
        feature_at = [i for i in range(len(header)) if i not in (label_at, sublabel_at)]

        rows: list[list[float]] = []
        labels: list[int] = []
        sublabels: list[int] = []
        for line, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(record)}")
            rows.append([_parse_float(record[i].strip(), line, header[i]) for i in feature_at])
            if label_at is not None:
                labels.append(_parse_label(record[label_at].strip(), line, header[label_at]))
            if sublabel_at is not None:
                sublabels.append(_parse_label(record[sublabel_at].strip(), line, header[sublabel_at]))

    points = np.array(rows, dtype=np.float64).reshape(len(rows), len(feature_at))
    return TabularDataset(
        points=points,
        labels=np.array(labels, dtype=np.int64) if label_at is not None else None,
        sublabels=np.array(sublabels, dtype=np.int64) if sublabel_at is not None else None,
        name=path.stem,
        columns=[header[i] for i in feature_at],
    )


def write_csv(path: Path | str, dataset: TabularDataset) -> None:
    """Write features (and labels when present) so load_csv reads them back."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = list(dataset.columns)
    if dataset.labels is not None:
        header.append(LABEL_COLUMN)
    if dataset.sublabels is not None:
        header.append(SUBLABEL_COLUMN)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for i, row in enumerate(dataset.points):
            record = [repr(float(v)) for v in row]
            if dataset.labels is not None:
                record.append(str(int(dataset.labels[i])))
            if dataset.sublabels is not None:
                record.append(str(int(dataset.sublabels[i])))
            writer.writerow(record)


def split_dataset(
    dataset: TabularDataset,
    test_fraction: float,
    seed: int,
) -> tuple[TabularDataset, TabularDataset]:
    """Deterministic shuffled train/held-out split."""
    if not 0.0 <= test_fraction < 1.0:
        raise UsageError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(dataset.n)
    n_test = int(round(dataset.n * test_fraction))
    return (
        dataset.subset(np.sort(order[n_test:]), name=f"{dataset.name}-train"),
        dataset.subset(np.sort(order[:n_test]), name=f"{dataset.name}-test"),
    )


# =============================================================================
# NORMALIZATION
# =============================================================================

@dataclass
class Normalizer:
    """Per-feature standardization with clamping of outliers."""
    mean: np.ndarray
    std: np.ndarray
    clip_sigmas: float = 5.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise DataError("normalizer mean and std must be vectors of equal length")
        if np.any(self.std <= 0):
            raise DataError("normalizer std entries must be positive")
        if not self.clip_sigmas > 0:
            raise UsageError(f"clip_sigmas must be > 0, got {self.clip_sigmas}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def apply(self, points: np.ndarray) -> np.ndarray:
        z = (np.asarray(points, dtype=np.float64) - self.mean) / self.std
        return np.clip(z, -self.clip_sigmas, self.clip_sigmas)

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "clip_sigmas": self.clip_sigmas}

    @classmethod
    def from_dict(cls, values: dict) -> Normalizer:
        return cls(np.array(values["mean"]), np.array(values["std"]), values["clip_sigmas"])


def fit_normalizer(points: np.ndarray | TabularDataset, clip_sigmas: float = 5.0) -> Normalizer:
    """
    Fit mean/std per feature.

    Raises:
        DataError: With fewer than two rows, or a constant feature.
    """
    if isinstance(points, TabularDataset):
        points = points.points
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise DataError("normalizer needs at least two rows")
    std = points.std(axis=0)
    constant = np.flatnonzero(std == 0)
    if constant.size:
        raise DataError(f"feature {int(constant[0])} is constant; cannot standardize")
    return Normalizer(points.mean(axis=0), std, clip_sigmas)


# =============================================================================
# SYNTHETIC COUPLED DATA
# =============================================================================

@dataclass
class SyntheticSpec:
    """Recipe for a coupled pair of datasets with known correspondence."""
    generator: str = "gmm_rotate"
    n_samples: int = 5000
    dim: int = 2
    components: int = 2
    cluster_std: float = 0.5
    separation: float = 6.0
    noise: float = 0.0
    angle_deg: float = 90.0
    weight: list[list[float]] | None = None
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise UsageError(f"unknown generator {self.generator!r}; choose from {', '.join(GENERATORS)}")
        if self.n_samples < 1 or self.dim < 1 or self.components < 1:
            raise UsageError("n_samples, dim and components must be positive")
        if self.cluster_std <= 0 or self.noise < 0 or self.separation < 6.0:
            raise UsageError("cluster_std must be > 0, noise >= 0, separation >= 6 cluster stds")
        if self.generator in ("gmm_rotate", "checkerboard") and self.dim != 2:
            raise UsageError(f"{self.generator} is two-dimensional")
        if self.weight is not None:
            w = np.asarray(self.weight, dtype=np.float64)
            if w.shape != (self.dim, self.dim):
                raise UsageError(f"weight must be {self.dim}x{self.dim}, got {w.shape}")


@dataclass
class SyntheticPair:
    """Two unpaired datasets plus the ground truth that metrics may use."""
    x: TabularDataset
    y: TabularDataset
    correspondence: np.ndarray
    labels: np.ndarray


def gmm_centers(spec: SyntheticSpec) -> np.ndarray:
    """Cluster centres on a circle, adjacent centres `separation` stds apart."""
    if spec.components == 1:
        return np.zeros((1, 2))
    radius = spec.separation * spec.cluster_std / (2.0 * math.sin(math.pi / spec.components))
    angles = 2.0 * math.pi * np.arange(spec.components) / spec.components
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def rotation(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def _checkerboard(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform points on the dark cells of a 4x4 board over [-2, 2]^2."""
    dark = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
    cells = rng.integers(0, len(dark), size=n)
    corners = np.array([dark[c] for c in cells], dtype=np.float64) - 2.0
    return corners + rng.uniform(0.0, 1.0, size=(n, 2)), cells


def synth_coupled(spec: SyntheticSpec) -> SyntheticPair:
    """
    Generate a coupled pair of datasets.

    gmm_rotate:    X from a 2D mixture, Y = R(angle) X + noise
    linear_map:    X from a d-dimensional mixture, Y = W X + noise
                   (W random orthogonal unless given)
    checkerboard:  X uniform on dark cells, Y = -X + noise (dark maps to dark)

    Row orders of X and Y are shuffled independently unless spec.shuffle is
    off; correspondence[i] is the row of Y matching row i of X.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples

    if spec.generator == "checkerboard":
        x, labels = _checkerboard(rng, n)
        y = -x
    else:
        if spec.generator == "gmm_rotate":
            centers = gmm_centers(spec)
        else:
            centers = rng.normal(0.0, spec.separation * spec.cluster_std / 2.0, size=(spec.components, spec.dim))
        labels = rng.integers(0, spec.components, size=n)
        x = centers[labels] + rng.normal(0.0, spec.cluster_std, size=(n, spec.dim))
        if spec.generator == "gmm_rotate":
            y = x @ rotation(spec.angle_deg).T
        else:
            if spec.weight is not None:
                weight = np.asarray(spec.weight, dtype=np.float64)
            else:
                weight, _ = np.linalg.qr(rng.normal(size=(spec.dim, spec.dim)))
            y = x @ weight.T
    if spec.noise > 0:
        y = y + rng.normal(0.0, spec.noise, size=y.shape)

    if spec.shuffle:
        order_x = rng.permutation(n)
        order_y = rng.permutation(n)
    else:
        order_x = order_y = np.arange(n)
    # Row i of the shuffled X is original sample order_x[i]; find it in Y.
    position_in_y = np.empty(n, dtype=np.int64)
    position_in_y[order_y] = np.arange(n)
    correspondence = position_in_y[order_x]

    labels = labels.astype(np.int64)
    return SyntheticPair(
        x=TabularDataset(x[order_x], labels=labels[order_x], name=f"{spec.generator}-x"),
        y=TabularDataset(y[order_y], labels=labels[order_y], name=f"{spec.generator}-y"),
        correspondence=correspondence,
        labels=labels[order_x],
    )


# =============================================================================
# CHECKPOINTS
# =============================================================================

SECTIONS = ("params", "ema", "optimizer")


@dataclass
class Checkpoint:
    """Model metadata plus named float64 parameter blocks."""
    metadata: dict
    blocks: dict[str, np.ndarray]
    ema_blocks: dict[str, np.ndarray] | None = None
    optimizer_blocks: dict[str, np.ndarray] | None = None
    version: int = FORMAT_VERSION

    def sections(self) -> list[tuple[str, dict[str, np.ndarray]]]:
        out = [("params", self.blocks)]
        if self.ema_blocks is not None:
            out.append(("ema", self.ema_blocks))
        if self.optimizer_blocks is not None:
            out.append(("optimizer", self.optimizer_blocks))
        return out


def save_checkpoint(path: Path | str, checkpoint: Checkpoint) -> None:
    """Write a checkpoint; identical inputs produce identical bytes."""
    table = []
    payload = []
    for section, blocks in checkpoint.sections():
        for name, array in blocks.items():
            array = np.ascontiguousarray(array, dtype="<f8")
            table.append({"section": section, "name": name, "shape": list(array.shape)})
            payload.append(array.tobytes())
    document = json.dumps(
        {"metadata": checkpoint.metadata, "blocks": table},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(bytes([checkpoint.version]))
        handle.write(_LENGTH.pack(len(document)))
        handle.write(document)
        for chunk in payload:
            handle.write(chunk)


def load_checkpoint(path: Path | str) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        CheckpointMagicError: The file is not a checkpoint.
        CheckpointTruncatedError: The file ends early.
        CheckpointVersionError: Unsupported format version.
        CheckpointError: The metadata document lacks or mangles a required field.
        DataError: Unreadable file or trailing garbage.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None

    head = raw[:len(MAGIC)]
    if head != MAGIC:
        if len(raw) < len(MAGIC) and MAGIC.startswith(raw):
            raise CheckpointTruncatedError(f"{path}: file ends inside the magic bytes")
        raise CheckpointMagicError(f"{path}: not a checkpoint (bad magic bytes)")
    offset = len(MAGIC)
    if len(raw) < offset + 1 + _LENGTH.size:
        raise CheckpointTruncatedError(f"{path}: file ends inside the header")
    version = raw[offset]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (length,) = _LENGTH.unpack_from(raw, offset + 1)
    offset += 1 + _LENGTH.size
    if len(raw) < offset + length:
        raise CheckpointTruncatedError(f"{path}: file ends inside the metadata document")
    try:
        document = json.loads(raw[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt metadata document: {e}") from None
    offset += length

    sections: dict[str, dict[str, np.ndarray]] = {}
    try:
        metadata = document["metadata"]
        for entry in document["blocks"]:
            shape = tuple(int(n) for n in entry["shape"])
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if len(raw) < offset + nbytes:
                raise CheckpointTruncatedError(f"{path}: file ends inside block '{entry['name']}'")
            array = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
            sections.setdefault(entry["section"], {})[entry["name"]] = array.astype(np.float64)
            offset += nbytes
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed metadata document ({type(e).__name__}: {e})") from None
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} unexpected trailing bytes")

    return Checkpoint(
        metadata=metadata,
        blocks=sections.get("params", {}),
        ema_blocks=sections.get("ema"),
        optimizer_blocks=sections.get("optimizer"),
        version=version,
    )
