# data.py — labeled tabular anomaly datasets
# Credit-card style CSV + SMD directory loaders, synthetic fixtures, standardize, split

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import ContractError, DataFormatError

logger = logging.getLogger(__name__)

# ----------------- tunables -----------------
DEFAULT_LABEL_COLUMN = "Class"
ANOMALY_SHIFT = 4.0        # synthetic anomalies: offset along a random unit direction
ANOMALY_SCALE = 2.0        # synthetic anomalies: std of the spread around the offset
# --------------------------------------------


# ===== Data classes =====
@dataclass(frozen=True)
class Dataset:
    features: np.ndarray                      # samples x dims, float64
    labels: np.ndarray                        # 0 = normal, 1 = anomaly
    name: str = "dataset"
    feature_names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels).astype(np.int8)
        if x.ndim != 2:
            raise ContractError(f"{self.name}: features must be 2-D, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ContractError(f"{self.name}: {y.shape[0]} labels for {x.shape[0]} rows")
        if not np.all(np.isin(y, (0, 1))):
            raise ContractError(f"{self.name}: labels must be 0 or 1")
        if not np.all(np.isfinite(x)):
            raise ContractError(f"{self.name}: features must be finite")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"f{j}" for j in range(x.shape[1])))

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def dims(self) -> int:
        return int(self.features.shape[1])

    @property
    def anomaly_rate(self) -> float:
        return float(self.labels.mean()) if self.n else 0.0

    def subset(self, idx, name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], name or self.name, self.feature_names)


@dataclass(frozen=True)
class StandardizationParams:
    mean: np.ndarray
    scale: np.ndarray

    @property
    def dims(self) -> int:
        return int(self.mean.shape[0])


@dataclass(frozen=True)
class Splits:
    train: Dataset
    calib: Dataset
    eval: Dataset
    params: StandardizationParams


# ---------- helpers ----------
def _pick(columns: Iterable[str], wanted: str) -> Optional[str]:
    """Tolerant column lookup (case and surrounding whitespace ignored)."""
    for c in columns:
        if c.strip().lower() == wanted.strip().lower():
            return c
    return None


def _read_rows(path: Path, header: bool) -> Tuple[List[str], List[List[str]], List[int]]:
    """
    Tokenize a comma-separated file. Returns (header, rows, line numbers).
    Blank lines are skipped; every row must match the header's field count.
    """
    if not path.is_file():
        raise DataFormatError(f"no such file: {path}")

    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        line = raw.count(b"\n", 0, e.start) + 1
        raise DataFormatError(f"{path.name}: invalid UTF-8 byte 0x{raw[e.start]:02x}", line=line) from e

    rows: List[List[str]] = []
    lines: List[int] = []
    head: List[str] = []
    reader = csv.reader(io.StringIO(text, newline=""))
    for rec in reader:
        if not rec or all(not c.strip() for c in rec):
            continue
        if header and not head:
            head = [c.strip() for c in rec]
            continue
        width = len(head) if head else (len(rows[0]) if rows else len(rec))
        if len(rec) != width:
            raise DataFormatError(f"expected {width} fields, found {len(rec)}", line=reader.line_num)
        rows.append([c.strip() for c in rec])
        lines.append(reader.line_num)

    if header and not head:
        raise DataFormatError(f"{path.name}: empty file, header row missing")
    return head, rows, lines


def _to_float(cell: str) -> float:
    try:
        return float(cell)
    except ValueError:
        return math.nan


def _parse_floats(cells: np.ndarray) -> np.ndarray:
    """Correctly rounded decimal parse; unparseable cells come back as NaN."""
    try:
        return cells.astype(np.float64)
    except ValueError:
        return np.vectorize(_to_float, otypes=[np.float64])(cells)


def _numeric_frame(frame: pd.DataFrame, lines: Sequence[int], what: str) -> np.ndarray:
    values = _parse_floats(frame.to_numpy(dtype=object))
    bad = ~np.isfinite(values)
    if bad.any():
        r, c = map(int, np.argwhere(bad)[0])
        raise DataFormatError(
            f"non-numeric {what} {frame.iat[r, c]!r} in column {frame.columns[c]!r}", line=lines[r]
        )
    return values


def _parse_labels(raw: pd.Series, lines: Sequence[int]) -> np.ndarray:
    values = _parse_floats(raw.to_numpy(dtype=object))
    bad = ~np.isin(values, (0.0, 1.0))
    if bad.any():
        r = int(np.flatnonzero(bad)[0])
        raise DataFormatError(f"unknown label value {raw.iat[r]!r} (expected 0 or 1)", line=lines[r])
    return values.astype(np.int8)


def _require_mixed(d: Dataset) -> Dataset:
    if not 0.0 < d.anomaly_rate < 1.0:
        raise DataFormatError(f"{d.name}: anomaly rate {d.anomaly_rate:.4f} must lie strictly between 0 and 1")
    return d


# ---------- loaders ----------
def load_labeled_csv(path: Union[str, Path], label_column: Union[str, int] = DEFAULT_LABEL_COLUMN) -> Dataset:
    """
    Load a credit-card style CSV: header row, one 0/1 label column, decimal
    features in every other column (kept in file order).
    """
    path = Path(path)
    head, rows, lines = _read_rows(path, header=True)
    frame = pd.DataFrame(rows, columns=head, dtype=str)

    if isinstance(label_column, int):
        if not 0 <= label_column < len(head):
            raise DataFormatError(f"label column index {label_column} out of range for {len(head)} columns")
        label_name = head[label_column]
    else:
        label_name = _pick(head, label_column)
        if label_name is None:
            raise DataFormatError(f"label column {label_column!r} not found in header {head}")

    feature_cols = [c for c in head if c != label_name]
    if not feature_cols:
        raise DataFormatError(f"{path.name}: zero feature columns besides label {label_name!r}")
    if not rows:
        raise DataFormatError(f"{path.name}: no data rows")

    x = _numeric_frame(frame[feature_cols], lines, "feature")
    y = _parse_labels(frame[label_name], lines)
    d = Dataset(x, y, name=path.stem, feature_names=tuple(feature_cols))
    logger.info("loaded %s: %d rows, %d features, anomaly rate %.4f", path, d.n, d.dims, d.anomaly_rate)
    return _require_mixed(d)


def save_labeled_csv(d: Dataset, path: Union[str, Path], label_column: str = DEFAULT_LABEL_COLUMN) -> None:
    df = pd.DataFrame(d.features, columns=list(d.feature_names))
    df[label_column] = d.labels.astype(int)
    df.to_csv(path, index=False, float_format="%.17g")


def load_smd(directory: Union[str, Path], name: str) -> Dataset:
    """SMD convention: `<name>.txt` feature rows plus `<name>_label.txt`, one 0/1 per line."""
    directory = Path(directory)
    _, rows, lines = _read_rows(directory / f"{name}.txt", header=False)
    _, label_rows, label_lines = _read_rows(directory / f"{name}_label.txt", header=False)

    if len(rows) != len(label_rows):
        raise DataFormatError(f"{name}: {len(rows)} feature rows but {len(label_rows)} labels")
    if not rows:
        raise DataFormatError(f"{name}: no data rows")

    frame = pd.DataFrame(rows, dtype=str)
    frame.columns = [f"f{j}" for j in range(frame.shape[1])]
    x = _numeric_frame(frame, lines, "feature")
    y = _parse_labels(pd.Series([r[0] for r in label_rows], dtype=str), label_lines)
    d = Dataset(x, y, name=name)
    logger.info("loaded SMD machine %s: %d rows, %d features, anomaly rate %.4f", name, d.n, d.dims, d.anomaly_rate)
    return _require_mixed(d)


# ---------- synthetic fixtures ----------
def generate_synthetic(dims: int, n: int, anomaly_rate: float, seed: int) -> Dataset:
    """
    Normals ~ N(0, I). Anomalies sit ANOMALY_SHIFT units out along one random
    direction with ANOMALY_SCALE times the spread. Row order is shuffled.
    """
    if dims < 2:
        raise ContractError(f"dims must be >= 2, got {dims}")
    if n < 10:
        raise ContractError(f"n must be >= 10, got {n}")
    if not 0.0 < anomaly_rate < 0.5:
        raise ContractError(f"anomaly_rate must lie in (0, 0.5), got {anomaly_rate}")

    rng = np.random.default_rng(seed)
    n_anom = max(1, int(round(anomaly_rate * n)))

    direction = rng.standard_normal(dims)
    direction /= np.linalg.norm(direction)

    normals = rng.standard_normal((n - n_anom, dims))
    anomalies = ANOMALY_SHIFT * direction + ANOMALY_SCALE * rng.standard_normal((n_anom, dims))

    x = np.vstack([normals, anomalies])
    y = np.concatenate([np.zeros(n - n_anom, dtype=np.int8), np.ones(n_anom, dtype=np.int8)])
    order = rng.permutation(n)
    return Dataset(x[order], y[order], name=f"synthetic-d{dims}-n{n}")


# ---------- preprocessing ----------
def fit_standardization(d: Dataset) -> StandardizationParams:
    mean = d.features.mean(axis=0)
    scale = d.features.std(axis=0)            # population std
    scale = np.where(scale > 0.0, scale, 1.0)
    return StandardizationParams(mean=mean, scale=scale)


def standardize(d: Dataset, params: Optional[StandardizationParams] = None) -> Tuple[Dataset, StandardizationParams]:
    """Apply `params`, or fit them on `d` first when none are given."""
    if params is None:
        params = fit_standardization(d)
    elif params.dims != d.dims:
        raise ContractError(f"standardization params have {params.dims} features, dataset has {d.dims}")
    x = (d.features - params.mean) / params.scale
    return Dataset(x, d.labels, d.name, d.feature_names), params


def destandardize(x: np.ndarray, params: StandardizationParams) -> np.ndarray:
    return x * params.scale + params.mean


def split(d: Dataset, train_frac: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0.0 < train_frac < 1.0:
        raise ContractError(f"train_frac must lie in (0, 1), got {train_frac}")
    n_train = int(math.floor(train_frac * d.n + 0.5))
    if n_train == 0 or n_train == d.n:
        raise ContractError(f"split of {d.n} rows at {train_frac} leaves one side empty")
    order = np.random.default_rng(seed).permutation(d.n)
    return d.subset(order[:n_train], f"{d.name}-train"), d.subset(order[n_train:], f"{d.name}-test")


def normals(d: Dataset) -> Dataset:
    return d.subset(np.flatnonzero(d.labels == 0), f"{d.name}-normal")


def prepare_splits(d: Dataset, train_frac: float, calib_frac: float, seed: int) -> Splits:
    """
    train / calibration / evaluation partition. The held-out evaluation side
    comes from `split(d, train_frac)`; the calibration set is carved off the
    training side. Standardization is fitted on the training normals only.
    """
    pool, evaluation = split(d, train_frac, seed)
    train, calib = split(pool, 1.0 - calib_frac, seed + 1)
    _, params = standardize(normals(train))
    train, _ = standardize(train, params)
    calib, _ = standardize(calib, params)
    evaluation, _ = standardize(evaluation, params)
    return Splits(train=train, calib=calib, eval=evaluation, params=params)
