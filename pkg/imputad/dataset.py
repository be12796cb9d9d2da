import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from imputad.errors import DataError

logger = logging.getLogger(__name__)

LABEL_COLUMN = "label"
SCALE_FLOOR = 1e-8


def _frozen(array: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RawSeries:
    """An L×K multivariate series with optional per-timestamp 0/1 labels."""
    values: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = "series"
    replaced_cells: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DataError(f"series '{self.name}' must be a non-empty L×K matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError(f"series '{self.name}' contains non-finite values after ingestion")
        object.__setattr__(self, "values", _frozen(values))
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (values.shape[0],):
                raise DataError(
                    f"series '{self.name}' has {values.shape[0]} rows but {labels.size} labels"
                )
            object.__setattr__(self, "labels", _frozen(labels, dtype=np.int64))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormStats:
    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        center = _frozen(self.center)
        scale = _frozen(self.scale)
        if center.shape != scale.shape or center.ndim != 1:
            raise DataError(f"normalizer center/scale shapes differ: {center.shape} vs {scale.shape}")
        if np.any(scale <= 0):
            raise DataError("normalizer scale must be strictly positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scale", scale)

    @property
    def n_features(self) -> int:
        return self.center.shape[0]

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.center) / self.scale

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.scale + self.center

    def to_dict(self) -> Dict[str, List[float]]:
        return {"center": self.center.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "NormStats":
        return cls(center=np.asarray(data["center"]), scale=np.asarray(data["scale"]))


@dataclass(frozen=True)
class MtsWindow:
    """A normalized W×K slice of a series starting at ``start_index``."""
    values: np.ndarray
    start_index: int
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        if self.labels is not None:
            object.__setattr__(self, "labels", _frozen(self.labels, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class WindowSet:
    """
    Windows cut from one series plus the coverage map.

    ``coverage[l]`` is the index (into ``windows``) of the window designated as
    the score source of timestamp ``l``: the last window covering it.
    """
    windows: Tuple[MtsWindow, ...]
    coverage: np.ndarray = field(repr=False)
    series_length: int = 0

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    def stacked(self) -> np.ndarray:
        """Window values as a (n_windows, W, K) array."""
        return np.stack([w.values for w in self.windows])

    @property
    def starts(self) -> List[int]:
        return [w.start_index for w in self.windows]


def _read_meta(path: str) -> Dict[str, str]:
    meta_path = path + ".meta"
    if not os.path.exists(meta_path):
        raise DataError(f"binary file {path} has no sidecar metadata file {meta_path}")
    meta = {}
    with open(meta_path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"malformed metadata line in {meta_path}: {line!r}")
            meta[key.strip()] = value.strip()
    for key in ("rows", "cols", "dtype"):
        if key not in meta:
            raise DataError(f"metadata file {meta_path} is missing '{key}'")
    return meta


def write_binary(path: str, values: np.ndarray, dtype: str = "float64", labels: Optional[np.ndarray] = None):
    """Write a dense row-major matrix plus its ``key=value`` sidecar metadata."""
    matrix = np.asarray(values, dtype=dtype)
    if labels is not None:
        matrix = np.column_stack([matrix, np.asarray(labels, dtype=dtype)])
    np.ascontiguousarray(matrix).tofile(path)
    with open(path + ".meta", "w", encoding="utf-8") as f:
        f.write(f"rows={matrix.shape[0]}\ncols={matrix.shape[1]}\ndtype={dtype}\n")
        f.write(f"label_column={1 if labels is not None else 0}\n")


def _check_labels(labels: np.ndarray, source: str) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isin(labels, (0.0, 1.0))):
        bad = sorted(set(np.unique(labels[~np.isin(labels, (0.0, 1.0))]).tolist()))[:5]
        raise DataError(f"label column non-binary in {source} (found values {bad})")
    return labels.astype(np.int64)


def _fill_nonfinite(frame: pd.DataFrame) -> Tuple[np.ndarray, int]:
    frame = frame.apply(pd.to_numeric, errors="coerce").astype(np.float64)
    frame = frame.replace([np.inf, -np.inf], np.nan)
    replaced = int(frame.isna().to_numpy().sum())
    filled = frame.ffill().fillna(0.0)
    return filled.to_numpy(dtype=np.float64), replaced


def load_raw(path: str, format: Optional[str] = None, name: Optional[str] = None) -> RawSeries:
    """
    Load a raw multivariate series from disk.

    Args:
        path: CSV file (header ``f0,...,f{K-1}[,label]``) or binary matrix with a
            ``<path>.meta`` sidecar.
        format: ``"csv"`` or ``"binary"``; inferred from the suffix when omitted.
        name: Identifier for the series, defaults to the file stem.

    Returns:
        RawSeries with non-finite cells forward-filled, then zero-filled.
    """
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    if format is None:
        format = "csv" if path.lower().endswith(".csv") else "binary"
    name = name or os.path.splitext(os.path.basename(path))[0]

    labels = None
    if format == "csv":
        try:
            frame = pd.read_csv(path, encoding="utf-8")
        except pd.errors.EmptyDataError:
            raise DataError(f"zero rows in {path}")
        if frame.shape[0] == 0:
            raise DataError(f"zero rows in {path}")
        if LABEL_COLUMN in frame.columns:
            raw_labels = pd.to_numeric(frame.pop(LABEL_COLUMN), errors="coerce").to_numpy()
            labels = _check_labels(raw_labels, path)
        values, replaced = _fill_nonfinite(frame)
    elif format == "binary":
        meta = _read_meta(path)
        rows, cols = int(meta["rows"]), int(meta["cols"])
        if rows == 0:
            raise DataError(f"zero rows in {path}")
        matrix = np.fromfile(path, dtype=np.dtype(meta["dtype"]))
        if matrix.size != rows * cols:
            raise DataError(f"{path} holds {matrix.size} values, metadata declares {rows}x{cols}")
        matrix = matrix.reshape(rows, cols).astype(np.float64)
        if meta.get("label_column", "0") in ("1", "true", "yes"):
            labels = _check_labels(matrix[:, -1], path)
            matrix = matrix[:, :-1]
        values, replaced = _fill_nonfinite(pd.DataFrame(matrix))
    else:
        raise DataError(f"unknown series format '{format}' (expected csv or binary)")

    if values.shape[1] == 0:
        raise DataError(f"no feature columns in {path}")

    if replaced:
        logger.warning(
            f"Replaced {replaced} non-finite cells in {path}",
            extra={'event_type': 'nonfinite_replaced', 'path': path, 'replaced_cells': replaced}
        )
    series = RawSeries(values=values, labels=labels, name=name, replaced_cells=replaced)
    logger.info(
        f"Loaded series {name}",
        extra={
            'event_type': 'dataset_loaded',
            'path': path,
            'rows': series.length,
            'features': series.n_features,
            'has_labels': labels is not None,
        }
    )
    return series


def load_label_file(path: str) -> np.ndarray:
    """Read a single 0/1 column, with or without a header row."""
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    frame = pd.read_csv(path, header=None, encoding="utf-8")
    if frame.shape[1] != 1:
        raise DataError(f"label file {path} must have exactly one column, found {frame.shape[1]}")
    column = pd.to_numeric(frame.iloc[:, 0], errors="coerce")
    # a non-numeric first cell is a header
    if column.size and pd.isna(column.iloc[0]):
        column = column.iloc[1:]
    if column.size == 0:
        raise DataError(f"zero rows in {path}")
    return _check_labels(column.to_numpy(), path)


def fit_normalizer(train: RawSeries) -> NormStats:
    """Per-feature z-score statistics from the training split (population std, floored)."""
    if train.length < 2:
        raise DataError(f"normalizer needs at least 2 rows, series '{train.name}' has {train.length}")
    center = train.values.mean(axis=0)
    scale = np.maximum(train.values.std(axis=0), SCALE_FLOOR)
    return NormStats(center=center, scale=scale)


def window_starts(length: int, window: int, stride: Optional[int] = None) -> List[int]:
    stride = stride or window
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def windowize(series: RawSeries, stats: NormStats, window: int, stride: Optional[int] = None) -> WindowSet:
    """
    Cut a series into normalized detection windows.

    Consecutive windows start every ``stride`` timestamps (default: ``window``,
    i.e. non-overlapping). A remainder is covered by one extra window aligned to
    the series end.
    """
    if window < 1:
        raise DataError(f"window must be positive, got {window}")
    if window > series.length:
        raise DataError(f"window {window} exceeds series length {series.length}")
    if stats.n_features != series.n_features:
        raise DataError(
            f"normalizer has {stats.n_features} features, series '{series.name}' has {series.n_features}"
        )
    normalized = stats.normalize(series.values)
    coverage = np.full(series.length, -1, dtype=np.int64)
    windows = []
    for idx, start in enumerate(window_starts(series.length, window, stride)):
        labels = None if series.labels is None else series.labels[start:start + window]
        windows.append(MtsWindow(values=normalized[start:start + window], start_index=start, labels=labels))
        coverage[start:start + window] = idx
    coverage.setflags(write=False)
    return WindowSet(windows=tuple(windows), coverage=coverage, series_length=series.length)


@dataclass(frozen=True)
class DatasetSplits:
    name: str
    train: RawSeries
    test: RawSeries


def _split_path(root: str, split: str) -> str:
    for suffix in (".csv", ".bin"):
        candidate = os.path.join(root, split + suffix)
        if os.path.exists(candidate):
            return candidate
    return os.path.join(root, split + ".csv")


def check_layout(root: str) -> List[str]:
    """Return every layout violation of a dataset directory (empty when valid)."""
    if not os.path.isdir(root):
        return [f"dataset directory does not exist: {root}"]
    problems = []
    for split in ("train", "test", "test_label"):
        if not os.path.exists(_split_path(root, split)):
            problems.append(f"missing {split}.csv in {root}")
    return problems


def load_dataset_dir(root: str) -> DatasetSplits:
    """Load ``<name>/train.csv``, ``<name>/test.csv`` and ``<name>/test_label.csv``."""
    problems = check_layout(root)
    if problems:
        raise DataError("; ".join(problems))
    name = os.path.basename(os.path.normpath(root))
    train = load_raw(_split_path(root, "train"), name=f"{name}/train")
    test = load_raw(_split_path(root, "test"), name=f"{name}/test")
    labels = load_label_file(_split_path(root, "test_label"))
    if labels.size != test.length:
        raise DataError(f"test_label has {labels.size} rows, test split has {test.length}")
    if train.n_features != test.n_features:
        raise DataError(f"train has {train.n_features} features, test has {test.n_features}")
    test = RawSeries(values=test.values, labels=labels, name=test.name, replaced_cells=test.replaced_cells)
    return DatasetSplits(name=name, train=train, test=test)
