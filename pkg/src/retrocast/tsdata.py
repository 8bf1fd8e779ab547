"""Series ingestion, instance normalization, patching and windowing.

Multivariate inputs are split into one univariate ``Series`` per channel at
load time; nothing downstream ever sees more than one channel at once.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import ConfigError

log = logging.getLogger(__name__)

EPS_STD = 1e-8
MANIFEST_VERSION = 1

# Incremented whenever a series is too short to yield any window.
warning_counts = Counter()


class IngestError(ValueError):
    pass


@dataclass(eq=False)
class Series:
    values: np.ndarray
    channel_id: str
    dataset_id: str
    domain: str
    frequency: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigError("Series values must be one-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise IngestError(f"{self.dataset_id}/{self.channel_id}: non-finite values")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


@dataclass(eq=False)
class WindowPair:
    x: np.ndarray
    y: np.ndarray
    norm_stats: NormStats
    source: tuple  # (dataset_id, channel_id, start_index)

    @property
    def dataset_id(self):
        return self.source[0]


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    # Test windows may take their lookback from before the test border.
    border_overlap: bool = True


@dataclass(frozen=True)
class SplitRanges:
    train: tuple
    val: tuple
    test: tuple


@dataclass
class DatasetSchema:
    """What ``load_csv`` needs to know about one file."""

    dataset_id: str
    domain: str
    value_columns: list = field(default_factory=list)
    timestamp_column: str | None = None
    frequency: str = ""


def _interpolate_missing(col, name):
    missing = np.isnan(col)
    if missing.all():
        raise IngestError(f"column {name!r} has no values")
    if missing.any():
        idx = np.arange(len(col))
        # np.interp holds the nearest valid value at the edges.
        col = col.copy()
        col[missing] = np.interp(idx[missing], idx[~missing], col[~missing])
    return col


def _parse_cell(cell, path, lineno, name):
    s = cell.strip()
    if s == "" or s.lower() in ("nan", "na", "null"):
        return math.nan
    try:
        v = float(s)
    except ValueError:
        raise IngestError(f"{path}:{lineno}: non-numeric value {cell!r} in column {name!r}") from None
    if math.isinf(v):
        raise IngestError(f"{path}:{lineno}: infinite value in column {name!r}")
    return v


def load_csv(path, schema, channel_prefix=""):
    """Read a headered CSV into one ``Series`` per value column.

    Blank or ``nan`` cells are filled by linear interpolation (edges take the
    nearest observed value). The timestamp column is skipped.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        columns = list(schema.value_columns) or [h for h in header if h != schema.timestamp_column]
        missing = [c for c in columns if c not in header]
        if missing:
            raise IngestError(f"{path}: columns {missing} not in header {header}")
        positions = [header.index(c) for c in columns]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(header):
                raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append([_parse_cell(row[p], path, lineno, c) for p, c in zip(positions, columns)])
    if not rows:
        raise IngestError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    out = []
    for j, name in enumerate(columns):
        out.append(
            Series(
                values=_interpolate_missing(data[:, j], name),
                channel_id=f"{channel_prefix}{name}",
                dataset_id=schema.dataset_id,
                domain=schema.domain,
                frequency=schema.frequency,
            )
        )
    return out


def load_manifest(path):
    """Load every dataset listed in a JSON manifest.

    Schema (``version`` 1)::

        {"version": 1,
         "datasets": [{"dataset_id": str, "domain": str, "frequency": str,
                       "files": [relative paths], "value_columns": [str],
                       "timestamp_column": str | null}]}
    """
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise IngestError(f"no such manifest: {path}") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise IngestError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    series = []
    for ds in manifest["datasets"]:
        schema = DatasetSchema(
            dataset_id=ds["dataset_id"],
            domain=ds["domain"],
            value_columns=list(ds.get("value_columns", [])),
            timestamp_column=ds.get("timestamp_column"),
            frequency=ds.get("frequency", ""),
        )
        files = ds["files"]
        for f in files:
            prefix = f"{Path(f).stem}/" if len(files) > 1 else ""
            series.extend(load_csv(path.parent / f, schema, channel_prefix=prefix))
    return series


def split_channels(matrix, dataset_id, domain, channel_ids=None, frequency=""):
    """Channel-independent view of a ``(length, channels)`` array."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ConfigError("expected a (length, channels) array")
    ids = channel_ids or [str(c) for c in range(matrix.shape[1])]
    return [
        Series(matrix[:, c].copy(), ids[c], dataset_id, domain, frequency) for c in range(matrix.shape[1])
    ]


def instance_normalize(x, eps=EPS_STD):
    """Zero-mean, unit-(population)-std scaling of one window."""
    x = np.asarray(x, dtype=np.float64)
    mean = float(x.mean())
    std = max(float(np.sqrt(np.mean((x - mean) ** 2))), eps)
    return (x - mean) / std, NormStats(mean, std)


def normalize_rows(windows, eps=EPS_STD):
    """Row-wise ``instance_normalize`` for a stack of windows."""
    windows = np.asarray(windows, dtype=np.float64)
    mean = windows.mean(axis=1, keepdims=True)
    std = np.maximum(np.sqrt(np.mean((windows - mean) ** 2, axis=1, keepdims=True)), eps)
    return (windows - mean) / std


def denormalize(yn, stats):
    return np.asarray(yn, dtype=np.float64) * stats.std + stats.mean


def patchify(xn, patch_len, stride=None):
    """Cut a window into ``n = (sl - patch_len) / stride + 1`` patches (rows)."""
    xn = np.asarray(xn, dtype=np.float64)
    stride = patch_len if stride is None else stride
    sl = xn.shape[-1]
    if patch_len < 1 or stride < 1 or sl < patch_len or (sl - patch_len) % stride:
        raise ConfigError(f"cannot patch length {sl} with patch_len={patch_len}, stride={stride}")
    if stride == patch_len:
        return xn.reshape(*xn.shape[:-1], sl // patch_len, patch_len).copy()
    view = np.lib.stride_tricks.sliding_window_view(xn, patch_len, axis=-1)
    return view[..., ::stride, :].copy()


def num_patches(sl, patch_len, stride=None):
    stride = patch_len if stride is None else stride
    if sl < patch_len or (sl - patch_len) % stride:
        raise ConfigError(f"cannot patch length {sl} with patch_len={patch_len}, stride={stride}")
    return (sl - patch_len) // stride + 1


def window_count(length, sl, fl, stride=1):
    if length < sl + fl:
        return 0
    return (length - sl - fl) // stride + 1


def sliding_windows(series, sl, fl, stride=1, start=0, stop=None, eps=EPS_STD):
    """Lookback/horizon pairs whose full span lies in ``[start, stop)``."""
    stop = len(series) if stop is None else stop
    n = window_count(stop - start, sl, fl, stride)
    if n == 0:
        warning_counts["short_series"] += 1
        log.warning("%s/%s: span %d shorter than sl+fl=%d", series.dataset_id, series.channel_id,
                    stop - start, sl + fl)
        return []
    pairs = []
    for i in range(n):
        s = start + i * stride
        x = series.values[s : s + sl]
        _, stats = instance_normalize(x, eps)
        pairs.append(
            WindowPair(
                x=x.copy(),
                y=series.values[s + sl : s + sl + fl].copy(),
                norm_stats=stats,
                source=(series.dataset_id, series.channel_id, s),
            )
        )
    return pairs


def split(length, spec):
    """Chronological ``[start, stop)`` ranges for train / val / test."""
    fracs = (spec.train, spec.val, spec.test)
    if any(f < 0 for f in fracs) or sum(fracs) > 1.0 + 1e-12:
        raise ConfigError(f"invalid split fractions {fracs}")
    b1 = int(round(length * spec.train))
    b2 = int(round(length * (spec.train + spec.val)))
    b3 = int(round(length * (spec.train + spec.val + spec.test)))
    if b1 <= 0:
        raise ConfigError(f"split leaves an empty training range for length {length}")
    return SplitRanges((0, b1), (b1, b2), (b2, b3))


def split_windows(series, spec, sl, fl, part, stride=1):
    """Windows for one split part (``"train"``, ``"val"`` or ``"test"``).

    Training windows never cross a split border. Val/test windows keep their
    horizon inside the part; with ``spec.border_overlap`` their lookback may
    reach back into the preceding data.
    """
    ranges = split(len(series), spec)
    start, stop = getattr(ranges, part)
    if stop <= start:
        return []
    if part != "train" and spec.border_overlap:
        start = max(0, start - sl)
    return sliding_windows(series, sl, fl, stride, start=start, stop=stop)
