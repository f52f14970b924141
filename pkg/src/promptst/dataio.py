"""
Grid time series: the STGRID file format, chronological splitting, sliding
windows, min-max normalization and a synthetic multi-attribute generator.

STGRID layout (UTF-8, one record per line)::

    STGRID 1
    rows=2 cols=2 attributes=1 timesteps=2 interval_min=60
    pickups
    t=0 a=0 1.0,0.0,3.5,2.0
    t=1 a=0 0.0,2.0,1.0,4.0
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import (
    DataFormatError,
    EmptyDatasetError,
    MalformedHeaderError,
    NegativeValueError,
    RowCountError,
    SeriesTooShortError,
)

logger = logging.getLogger(__name__)

MAGIC = "STGRID"
FORMAT_VERSION = 1
HEADER_KEYS = ("rows", "cols", "attributes", "timesteps", "interval_min")
NORMALIZER_EPS = 1e-8
SPLIT_RATIOS = (0.7, 0.8)


@dataclass
class GridSeries:
    """Values over (time, region, attribute) on a rows x cols grid"""
    values: np.ndarray
    grid_rows: int
    grid_cols: int
    interval_minutes: int = 60
    attribute_names: List[str] = field(default_factory=list)
    # time index of row 0 within the series this one was cut from
    offset: int = 0
    # min-max scaled values may leave [0, 1] outside the training split
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataFormatError(f"series values must be (time, region, attribute), got shape {self.values.shape}")
        if self.grid_rows * self.grid_cols != self.values.shape[1]:
            raise DataFormatError(
                f"grid {self.grid_rows}x{self.grid_cols} does not match {self.values.shape[1]} regions"
            )
        if not self.attribute_names:
            self.attribute_names = [f"attr_{i}" for i in range(self.values.shape[2])]
        if len(self.attribute_names) != self.values.shape[2]:
            raise DataFormatError(
                f"{len(self.attribute_names)} attribute names for {self.values.shape[2]} attributes"
            )
        if not np.all(np.isfinite(self.values)):
            raise DataFormatError("series contains non-finite values")
        if not self.normalized and np.any(self.values < 0):
            raise NegativeValueError("series contains negative values")

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_regions(self) -> int:
        return self.values.shape[1]

    @property
    def num_attributes(self) -> int:
        return self.values.shape[2]

    def slice_time(self, start: int, stop: int) -> "GridSeries":
        return replace(self, values=self.values[start:stop].copy(), offset=self.offset + start,
                       attribute_names=list(self.attribute_names))


@dataclass
class WindowSample:
    X: np.ndarray
    Y: np.ndarray
    origin: int


def _parse_header(line: str, line_number: int, path: str) -> Dict[str, int]:
    header = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise MalformedHeaderError(f"expected key=value, got {token!r}", line_number, path)
        try:
            header[key] = int(value)
        except ValueError:
            raise MalformedHeaderError(f"{key} must be an integer, got {value!r}", line_number, path)
    missing = [key for key in HEADER_KEYS if key not in header]
    if missing:
        raise MalformedHeaderError(f"missing header fields {missing}", line_number, path)
    unknown = sorted(set(header) - set(HEADER_KEYS) - {"regions"})
    if unknown:
        raise MalformedHeaderError(f"unknown header fields {unknown}", line_number, path)
    if "regions" in header and header["regions"] != header["rows"] * header["cols"]:
        raise MalformedHeaderError(
            f"regions={header['regions']} but rows*cols={header['rows'] * header['cols']}", line_number, path
        )
    for key in HEADER_KEYS:
        if header[key] < 1:
            raise MalformedHeaderError(f"{key} must be positive", line_number, path)
    return header


def _parse_index(token: str, key: str, limit: int, line_number: int, path: str) -> int:
    prefix = f"{key}="
    if not token.startswith(prefix):
        raise DataFormatError(f"expected '{prefix}<index>', got {token!r}", line_number, path)
    try:
        index = int(token[len(prefix):])
    except ValueError:
        raise DataFormatError(f"bad index {token!r}", line_number, path)
    if not 0 <= index < limit:
        raise DataFormatError(f"{key} index {index} out of range [0, {limit})", line_number, path)
    return index


def load_grid_csv(path: str) -> GridSeries:
    """Read an STGRID file; every parse error names its line number"""
    with open(path, encoding="utf-8") as handle:
        lines = [line.rstrip("\n").rstrip("\r") for line in handle]
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) < 3:
        raise MalformedHeaderError("file too short for the three header lines", len(lines) or 1, path)

    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise MalformedHeaderError(f"expected '{MAGIC} {FORMAT_VERSION}'", 1, path)
    if magic[1] != str(FORMAT_VERSION):
        raise MalformedHeaderError(f"unsupported {MAGIC} version {magic[1]!r}", 1, path)

    header = _parse_header(lines[1], 2, path)
    rows, cols = header["rows"], header["cols"]
    regions, attributes, steps = rows * cols, header["attributes"], header["timesteps"]

    names = [name.strip() for name in lines[2].split(",")]
    if len(names) != attributes:
        raise MalformedHeaderError(f"{len(names)} attribute names for attributes={attributes}", 3, path)

    data_lines = lines[3:]
    if len(data_lines) != steps * attributes:
        raise RowCountError(
            f"expected {steps * attributes} data lines (timesteps*attributes), found {len(data_lines)}",
            3 + len(data_lines), path,
        )

    values = np.zeros((steps, regions, attributes))
    seen = np.zeros((steps, attributes), dtype=bool)
    for offset, line in enumerate(data_lines):
        line_number = offset + 4
        parts = line.split(maxsplit=2)
        if len(parts) != 3:
            raise DataFormatError("expected 't=<index> a=<index> v1,v2,...'", line_number, path)
        t = _parse_index(parts[0], "t", steps, line_number, path)
        a = _parse_index(parts[1], "a", attributes, line_number, path)
        if seen[t, a]:
            raise DataFormatError(f"duplicate record for t={t} a={a}", line_number, path)
        fields_ = parts[2].split(",")
        if len(fields_) != regions:
            raise RowCountError(f"expected {regions} values (rows*cols), found {len(fields_)}", line_number, path)
        try:
            row = np.array([float(v) for v in fields_])
        except ValueError:
            raise DataFormatError("non-numeric value", line_number, path)
        if not np.all(np.isfinite(row)):
            raise DataFormatError("non-finite value", line_number, path)
        if np.any(row < 0):
            raise NegativeValueError(f"negative value {row[row < 0][0]!r}", line_number, path)
        values[t, :, a] = row
        seen[t, a] = True

    logger.debug(f"Loaded {path}: {steps} steps, {rows}x{cols} grid, {attributes} attributes")
    return GridSeries(values, rows, cols, header["interval_min"], names)


def save_grid_csv(series: GridSeries, path: str):
    """Write ``series`` in STGRID format with round-trip float precision"""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(f"{MAGIC} {FORMAT_VERSION}\n")
        handle.write(
            f"rows={series.grid_rows} cols={series.grid_cols} attributes={series.num_attributes} "
            f"timesteps={series.num_steps} interval_min={series.interval_minutes}\n"
        )
        handle.write(",".join(series.attribute_names) + "\n")
        for t in range(series.num_steps):
            for a in range(series.num_attributes):
                values = ",".join(repr(float(v)) for v in series.values[t, :, a])
                handle.write(f"t={t} a={a} {values}\n")
    logger.debug(f"Wrote {path}")


def split(series: GridSeries, input_len: int = 12, horizon: int = 12) -> Tuple[GridSeries, GridSeries, GridSeries]:
    """Chronological 7:1:2 train/val/test split"""
    total = series.num_steps
    first, second = (int(math.floor(ratio * total)) for ratio in SPLIT_RATIOS)
    parts = (series.slice_time(0, first), series.slice_time(first, second), series.slice_time(second, total))
    needed = input_len + horizon
    for label, part in zip(("train", "val", "test"), parts):
        if part.num_steps < needed:
            raise SeriesTooShortError(
                f"{label} split has {part.num_steps} steps, need at least {needed} (T+H) "
                f"for one window; series has {total} steps"
            )
    return parts


def windows(series: GridSeries, input_len: int, horizon: int, stride: int = 1) -> List[WindowSample]:
    """Every (input, target) pair fully inside ``series``; origins are absolute time indices"""
    count = series.num_steps - input_len - horizon + 1
    samples = []
    for start in range(0, max(0, count), stride):
        samples.append(WindowSample(
            X=series.values[start:start + input_len],
            Y=series.values[start + input_len:start + input_len + horizon],
            origin=series.offset + start,
        ))
    return samples


def stack_windows(samples: Sequence[WindowSample]) -> Tuple[np.ndarray, np.ndarray]:
    """``(S, T, N, C)`` inputs and ``(S, H, N, C)`` targets"""
    if not samples:
        raise EmptyDatasetError("no windows to stack")
    return np.stack([s.X for s in samples]), np.stack([s.Y for s in samples])


@dataclass
class Normalizer:
    """Per-attribute min-max scaling fitted on the training split"""
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if self.minimum.shape != self.maximum.shape or np.any(self.maximum < self.minimum):
            raise DataFormatError("normalizer needs matching min/max with max >= min")

    @property
    def scale(self) -> np.ndarray:
        return self.maximum - self.minimum + NORMALIZER_EPS

    def apply(self, values: np.ndarray, clip: bool = False) -> np.ndarray:
        scaled = (np.asarray(values, dtype=np.float64) - self.minimum) / self.scale
        return np.clip(scaled, 0.0, 1.0) if clip else scaled

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.scale + self.minimum

    def apply_series(self, series: GridSeries, clip: bool = False) -> GridSeries:
        return replace(series, values=self.apply(series.values, clip=clip),
                       attribute_names=list(series.attribute_names), normalized=True)

    def select(self, indices: Sequence[int]) -> "Normalizer":
        return Normalizer(self.minimum[list(indices)], self.maximum[list(indices)])


def fit_normalizer(train: GridSeries) -> Normalizer:
    if train.num_steps == 0:
        raise EmptyDatasetError("cannot fit a normalizer on an empty split")
    flat = train.values.reshape(-1, train.num_attributes)
    return Normalizer(flat.min(axis=0), flat.max(axis=0))


def select_attributes(series: GridSeries, indices: Sequence[int]) -> GridSeries:
    indices = list(indices)
    if not indices:
        raise DataFormatError("select_attributes: no indices given")
    if len(set(indices)) != len(indices):
        raise DataFormatError(f"select_attributes: duplicate indices {indices}")
    bad = [i for i in indices if not 0 <= i < series.num_attributes]
    if bad:
        raise DataFormatError(f"select_attributes: indices {bad} out of range for {series.num_attributes} attributes")
    return replace(
        series,
        values=series.values[:, :, indices].copy(),
        attribute_names=[series.attribute_names[i] for i in indices],
    )


def _hotspot(rows: int, cols: int, center: int, width: float) -> np.ndarray:
    r, c = np.divmod(np.arange(rows * cols), cols)
    cr, cc = divmod(center, cols)
    distance = (r - cr) ** 2 + (c - cc) ** 2
    return 0.15 + np.exp(-distance / (2.0 * width ** 2))


def synthesize(rows: int, cols: int, num_attributes: int, timesteps: int, seed: int = 0,
               shared_frac: float = 0.5, interval_minutes: int = 60, noise: float = 1.0) -> GridSeries:
    """
    Seasonal counts on a grid.

    The first ``round(shared_frac * num_attributes)`` attributes share one
    hotspot map and daily phase; the others each get their own hotspot, phase
    and a wider volume range. Values are Poisson draws around the seasonal
    mean, blended towards the mean by ``noise`` (0 gives the noiseless mean).
    """
    if rows < 1 or cols < 1 or num_attributes < 1 or timesteps < 1:
        raise DataFormatError("synthesize: rows, cols, attributes and timesteps must be positive")
    if not 0.0 <= shared_frac <= 1.0:
        raise DataFormatError(f"synthesize: shared_frac must be in [0, 1], got {shared_frac}")
    rng = np.random.default_rng(seed)
    regions = rows * cols
    shared = int(round(shared_frac * num_attributes))
    distinct = num_attributes - shared
    width = max(rows, cols) / 4.0
    period = max(2, round(24 * 60 / interval_minutes))

    centers = rng.choice(regions, size=distinct + 1, replace=distinct + 1 > regions)
    shared_map = _hotspot(rows, cols, int(centers[0]), width)
    shared_phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(timesteps)

    values = np.zeros((timesteps, regions, num_attributes))
    names = []
    for attribute in range(num_attributes):
        if attribute < shared:
            spatial, phase = shared_map, shared_phase
            base = rng.uniform(20.0, 40.0)
            names.append(f"shared_{attribute}")
        else:
            j = attribute - shared
            spatial = _hotspot(rows, cols, int(centers[j + 1]), width)
            phase = shared_phase + np.pi * (j + 1) / (distinct + 1)
            base = rng.uniform(5.0, 80.0)
            names.append(f"distinct_{j}")
        daily = 1.0 + 0.8 * np.sin(2.0 * np.pi * t / period + phase)
        mean = base * daily[:, None] * spatial[None, :]
        draws = rng.poisson(mean).astype(np.float64)
        values[:, :, attribute] = np.maximum(0.0, mean + noise * (draws - mean))

    logger.info(
        f"Synthesized {timesteps} steps on a {rows}x{cols} grid: {shared} shared and {distinct} distinct attributes"
    )
    return GridSeries(values, rows, cols, interval_minutes, names)
