"""
Forecast metrics and report exports.

Metrics are RMSE and MAE per attribute over every (window, step, region)
entry, on the original scale (headline) and on the normalized scale.
"""
import csv
import json
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint, check_compatible
from .dataio import GridSeries, select_attributes, stack_windows, windows
from .exceptions import EmptyDatasetError, ShapeMismatchError
from .training import predict
from .transformer import ModelParameters
from .utils import ReportJSONEncoder

logger = logging.getLogger(__name__)


def compute_metrics(prediction: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-attribute RMSE and MAE of ``(..., C)`` arrays"""
    prediction, target = np.asarray(prediction), np.asarray(target)
    if prediction.shape != target.shape:
        raise ShapeMismatchError("prediction", target.shape, prediction.shape)
    error = (prediction - target).reshape(-1, prediction.shape[-1])
    return np.sqrt(np.mean(error * error, axis=0)), np.mean(np.abs(error), axis=0)


@dataclass
class MetricsReport:
    attributes: List[str]
    rmse: List[float]
    mae: List[float]
    rmse_normalized: List[float]
    mae_normalized: List[float]
    split: str = "test"
    trainable_count: Optional[int] = None
    epochs: Optional[int] = None
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    windows: int = 0

    @property
    def average(self) -> Dict[str, float]:
        return {
            "rmse": float(np.mean(self.rmse)),
            "mae": float(np.mean(self.mae)),
            "rmse_normalized": float(np.mean(self.rmse_normalized)),
            "mae_normalized": float(np.mean(self.mae_normalized)),
        }

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"attribute": name, "rmse": self.rmse[i], "mae": self.mae[i],
             "rmse_normalized": self.rmse_normalized[i], "mae_normalized": self.mae_normalized[i]}
            for i, name in enumerate(self.attributes)
        ]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["average"] = self.average
        return data


def evaluate(checkpoint: Checkpoint, series: GridSeries, split: str = "test",
             batch_size: int = 64) -> MetricsReport:
    """
    Score ``checkpoint`` on a raw (unnormalized) split of the data file it was
    trained on; the checkpoint's attribute indices pick the columns.
    """
    config = checkpoint.config
    check_compatible(checkpoint, series.num_regions)
    attributes = checkpoint.attributes or list(range(series.num_attributes))
    bad = [a for a in attributes if a >= series.num_attributes]
    if bad:
        raise ShapeMismatchError("attributes", (max(attributes) + 1,), (series.num_attributes,))
    series = select_attributes(series, attributes)
    samples = windows(series, config.input_len, config.horizon)
    if not samples:
        raise EmptyDatasetError(f"{split} split yields no windows of {config.input_len}+{config.horizon} steps")

    raw_x, raw_y = stack_windows(samples)
    normalizer = checkpoint.normalizer
    if normalizer is None:
        logger.warning("Checkpoint has no normalizer; metrics use the raw scale for both columns")
        norm_x, norm_y = raw_x, raw_y
    else:
        norm_x, norm_y = normalizer.apply(raw_x), normalizer.apply(raw_y)

    prediction = predict(_as_attribute_model(checkpoint, len(attributes)), norm_x, checkpoint.prompts, batch_size)
    rmse_n, mae_n = compute_metrics(prediction, norm_y)
    denormalized = normalizer.invert(prediction) if normalizer is not None else prediction
    rmse, mae = compute_metrics(denormalized, raw_y)

    provenance = checkpoint.provenance
    return MetricsReport(
        attributes=list(series.attribute_names),
        rmse=rmse.tolist(), mae=mae.tolist(),
        rmse_normalized=rmse_n.tolist(), mae_normalized=mae_n.tolist(),
        split=split,
        trainable_count=provenance.get("trainable_count"),
        epochs=provenance.get("epochs_run"),
        seed=provenance.get("seed"),
        config_hash=checkpoint.config_hash,
        windows=len(samples),
    )


def _as_attribute_model(checkpoint: Checkpoint, count: int) -> ModelParameters:
    params = checkpoint.params
    if params.config.num_attributes == count:
        return params
    return ModelParameters(params.config.with_attributes(count), params.tensors)


def aggregate(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)"""
    values = np.asarray(values, dtype=np.float64)
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), std


def export_json(path: str, experiment: str, provenance: Dict[str, Any], rows: List[Dict[str, Any]]):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump({"experiment": experiment, "provenance": provenance, "rows": rows},
                  handle, indent=2, sort_keys=True, cls=ReportJSONEncoder)
        handle.write("\n")


def export_csv(path: str, rows: List[Dict[str, Any]]):
    columns = _columns(rows)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(column)) for column in columns])


def format_table(rows: List[Dict[str, Any]]) -> str:
    """Aligned plain-text table"""
    columns = _columns(rows)
    cells = [[_cell(row.get(column)) for column in columns] for row in rows]
    widths = [max([len(column)] + [len(r[i]) for r in cells]) for i, column in enumerate(columns)]
    lines = ["  ".join(column.ljust(widths[i]) for i, column in enumerate(columns)),
             "  ".join("-" * width for width in widths)]
    lines.extend("  ".join(value.rjust(widths[i]) for i, value in enumerate(r)) for r in cells)
    return "\n".join(lines) + "\n"


def export_text(path: str, rows: List[Dict[str, Any]]):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(format_table(rows))


def _columns(rows: List[Dict[str, Any]]) -> List[str]:
    columns: List[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    return columns


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return f"{value:.4f}"
    return str(value)
