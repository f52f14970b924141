import json
import math

import numpy as np
import pytest

from promptst.checkpoint import Checkpoint
from promptst.dataio import stack_windows, windows
from promptst.exceptions import ShapeMismatchError
from promptst.metrics import (
    MetricsReport,
    aggregate,
    compute_metrics,
    evaluate,
    export_csv,
    export_json,
    format_table,
)
from promptst.transformer import init_parameters


def _hand_loop(prediction, target):
    steps, horizon, regions, attributes = target.shape
    rmse, mae = [], []
    for c in range(attributes):
        squared = absolute = 0.0
        for s in range(steps):
            for h in range(horizon):
                for n in range(regions):
                    error = prediction[s, h, n, c] - target[s, h, n, c]
                    squared += error * error
                    absolute += abs(error)
        count = steps * horizon * regions
        rmse.append(math.sqrt(squared / count))
        mae.append(absolute / count)
    return rmse, mae


def test_perfect_prediction_scores_zero(rng):
    y = rng.uniform(size=(3, 2, 4, 2))
    rmse, mae = compute_metrics(y, y)
    np.testing.assert_array_equal(rmse, 0.0)
    np.testing.assert_array_equal(mae, 0.0)


def test_metrics_match_hand_loop(rng):
    prediction, target = rng.normal(size=(5, 3, 4, 2)), rng.normal(size=(5, 3, 4, 2))
    rmse, mae = compute_metrics(prediction, target)
    expected_rmse, expected_mae = _hand_loop(prediction, target)
    np.testing.assert_allclose(rmse, expected_rmse, atol=1e-10)
    np.testing.assert_allclose(mae, expected_mae, atol=1e-10)


def test_metrics_reject_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        compute_metrics(np.zeros((2, 3)), np.zeros((3, 2)))


def test_constant_half_predictor_matches_oracle(tiny_prepared, tiny_config):
    params = init_parameters(tiny_config, 0)
    params["head.weight"].data[...] = 0.0
    params["head.bias"].data[...] = 0.0
    normalizer = tiny_prepared.normalizer
    checkpoint = Checkpoint(params=params, normalizer=normalizer, attributes=[0, 1],
                            attribute_names=tiny_prepared.series.attribute_names)
    report = evaluate(checkpoint, tiny_prepared.test)

    _, raw_y = stack_windows(windows(tiny_prepared.test, 4, 3))
    expected_rmse_n, expected_mae_n = _hand_loop(np.full(raw_y.shape, 0.5), normalizer.apply(raw_y))
    expected_rmse, expected_mae = _hand_loop(normalizer.invert(np.full(raw_y.shape, 0.5)), raw_y)
    np.testing.assert_allclose(report.rmse_normalized, expected_rmse_n, atol=1e-10)
    np.testing.assert_allclose(report.mae_normalized, expected_mae_n, atol=1e-10)
    np.testing.assert_allclose(report.rmse, expected_rmse, atol=1e-10)
    np.testing.assert_allclose(report.mae, expected_mae, atol=1e-10)
    assert report.windows == len(raw_y)


def test_evaluate_picks_checkpoint_attributes_and_is_deterministic(tiny_prepared, tiny_config):
    params = init_parameters(tiny_config.with_attributes(1), 0)
    checkpoint = Checkpoint(params=params, normalizer=tiny_prepared.normalizer.select([1]), attributes=[1],
                            provenance={"seed": 4, "trainable_count": 27, "epochs_run": 3})
    first = evaluate(checkpoint, tiny_prepared.test)
    second = evaluate(checkpoint, tiny_prepared.test)
    assert first.to_dict() == second.to_dict()
    assert first.attributes == [tiny_prepared.series.attribute_names[1]]
    assert (first.seed, first.trainable_count, first.epochs) == (4, 27, 3)


def test_evaluate_rejects_other_grids(tiny_prepared, full_config):
    checkpoint = Checkpoint(params=init_parameters(full_config, 0), attributes=[0])
    with pytest.raises(ShapeMismatchError):
        evaluate(checkpoint, tiny_prepared.test)


def test_average_is_mean_of_rows():
    report = MetricsReport(["a", "b", "c"], [1.0, 2.0, 6.0], [0.5, 0.5, 2.0], [0.1, 0.2, 0.3], [0.0, 0.1, 0.2])
    assert report.average["rmse"] == pytest.approx(3.0)
    assert report.average["mae"] == pytest.approx(1.0)
    assert [row["attribute"] for row in report.rows()] == ["a", "b", "c"]


def test_aggregate_uses_sample_std():
    assert aggregate([1.0, 2.0, 3.0]) == (2.0, 1.0)
    assert aggregate([5.0]) == (5.0, 0.0)


def test_exports(tmp_path):
    rows = [{"group": "PromptST", "attribute": "a", "rmse_mean": 1.23456, "runs": 5},
            {"group": "Single-Train", "attribute": "a", "rmse_mean": 2.0, "runs": 5}]
    path = tmp_path / "overall.json"
    export_json(str(path), "overall", {"seeds": [0, 1], "config_hash": "abc"}, rows)
    data = json.loads(path.read_text())
    assert data["experiment"] == "overall" and data["rows"] == rows
    assert data["provenance"]["config_hash"] == "abc"

    csv_path = tmp_path / "overall.csv"
    export_csv(str(csv_path), rows)
    assert csv_path.read_text().splitlines()[0] == "group,attribute,rmse_mean,runs"

    table = format_table(rows).splitlines()
    assert table[0].split() == ["group", "attribute", "rmse_mean", "runs"]
    assert "1.2346" in table[2]
    assert len({len(line) for line in table}) == 1
