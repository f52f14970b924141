import json

import pytest

from promptst.config import ModelConfig
from promptst.dataio import synthesize
from promptst.exceptions import ConfigError
from promptst.experiments import (
    ABLATION_VARIANTS,
    FINE_TUNE,
    FULL,
    HEAD_ONLY,
    PROMPTST,
    SINGLE,
    ExperimentRunner,
    run_ablation,
    run_overall,
    run_transfer,
    summarize,
)

TRAIN = {"batch_size": 16, "max_epochs": 1}


@pytest.fixture
def runner(tmp_path, tiny_series, tiny_config):
    return ExperimentRunner(tiny_series, tiny_config, TRAIN, seeds=[0, 1], out_dir=str(tmp_path / "out"), jobs=2)


def test_summarize_reports_mean_and_sample_std():
    records = [
        {"group": "g", "attribute": "a", "seed": 0, "rmse": 1.0, "mae": 0.5, "trainable_count": 10},
        {"group": "g", "attribute": "a", "seed": 1, "rmse": 3.0, "mae": 0.5, "trainable_count": 10},
        {"group": "g", "attribute": "b", "seed": 0, "rmse": 5.0, "mae": 1.5, "trainable_count": 10},
        {"group": "g", "attribute": "b", "seed": 1, "rmse": 5.0, "mae": 1.5, "trainable_count": 10},
    ]
    rows = summarize(records)
    assert [(r["attribute"], r["rmse_mean"], r["runs"]) for r in rows] == [("a", 2.0, 2), ("b", 5.0, 2), ("average", 3.5, 2)]
    assert rows[0]["rmse_std"] == pytest.approx(2 ** 0.5)
    assert rows[2]["mae_mean"] == 1.0


def test_overall_compares_every_strategy(runner, tmp_path):
    result = run_overall(runner)
    groups = {row["group"] for row in result.rows}
    assert groups == {SINGLE, FULL, FINE_TUNE, HEAD_ONLY, PROMPTST}
    assert len(result.records) == 2 * 2 * 5
    prompt_row = next(r for r in result.rows if r["group"] == PROMPTST and r["attribute"] != "average")
    assert prompt_row["trainable_count"] == 6 * 2 * 8 + 8 * 3 + 3
    assert prompt_row["runs"] == 2

    out = tmp_path / "out"
    report = json.loads((out / "overall.json").read_text())
    assert report["experiment"] == "overall"
    assert report["provenance"]["seeds"] == [0, 1]
    assert set(report["provenance"]["checks"]) == {"promptst_le_head_only_on_distinct", "fine_tune_le_full_fraction"}
    assert (out / "overall_seed0.json").exists() and (out / "overall_seed1.json").exists()
    assert (out / "overall.txt").read_text() == result.table()


def test_transfer_counts_wins(runner):
    result = run_transfer(runner, [1])
    wins = result.provenance["wins"]
    assert set(wins) == {"rmse", "mae"} and all(0 <= v <= 1 for v in wins.values())
    assert result.provenance["source_attributes"] == [runner.attribute_names[0]]
    assert {row["group"] for row in result.rows} == {SINGLE, PROMPTST}


def test_transfer_needs_a_source(runner):
    with pytest.raises(ConfigError):
        run_transfer(runner, [0, 1])


def test_ablation_covers_every_variant(tmp_path, tiny_series, tiny_config):
    runner = ExperimentRunner(tiny_series, tiny_config, TRAIN, seeds=[3], out_dir=str(tmp_path))
    result = run_ablation(runner)
    averages = {row["group"]: row["trainable_count"] for row in result.rows if row["attribute"] == "average"}
    assert list(averages) == [label for label, _ in ABLATION_VARIANTS]
    assert averages["w/o prompt"] == 27
    assert averages["tiny prompt"] == 27 + 2 * 2 * 8


@pytest.mark.slow
def test_overall_ordering_on_shared_and_distinct_attributes(tmp_path):
    series = synthesize(4, 4, 6, 2000, seed=0, shared_frac=4 / 6)
    model_config = ModelConfig(input_len=12, horizon=12, num_regions=16, num_attributes=6, d_model=16,
                               temporal_layers=1, spatial_layers=1, num_heads=2)
    train_section = {"batch_size": 64, "max_epochs": 30, "patience": 5}
    runner = ExperimentRunner(series, model_config, train_section, seeds=range(5), out_dir=str(tmp_path), jobs=5)
    checks = run_overall(runner).provenance["checks"]
    assert checks["promptst_le_head_only_on_distinct"] is True
    assert checks["fine_tune_le_full_fraction"] >= 0.5
