"""
Multi-seed experiment drivers.

* ``overall``  – Single-Train, Full-Train, Fine-Tune, head-only tuning and
  prompt tuning compared per attribute
* ``transfer`` – pretrain on source attributes, prompt tune on unseen targets
* ``ablation`` – every prompt variant against the same pretrained backbone
* ``sweep``    – prompt tuning across token counts

Each driver writes ``<name>.json``, ``<name>.csv`` and ``<name>.txt`` plus one
raw record file per seed into the output directory.
"""
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import ModelConfig
from .dataio import GridSeries, Normalizer, fit_normalizer, split
from .exceptions import ConfigError
from .metrics import aggregate, evaluate, export_csv, export_json, export_text, format_table
from .prompts import PromptKind, PromptVariant
from .training import (
    Strategy,
    TrainConfig,
    TrainResult,
    WindowDataset,
    fine_tune,
    pretrain,
    prompt_tune,
    single_train,
)
from .utils import config_hash

logger = logging.getLogger(__name__)

SINGLE = "Single-Train"
FULL = "Full-Train"
FINE_TUNE = "Fine-Tune"
HEAD_ONLY = "w/o prompt"
PROMPTST = "PromptST"

ABLATION_VARIANTS = (
    ("PromptST", PromptKind.ST_FULL),
    ("tiny prompt", PromptKind.TINY),
    ("shallow prompt", PromptKind.SHALLOW),
    ("add prompt", PromptKind.ADD),
    ("w/o prompt", PromptKind.NONE),
)
SWEEP_COUNTS = (0, 1, 2, 3, 4)


@dataclass
class PreparedData:
    """Raw chronological splits, the training-split normalizer and stacked windows"""
    series: GridSeries
    train: GridSeries
    val: GridSeries
    test: GridSeries
    normalizer: Normalizer
    dataset: WindowDataset


def prepare(series: GridSeries, input_len: int, horizon: int, clip: bool = False) -> PreparedData:
    train, val, test = split(series, input_len, horizon)
    normalizer = fit_normalizer(train)
    dataset = WindowDataset.from_series(
        normalizer.apply_series(train), normalizer.apply_series(val, clip=clip), input_len, horizon
    )
    return PreparedData(series, train, val, test, normalizer, dataset)


@dataclass
class ExperimentResult:
    name: str
    rows: List[Dict[str, Any]]
    records: List[Dict[str, Any]]
    provenance: Dict[str, Any] = field(default_factory=dict)

    def table(self) -> str:
        return format_table(self.rows)


class ExperimentRunner:
    """Shared plumbing: data preparation, per-seed jobs, scoring and reports"""

    def __init__(self, series: GridSeries, model_config: ModelConfig, train_section: Dict[str, Any],
                 seeds: Sequence[int], out_dir: str, jobs: int = 1, data_path: Optional[str] = None,
                 clip: bool = False):
        if not seeds:
            raise ConfigError("experiments need at least one seed")
        self.model_config = model_config
        self.train_section = {k: v for k, v in train_section.items() if k not in ("strategy", "seed")}
        self.seeds = list(seeds)
        self.out_dir = out_dir
        self.jobs = max(1, jobs)
        self.data_path = data_path
        self.prepared = prepare(series, model_config.input_len, model_config.horizon, clip=clip)
        os.makedirs(out_dir, exist_ok=True)

    @property
    def attribute_names(self) -> List[str]:
        return list(self.prepared.series.attribute_names)

    def train_config(self, strategy: Strategy, seed: int, **extra) -> TrainConfig:
        return TrainConfig.from_dict(self.train_section, strategy=strategy, seed=seed, **extra)

    def pretrain(self, seed: int, attributes: Optional[Sequence[int]] = None) -> TrainResult:
        dataset = self.prepared.dataset
        if attributes is not None:
            dataset = dataset.select(attributes)
        return pretrain(dataset, self.model_config, self.train_config(Strategy.FULL, seed))

    def score(self, group: str, result: TrainResult, attributes: Sequence[int], seed: int,
              started: float) -> List[Dict[str, Any]]:
        attributes = list(attributes)
        checkpoint = Checkpoint(
            params=result.params,
            normalizer=self.prepared.normalizer.select(attributes),
            prompts=result.prompts,
            attributes=attributes,
            attribute_names=[self.attribute_names[a] for a in attributes],
            provenance={"seed": seed, "trainable_count": result.trainable_count, "epochs_run": result.epochs_run},
        )
        report = evaluate(checkpoint, self.prepared.test, split="test")
        elapsed = time.perf_counter() - started
        return [
            {
                "group": group,
                "attribute": report.attributes[i],
                "attribute_index": attribute,
                "seed": seed,
                "rmse": report.rmse[i],
                "mae": report.mae[i],
                "rmse_normalized": report.rmse_normalized[i],
                "mae_normalized": report.mae_normalized[i],
                "trainable_count": result.trainable_count,
                "epochs": result.epochs_run,
                "wall_time": elapsed,
            }
            for i, attribute in enumerate(attributes)
        ]

    def run_seeds(self, name: str, job: Callable[[int], List[Dict[str, Any]]]) -> List[Dict[str, Any]]:
        def run_one(seed: int) -> List[Dict[str, Any]]:
            logger.info(f"[{name}] seed {seed} started")
            records = job(seed)
            export_json(os.path.join(self.out_dir, f"{name}_seed{seed}.json"), name, {"seed": seed}, records)
            return records

        if self.jobs == 1:
            per_seed = [run_one(seed) for seed in self.seeds]
        else:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                per_seed = list(pool.map(run_one, self.seeds))
        return [record for records in per_seed for record in records]

    def provenance(self, **extra) -> Dict[str, Any]:
        return {
            "seeds": self.seeds,
            "data": self.data_path,
            "model": self.model_config.to_dict(),
            "train": self.train_section,
            "config_hash": config_hash({"model": self.model_config.to_dict(), "train": self.train_section}),
            **extra,
        }

    def finish(self, name: str, records: List[Dict[str, Any]], provenance: Dict[str, Any],
               averages_only: bool = False) -> ExperimentResult:
        rows = summarize(records)
        if averages_only:
            rows = [row for row in rows if row["attribute"] == "average"]
        result = ExperimentResult(name, rows, records, provenance)
        export_json(os.path.join(self.out_dir, f"{name}.json"), name, provenance, rows)
        export_csv(os.path.join(self.out_dir, f"{name}.csv"), rows)
        export_text(os.path.join(self.out_dir, f"{name}.txt"), rows)
        logger.info(f"[{name}] reports written to {self.out_dir}")
        return result


def summarize(records: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Seed mean and sample std per (group, attribute), plus a per-group average row"""
    groups: Dict[str, Dict[str, List[Dict[str, Any]]]] = {}
    for record in records:
        groups.setdefault(record["group"], {}).setdefault(record["attribute"], []).append(record)

    rows = []
    for group, by_attribute in groups.items():
        for attribute, entries in by_attribute.items():
            rows.append(_summary_row(group, attribute, entries))
        per_seed: Dict[int, List[Dict[str, Any]]] = {}
        for entries in by_attribute.values():
            for entry in entries:
                per_seed.setdefault(entry["seed"], []).append(entry)
        averaged = [
            {
                "seed": seed,
                "rmse": float(np.mean([e["rmse"] for e in entries])),
                "mae": float(np.mean([e["mae"] for e in entries])),
                "trainable_count": max(e["trainable_count"] for e in entries),
            }
            for seed, entries in per_seed.items()
        ]
        rows.append(_summary_row(group, "average", averaged))
    return rows


def _summary_row(group: str, attribute: str, entries: List[Dict[str, Any]]) -> Dict[str, Any]:
    rmse_mean, rmse_std = aggregate([e["rmse"] for e in entries])
    mae_mean, mae_std = aggregate([e["mae"] for e in entries])
    return {
        "group": group,
        "attribute": attribute,
        "rmse_mean": rmse_mean,
        "rmse_std": rmse_std,
        "mae_mean": mae_mean,
        "mae_std": mae_std,
        "trainable_count": entries[0]["trainable_count"],
        "runs": len(entries),
    }


def _lookup(rows: List[Dict[str, Any]], group: str, attribute: str) -> Optional[Dict[str, Any]]:
    for row in rows:
        if row["group"] == group and row["attribute"] == attribute:
            return row
    return None


def run_overall(runner: ExperimentRunner, n_st: int = 2) -> ExperimentResult:
    """Strategy comparison on every attribute"""
    attributes = list(range(len(runner.attribute_names)))
    variant = PromptVariant(PromptKind.ST_FULL, n_st=n_st)

    def job(seed: int) -> List[Dict[str, Any]]:
        records = []
        started = time.perf_counter()
        base = runner.pretrain(seed)
        records += runner.score(FULL, base, attributes, seed, started)
        for attribute in attributes:
            started = time.perf_counter()
            records += runner.score(SINGLE, single_train(
                runner.prepared.dataset, runner.model_config,
                runner.train_config(Strategy.SINGLE, seed, target_attribute=attribute)), [attribute], seed, started)
            started = time.perf_counter()
            records += runner.score(FINE_TUNE, fine_tune(
                base.params, runner.prepared.dataset,
                runner.train_config(Strategy.FINE_TUNE, seed, target_attribute=attribute)), [attribute], seed, started)
            for group, tuned_variant in ((HEAD_ONLY, PromptVariant(PromptKind.NONE)), (PROMPTST, variant)):
                started = time.perf_counter()
                records += runner.score(group, prompt_tune(
                    base.params, runner.prepared.dataset,
                    runner.train_config(Strategy.PROMPT_TUNE, seed, target_attribute=attribute,
                                        prompt_variant=tuned_variant)), [attribute], seed, started)
        return records

    records = runner.run_seeds("overall", job)
    rows = summarize(records)
    checks = ordering_checks(rows, runner.attribute_names)
    return runner.finish("overall", records, runner.provenance(prompt_variant=variant.to_dict(), checks=checks))


def ordering_checks(rows: List[Dict[str, Any]], attribute_names: Sequence[str]) -> Dict[str, Any]:
    """Directional comparisons on seed-averaged test loss (RMSE + MAE)"""
    def total(group: str, attribute: str) -> Optional[float]:
        row = _lookup(rows, group, attribute)
        return None if row is None else row["rmse_mean"] + row["mae_mean"]

    distinct = [name for name in attribute_names if name.startswith("distinct_")]
    prompt_vs_head = None
    if distinct:
        prompt_vs_head = all(
            total(PROMPTST, name) is not None and total(PROMPTST, name) <= total(HEAD_ONLY, name)
            for name in distinct
        )
    wins = [
        total(FINE_TUNE, name) <= total(FULL, name)
        for name in attribute_names
        if total(FINE_TUNE, name) is not None and total(FULL, name) is not None
    ]
    return {
        "promptst_le_head_only_on_distinct": prompt_vs_head,
        "fine_tune_le_full_fraction": float(np.mean(wins)) if wins else None,
    }


def run_transfer(runner: ExperimentRunner, target_attributes: Sequence[int], n_st: int = 2) -> ExperimentResult:
    """Pretrain on the complement of ``target_attributes``, then tune on each target"""
    count = len(runner.attribute_names)
    targets = sorted(set(target_attributes))
    if not targets or any(not 0 <= a < count for a in targets):
        raise ConfigError(f"target attributes {list(target_attributes)} invalid for {count} attributes")
    sources = [a for a in range(count) if a not in targets]
    if not sources:
        raise ConfigError("transfer needs at least one source attribute")
    variant = PromptVariant(PromptKind.ST_FULL, n_st=n_st)

    def job(seed: int) -> List[Dict[str, Any]]:
        records = []
        base = runner.pretrain(seed, sources)
        for attribute in targets:
            started = time.perf_counter()
            records += runner.score(SINGLE, single_train(
                runner.prepared.dataset, runner.model_config,
                runner.train_config(Strategy.SINGLE, seed, target_attribute=attribute)), [attribute], seed, started)
            started = time.perf_counter()
            records += runner.score(PROMPTST, prompt_tune(
                base.params, runner.prepared.dataset,
                runner.train_config(Strategy.PROMPT_TUNE, seed, target_attribute=attribute,
                                    prompt_variant=variant)), [attribute], seed, started)
        return records

    records = runner.run_seeds("transfer", job)
    rows = summarize(records)
    names = [runner.attribute_names[a] for a in targets]
    wins = {"rmse": 0, "mae": 0}
    for name in names:
        ours, single = _lookup(rows, PROMPTST, name), _lookup(rows, SINGLE, name)
        wins["rmse"] += int(ours["rmse_mean"] < single["rmse_mean"])
        wins["mae"] += int(ours["mae_mean"] < single["mae_mean"])
    provenance = runner.provenance(
        source_attributes=[runner.attribute_names[a] for a in sources],
        target_attributes=names, prompt_variant=variant.to_dict(), wins=wins,
    )
    return runner.finish("transfer", records, provenance)


def run_ablation(runner: ExperimentRunner, n_st: int = 2, n_ti: int = 2) -> ExperimentResult:
    """Every prompt variant tuned from the same pretrained backbone"""
    attributes = list(range(len(runner.attribute_names)))

    def job(seed: int) -> List[Dict[str, Any]]:
        records = []
        base = runner.pretrain(seed)
        for label, kind in ABLATION_VARIANTS:
            variant = PromptVariant(kind, n_st=n_st, n_ti=n_ti)
            for attribute in attributes:
                started = time.perf_counter()
                records += runner.score(label, prompt_tune(
                    base.params, runner.prepared.dataset,
                    runner.train_config(Strategy.PROMPT_TUNE, seed, target_attribute=attribute,
                                        prompt_variant=variant)), [attribute], seed, started)
        return records

    records = runner.run_seeds("ablation", job)
    return runner.finish("ablation", records, runner.provenance(n_st=n_st, n_ti=n_ti))


def run_sweep(runner: ExperimentRunner, counts: Sequence[int] = SWEEP_COUNTS) -> ExperimentResult:
    """Prompt tuning with ``n_st`` tokens per temporal layer for each count"""
    attributes = list(range(len(runner.attribute_names)))

    def job(seed: int) -> List[Dict[str, Any]]:
        records = []
        base = runner.pretrain(seed)
        for n_st in counts:
            variant = PromptVariant(PromptKind.ST_FULL, n_st=n_st)
            for attribute in attributes:
                started = time.perf_counter()
                records += runner.score(f"n_st={n_st}", prompt_tune(
                    base.params, runner.prepared.dataset,
                    runner.train_config(Strategy.PROMPT_TUNE, seed, target_attribute=attribute,
                                        prompt_variant=variant)), [attribute], seed, started)
        return records

    records = runner.run_seeds("sweep", job)
    return runner.finish("sweep", records, runner.provenance(counts=list(counts)), averages_only=True)
