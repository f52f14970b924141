"""
Command-line entry point.

    promptst gen --rows 8 --cols 8 --attrs 4 --steps 2000 --seed 0 --out city.stgrid
    promptst pretrain --data city.stgrid --out base.ckpt
    promptst tune --from base.ckpt --attr 2 --variant st --out attr2.ckpt
    promptst eval --from attr2.ckpt --data city.stgrid --split test --report attr2.json
    promptst count-params --variant st
    promptst exp-overall --data city.stgrid --seeds 5 --out results/

Exit codes: 0 success, 1 usage error, 2 data error, 3 shape/config mismatch.
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from . import __version__
from .checkpoint import Checkpoint, check_compatible, load_checkpoint, save_checkpoint
from .conf import configure_logging, get_settings
from .config import ModelConfig, load_run_config
from .dataio import GridSeries, load_grid_csv, save_grid_csv, split, synthesize
from .exceptions import ConfigError, PromptSTError, UsageError
from .experiments import (
    SWEEP_COUNTS,
    ExperimentRunner,
    prepare,
    run_ablation,
    run_overall,
    run_sweep,
    run_transfer,
)
from .metrics import evaluate, format_table
from .prompts import PromptKind, PromptVariant, head_param_count, prompt_param_count, trainable_params
from .training import Strategy, TrainConfig, fine_tune, pretrain, prompt_tune
from .transformer import backbone_param_count
from .utils import MemoryProfiler, ReportJSONEncoder

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser whose usage errors become UsageError (exit code 1)"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


def _sections(path: Optional[str]):
    if path is None:
        return {}, {}
    return load_run_config(path)


def _model_config(section: Dict[str, Any], series: GridSeries) -> ModelConfig:
    for key, actual in (("num_regions", series.num_regions), ("num_attributes", series.num_attributes)):
        if key in section and section[key] != actual:
            logger.warning(f"config sets {key}={section[key]} but the data has {actual}; using the data")
    return ModelConfig.from_dict({**section, "num_regions": series.num_regions,
                                  "num_attributes": series.num_attributes})


def _attribute_index(value: str, series: GridSeries) -> int:
    if value in series.attribute_names:
        return series.attribute_names.index(value)
    try:
        index = int(value)
    except ValueError:
        raise ConfigError(f"unknown attribute {value!r}; known: {series.attribute_names}")
    if not 0 <= index < series.num_attributes:
        raise ConfigError(f"attribute {index} out of range for {series.num_attributes} attributes")
    return index


def _train_overrides(args) -> Dict[str, Any]:
    return {
        "seed": getattr(args, "seed", None),
        "max_epochs": getattr(args, "epochs", None),
        "max_steps": getattr(args, "max_steps", None),
    }


def _print_json(data: Any):
    print(json.dumps(data, indent=2, sort_keys=True, cls=ReportJSONEncoder))


def cmd_gen(args) -> int:
    series = synthesize(args.rows, args.cols, args.attrs, args.steps, seed=args.seed,
                        shared_frac=args.shared_frac, interval_minutes=args.interval, noise=args.noise)
    save_grid_csv(series, args.out)
    print(f"wrote {args.out}: {series.num_steps} steps, {args.rows}x{args.cols} grid, "
          f"attributes {', '.join(series.attribute_names)}")
    return 0


def cmd_pretrain(args) -> int:
    series = load_grid_csv(args.data)
    model_section, train_section = _sections(args.config)
    model_config = _model_config(model_section, series)
    prepared = prepare(series, model_config.input_len, model_config.horizon, clip=get_settings().clip_normalized)

    attributes = list(range(series.num_attributes)) if args.attrs is None else args.attrs
    dataset = prepared.dataset.select(attributes)
    config = TrainConfig.from_dict(train_section, strategy=Strategy.FULL, **_train_overrides(args))
    result = MemoryProfiler.profile_run(pretrain, dataset, model_config, config,
                                        output_file=args.memray, label="pretrain")

    checkpoint = Checkpoint(
        params=result.params,
        normalizer=prepared.normalizer.select(attributes),
        attributes=attributes,
        attribute_names=[series.attribute_names[a] for a in attributes],
        provenance={
            "strategy": result.strategy.value,
            "seed": config.seed,
            "epochs_run": result.epochs_run,
            "steps": result.steps,
            "best_val_loss": result.best_loss,
            "trainable_count": result.trainable_count,
            "data": os.path.abspath(args.data),
            "train": config.to_dict(),
        },
    )
    save_checkpoint(checkpoint, args.out)
    print(f"pretrained {result.trainable_count} parameters for {result.epochs_run} epochs "
          f"(best loss {result.best_loss:.6f}) -> {args.out}")
    return 0


def cmd_tune(args) -> int:
    base = load_checkpoint(args.source)
    data_path = args.data or base.provenance.get("data")
    if not data_path:
        raise UsageError("tune: --data is required (the checkpoint does not record its data file)")
    series = load_grid_csv(data_path)
    config = base.config
    check_compatible(base, series.num_regions)
    _, train_section = _sections(args.config)
    attribute = _attribute_index(args.attr, series)
    prepared = prepare(series, config.input_len, config.horizon, clip=get_settings().clip_normalized)

    if args.full:
        train_config = TrainConfig.from_dict(train_section, strategy=Strategy.FINE_TUNE,
                                             target_attribute=attribute, **_train_overrides(args))
        runner, label = fine_tune, "fine_tune"
    else:
        variant = PromptVariant(PromptKind(args.variant), n_st=args.n_st, n_ti=args.n_ti)
        train_config = TrainConfig.from_dict(train_section, strategy=Strategy.PROMPT_TUNE,
                                             target_attribute=attribute, prompt_variant=variant,
                                             warm_start_head=args.warm_start_head or None,
                                             **_train_overrides(args))
        runner, label = prompt_tune, "prompt_tune"
    result = MemoryProfiler.profile_run(runner, base.params, prepared.dataset, train_config,
                                        output_file=args.memray, label=label)

    checkpoint = Checkpoint(
        params=result.params,
        normalizer=prepared.normalizer.select([attribute]),
        prompts=result.prompts,
        attributes=[attribute],
        attribute_names=[series.attribute_names[attribute]],
        provenance={
            "strategy": result.strategy.value,
            "seed": train_config.seed,
            "epochs_run": result.epochs_run,
            "steps": result.steps,
            "best_val_loss": result.best_loss,
            "trainable_count": result.trainable_count,
            "data": os.path.abspath(data_path),
            "pretrained": base.config_hash,
            "train": train_config.to_dict(),
        },
    )
    save_checkpoint(checkpoint, args.out)
    print(f"tuned {result.trainable_count} parameters on {series.attribute_names[attribute]} "
          f"for {result.epochs_run} epochs (best loss {result.best_loss:.6f}) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.source)
    series = load_grid_csv(args.data)
    parts = dict(zip(("train", "val", "test"), split(series, checkpoint.config.input_len, checkpoint.config.horizon)))
    report = evaluate(checkpoint, parts[args.split], split=args.split)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as handle:
            json.dump({**report.to_dict(), "checkpoint": os.path.abspath(args.source)},
                      handle, indent=2, sort_keys=True, cls=ReportJSONEncoder)
            handle.write("\n")
    rows = report.rows() + [{"attribute": "average", **report.average}]
    print(format_table(rows), end="")
    return 0


def cmd_count_params(args) -> int:
    model_section, _ = _sections(args.config)
    config = ModelConfig.from_dict(model_section)
    variant = PromptVariant(PromptKind(args.variant), n_st=args.n_st, n_ti=args.n_ti)
    trainable = trainable_params(variant, config)
    backbone = backbone_param_count(config)
    head = head_param_count(config)
    summary = {
        "variant": variant.to_dict(),
        "trainable": trainable,
        "prompt": prompt_param_count(variant, config),
        "head": head,
        "backbone": backbone,
        "trainable_percent": 100.0 * trainable / (backbone + head),
    }
    if args.json:
        _print_json(summary)
        return 0
    print(trainable)
    if args.details:
        print(f"prompt tokens  {summary['prompt']}")
        print(f"head           {head}")
        print(f"backbone       {backbone}")
        print(f"trainable      {summary['trainable_percent']:.2f}% of the full transformer")
    return 0


def _runner(args) -> ExperimentRunner:
    series = load_grid_csv(args.data)
    model_section, train_section = _sections(args.config)
    train_section = {**train_section, **{k: v for k, v in _train_overrides(args).items() if v is not None}}
    return ExperimentRunner(
        series, _model_config(model_section, series), train_section,
        seeds=range(args.seeds), out_dir=args.out, jobs=args.jobs,
        data_path=os.path.abspath(args.data), clip=get_settings().clip_normalized,
    )


def _report(result) -> int:
    print(result.table(), end="")
    return 0


def cmd_exp_overall(args) -> int:
    return _report(run_overall(_runner(args), n_st=args.n_st))


def cmd_exp_transfer(args) -> int:
    runner = _runner(args)
    names = runner.attribute_names
    if args.targets:
        targets = [_attribute_index(v, runner.prepared.series) for v in args.targets.split(",") if v.strip()]
    else:
        targets = [i for i, name in enumerate(names) if name.startswith("distinct_")] or [len(names) - 1]
    result = run_transfer(runner, targets, n_st=args.n_st)
    wins = result.provenance["wins"]
    print(f"PromptST beats Single-Train on {wins['rmse']} (RMSE) / {wins['mae']} (MAE) "
          f"of {len(targets)} target attributes")
    return _report(result)


def cmd_exp_ablation(args) -> int:
    return _report(run_ablation(_runner(args), n_st=args.n_st, n_ti=args.n_ti))


def cmd_exp_sweep(args) -> int:
    return _report(run_sweep(_runner(args), counts=args.counts))


def _add_training_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="run-config JSON with 'model' and 'train' sections")
    parser.add_argument("--epochs", type=int, help="override train.max_epochs")
    parser.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="promptst", description="Spatio-temporal prompt tuning for multi-attribute forecasting")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    gen = commands.add_parser("gen", help="write a synthetic STGRID file")
    gen.add_argument("--rows", type=int, required=True)
    gen.add_argument("--cols", type=int, required=True)
    gen.add_argument("--attrs", type=int, required=True)
    gen.add_argument("--steps", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--shared-frac", type=float, default=0.5)
    gen.add_argument("--interval", type=int, default=60, help="minutes per step")
    gen.add_argument("--noise", type=float, default=1.0, help="0 = noiseless seasonal mean, 1 = Poisson counts")
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=cmd_gen)

    pre = commands.add_parser("pretrain", help="Phase I: train one model on every attribute")
    pre.add_argument("--data", required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument("--seed", type=int)
    pre.add_argument("--attrs", type=_int_list, help="attribute indices to pretrain on (default: all)")
    pre.add_argument("--memray", metavar="PATH", help="write a memray capture of the run")
    _add_training_flags(pre)
    pre.set_defaults(handler=cmd_pretrain)

    tune = commands.add_parser("tune", help="Phase II: prompt tune (or fine-tune) on one attribute")
    tune.add_argument("--from", dest="source", required=True, metavar="CKPT")
    tune.add_argument("--data", help="STGRID file (default: the one recorded in the checkpoint)")
    tune.add_argument("--attr", required=True, help="attribute index or name")
    tune.add_argument("--variant", choices=[k.value for k in PromptKind], default=PromptKind.ST_FULL.value)
    tune.add_argument("--n-st", type=int, default=2)
    tune.add_argument("--n-ti", type=int, default=2)
    tune.add_argument("--full", action="store_true", help="fine-tune every parameter instead")
    tune.add_argument("--warm-start-head", action="store_true", help="start from the pretrained head")
    tune.add_argument("--seed", type=int)
    tune.add_argument("--out", required=True)
    tune.add_argument("--memray", metavar="PATH", help="write a memray capture of the run")
    _add_training_flags(tune)
    tune.set_defaults(handler=cmd_tune)

    ev = commands.add_parser("eval", help="RMSE/MAE of a checkpoint on a data split")
    ev.add_argument("--from", dest="source", required=True, metavar="CKPT")
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=["train", "val", "test"], default="test")
    ev.add_argument("--report", metavar="PATH", help="write the report as JSON")
    ev.set_defaults(handler=cmd_eval)

    count = commands.add_parser("count-params", help="closed-form trainable parameter count")
    count.add_argument("--variant", choices=[k.value for k in PromptKind], default=PromptKind.ST_FULL.value)
    count.add_argument("--config")
    count.add_argument("--n-st", type=int, default=2)
    count.add_argument("--n-ti", type=int, default=2)
    count.add_argument("--details", action="store_true", help="also print the backbone and head sizes")
    count.add_argument("--json", action="store_true")
    count.set_defaults(handler=cmd_count_params)

    drivers = (
        ("exp-overall", cmd_exp_overall, "compare training strategies per attribute"),
        ("exp-transfer", cmd_exp_transfer, "pretrain on source attributes, prompt tune on targets"),
        ("exp-ablation", cmd_exp_ablation, "compare prompt variants"),
        ("exp-sweep", cmd_exp_sweep, "vary the number of spatio-temporal prompt tokens"),
    )
    for name, handler, help_text in drivers:
        driver = commands.add_parser(name, help=help_text)
        driver.add_argument("--data", required=True)
        driver.add_argument("--seeds", type=int, default=5, help="number of repetitions (seeds 0..K-1)")
        driver.add_argument("--out", required=True, metavar="DIR")
        driver.add_argument("--jobs", type=int, default=1, help="seeds run concurrently")
        _add_training_flags(driver)
        if name != "exp-sweep":
            driver.add_argument("--n-st", type=int, default=2)
        if name == "exp-ablation":
            driver.add_argument("--n-ti", type=int, default=2)
        if name == "exp-transfer":
            driver.add_argument("--targets", help="target attributes (indices or names, comma-separated)")
        if name == "exp-sweep":
            driver.add_argument("--counts", type=_int_list, default=list(SWEEP_COUNTS))
        driver.set_defaults(handler=handler)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging(get_settings())
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "seeds", 1) < 1:
            raise UsageError("--seeds must be at least 1")
        return args.handler(args)
    except PromptSTError as e:
        print(f"promptst: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"promptst: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
