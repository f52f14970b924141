"""
Training strategies.

* ``single``      – a fresh model trained on one attribute
* ``full``        – Phase I: every attribute trains one shared model
* ``fine_tune``   – all parameters of a pretrained model tuned on one attribute
* ``prompt_tune`` – Phase II: backbone frozen, prompt tokens and a fresh head tuned

All four run the same mini-batch Adam loop with early stopping on validation
loss and return the best-validation parameters.
"""
import logging
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
from uuid import uuid4

import numpy as np

from .autodiff import Tape, Tensor, abs as tensor_abs, mean_all, mul, no_grad, sqrt, sub
from .config import ModelConfig
from .dataio import GridSeries, stack_windows, windows
from .exceptions import (
    ConfigError,
    DimensionError,
    EmptyDatasetError,
    MissingGradientError,
    NotNormalizedError,
    ShapeMismatchError,
)
from .prompts import PromptSet, PromptVariant, init_prompts, trainable_params
from .transformer import PROMPT_STREAM, ModelParameters, forward, init_head, init_parameters
from .utils import HistoryCollector

logger = logging.getLogger(__name__)

SHUFFLE_STREAM = 3
NORMALIZED_TOLERANCE = 1e-9


class Strategy(str, Enum):
    SINGLE = "single"
    FULL = "full"
    FINE_TUNE = "fine_tune"
    PROMPT_TUNE = "prompt_tune"


DEFAULT_LEARNING_RATES = {
    Strategy.SINGLE: 0.003,
    Strategy.FULL: 0.003,
    Strategy.FINE_TUNE: 0.001,
    Strategy.PROMPT_TUNE: 0.001,
}


@dataclass
class TrainConfig:
    strategy: Strategy = Strategy.FULL
    learning_rate: Optional[float] = None
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    prompt_variant: Optional[PromptVariant] = None
    target_attribute: Optional[int] = None
    max_steps: Optional[int] = None
    warm_start_head: bool = False

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if isinstance(self.prompt_variant, dict):
            self.prompt_variant = PromptVariant.from_dict(self.prompt_variant)
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LEARNING_RATES[self.strategy]
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        data["strategy"] = self.strategy.value
        data["prompt_variant"] = self.prompt_variant.to_dict() if self.prompt_variant else None
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, object], **overrides) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        merged = {**data, **{k: v for k, v in overrides.items() if v is not None}}
        unknown = sorted(set(merged) - known)
        if unknown:
            raise ConfigError(f"train config: unknown keys {unknown}")
        return cls(**merged)


@dataclass
class OptimizerState:
    """Adam moments for exactly the trainable parameters"""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_parameters(cls, params: Dict[str, Tensor]) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )

    def keys(self) -> List[str]:
        return sorted(self.m)


def adam_step(params: Dict[str, Tensor], state: OptimizerState, lr: float):
    """One bias-corrected Adam update of ``params`` in place"""
    if set(params) != set(state.m):
        raise MissingGradientError(
            f"optimizer tracks {state.keys()} but was given {sorted(params)}"
        )
    missing = [name for name, tensor in params.items() if tensor.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for trainable parameters {missing}")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    step_size = lr / bc1

    for name, tensor in params.items():
        g = tensor.grad
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        tensor.data -= step_size * m / (np.sqrt(v / bc2) + state.eps)


class Adam:
    def __init__(self, params: Dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.state = OptimizerState.for_parameters(params)
        self.state.beta1, self.state.beta2, self.state.eps = beta1, beta2, eps

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def step(self):
        adam_step(self.params, self.state, self.lr)


def loss(prediction: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """RMSE + MAE over every element"""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if prediction.shape != target.shape:
        raise DimensionError(f"loss: prediction {prediction.shape} vs target {target.shape}")
    error = sub(prediction, target)
    return sqrt(mean_all(mul(error, error))) + mean_all(tensor_abs(error))


def loss_value(prediction: np.ndarray, target: np.ndarray) -> float:
    error = np.asarray(prediction) - np.asarray(target)
    return float(np.sqrt(np.mean(error * error)) + np.mean(np.abs(error)))


@dataclass
class WindowDataset:
    """Stacked training/validation windows, ``(S, T, N, C)`` / ``(S, H, N, C)``"""
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: Optional[np.ndarray] = None
    val_y: Optional[np.ndarray] = None

    @classmethod
    def from_series(cls, train: GridSeries, val: Optional[GridSeries], input_len: int,
                    horizon: int) -> "WindowDataset":
        train_x, train_y = stack_windows(windows(train, input_len, horizon))
        val_x = val_y = None
        if val is not None:
            val_samples = windows(val, input_len, horizon)
            if val_samples:
                val_x, val_y = stack_windows(val_samples)
            else:
                logger.warning("Validation split yields no windows; early stopping uses training loss")
        return cls(train_x, train_y, val_x, val_y)

    @property
    def num_attributes(self) -> int:
        return self.train_x.shape[-1]

    @property
    def has_validation(self) -> bool:
        return self.val_x is not None and len(self.val_x) > 0

    def select(self, indices: Sequence[int]) -> "WindowDataset":
        indices = list(indices)
        pick = (lambda a: None if a is None else a[..., indices])
        return WindowDataset(pick(self.train_x), pick(self.train_y), pick(self.val_x), pick(self.val_y))


@dataclass
class TrainResult:
    params: ModelParameters
    history: Dict[str, object]
    strategy: Strategy
    trainable_count: int
    optimizer_keys: List[str]
    prompts: Optional[PromptSet] = None
    best_loss: float = float("inf")
    epochs_run: int = 0
    steps: int = 0


def predict(params: ModelParameters, X: np.ndarray, prompts: Optional[PromptSet] = None,
            batch_size: int = 64) -> np.ndarray:
    """Batched inference without recording a tape"""
    outputs = []
    with no_grad():
        for start in range(0, len(X), batch_size):
            outputs.append(forward(params, X[start:start + batch_size], prompts).data)
    return np.concatenate(outputs, axis=0)


def _check_dataset(dataset: WindowDataset):
    if len(dataset.train_x) == 0:
        raise EmptyDatasetError("training split has no windows")
    for label, array in (("inputs", dataset.train_x), ("targets", dataset.train_y)):
        low, high = float(array.min()), float(array.max())
        if low < -NORMALIZED_TOLERANCE or high > 1.0 + NORMALIZED_TOLERANCE:
            raise NotNormalizedError(
                f"training {label} span [{low:.6g}, {high:.6g}]; normalize into [0, 1] first"
            )


def _restrict(dataset: WindowDataset, config: TrainConfig) -> WindowDataset:
    if config.target_attribute is None:
        if dataset.num_attributes != 1:
            raise ConfigError(
                f"{config.strategy.value} needs target_attribute for a {dataset.num_attributes}-attribute dataset"
            )
        return dataset
    if dataset.num_attributes == 1 and config.target_attribute == 0:
        return dataset
    if not 0 <= config.target_attribute < dataset.num_attributes:
        raise ConfigError(
            f"target_attribute {config.target_attribute} out of range for {dataset.num_attributes} attributes"
        )
    return dataset.select([config.target_attribute])


def _check_backbone_fits(params: ModelParameters, dataset: WindowDataset):
    config = params.config
    _, steps, regions, _ = dataset.train_x.shape
    if regions != config.num_regions:
        raise ShapeMismatchError("spatial_pos", (regions, config.d_model), params["spatial_pos"].shape)
    if steps != config.input_len:
        raise ShapeMismatchError("temporal_pos", (steps, config.d_model), params["temporal_pos"].shape)
    if dataset.train_y.shape[1] != config.horizon:
        raise ShapeMismatchError("head.weight", (config.d_model, dataset.train_y.shape[1]), params["head.weight"].shape)


def _fit(trainable: Dict[str, Tensor], predict_fn: Callable[[np.ndarray], Tensor], dataset: WindowDataset,
         config: TrainConfig, collector: HistoryCollector) -> Tuple[OptimizerState, float, int, int]:
    """Mini-batch Adam with early stopping; leaves the best parameters in ``trainable``"""
    optimizer = Adam(trainable, config.learning_rate)
    rng = np.random.default_rng((config.seed, SHUFFLE_STREAM))
    samples = len(dataset.train_x)

    def evaluate(x: np.ndarray, y: np.ndarray) -> float:
        with no_grad():
            predictions = np.concatenate(
                [predict_fn(x[i:i + config.batch_size]).data for i in range(0, len(x), config.batch_size)]
            )
        return loss_value(predictions, y)

    def monitored(train_loss: float, val_loss: Optional[float]) -> float:
        return val_loss if val_loss is not None else train_loss

    initial_train = evaluate(dataset.train_x, dataset.train_y)
    initial_val = evaluate(dataset.val_x, dataset.val_y) if dataset.has_validation else None
    collector.add_epoch(0, initial_train, initial_val, 0)

    best = monitored(initial_train, initial_val)
    best_snapshot = {name: t.data.copy() for name, t in trainable.items()}
    stale = 0
    steps = 0
    epoch = 0
    step_budget = config.max_steps

    while epoch < config.max_epochs and (step_budget is None or steps < step_budget):
        epoch += 1
        order = rng.permutation(samples)
        running, seen = 0.0, 0
        for start in range(0, samples, config.batch_size):
            batch = order[start:start + config.batch_size]
            optimizer.zero_grad()
            with Tape() as tape:
                batch_loss = loss(predict_fn(dataset.train_x[batch]), dataset.train_y[batch])
                tape.backward(batch_loss)
            optimizer.step()
            running += batch_loss.item() * len(batch)
            seen += len(batch)
            steps += 1
            if step_budget is not None and steps >= step_budget:
                break

        train_loss = running / seen
        val_loss = evaluate(dataset.val_x, dataset.val_y) if dataset.has_validation else None
        collector.add_epoch(epoch, train_loss, val_loss, steps)
        logger.info(
            f"[{config.strategy.value}] epoch {epoch}: train {train_loss:.6f}"
            + (f" val {val_loss:.6f}" if val_loss is not None else "")
            + f" ({collector.epochs[-1]['wall_time']:.2f}s elapsed)"
        )

        current = monitored(train_loss, val_loss)
        if current < best:
            best, stale = current, 0
            best_snapshot = {name: t.data.copy() for name, t in trainable.items()}
        else:
            stale += 1
            if stale >= config.patience:
                collector.add_event("early_stop", best=best)
                logger.info(f"[{config.strategy.value}] early stop after epoch {epoch} (best {best:.6f})")
                break

    for name, tensor in trainable.items():
        tensor.data[...] = best_snapshot[name]
    return optimizer.state, best, epoch, steps


def _run(strategy: Strategy, params: ModelParameters, trainable_names: Sequence[str],
         predict_fn: Callable[[np.ndarray], Tensor], dataset: WindowDataset, config: TrainConfig,
         prompts: Optional[PromptSet] = None) -> TrainResult:
    params.set_trainable(trainable_names)
    trainable = {name: params[name] for name in trainable_names}
    if prompts is not None:
        trainable.update(prompts.tensors)
    trainable_count = sum(t.size for t in trainable.values())

    collector = HistoryCollector(str(uuid4()))
    collector.add_run_data({
        'strategy': strategy.value,
        'seed': config.seed,
        'trainable_count': trainable_count,
        'learning_rate': config.learning_rate,
        'prompt_variant': prompts.variant.to_dict() if prompts is not None else None,
    })
    logger.info(f"[{strategy.value}] training {trainable_count} parameters on {len(dataset.train_x)} windows")

    state, best, epochs, steps = _fit(trainable, predict_fn, dataset, config, collector)
    history = collector.finalize({'best_loss': best, 'epochs_run': epochs, 'steps': steps})
    return TrainResult(
        params=params, history=history, strategy=strategy, trainable_count=trainable_count,
        optimizer_keys=state.keys(), prompts=prompts, best_loss=best, epochs_run=epochs, steps=steps,
    )


def pretrain(dataset: WindowDataset, model_config: ModelConfig, config: TrainConfig) -> TrainResult:
    """Phase I: all attributes share backbone and head"""
    _check_dataset(dataset)
    model_config = model_config.with_attributes(dataset.num_attributes)
    params = init_parameters(model_config, config.seed)
    _check_backbone_fits(params, dataset)
    return _run(Strategy(config.strategy), params, params.names(),
                lambda x: forward(params, x), dataset, config)


def single_train(dataset: WindowDataset, model_config: ModelConfig, config: TrainConfig) -> TrainResult:
    """A fresh model on the target attribute only"""
    target = _restrict(dataset, config)
    return pretrain(target, model_config, replace(config, strategy=Strategy.SINGLE))


def fine_tune(pretrained: ModelParameters, dataset: WindowDataset, config: TrainConfig) -> TrainResult:
    """Every parameter of the pretrained model tuned on the target attribute"""
    config = replace(config, strategy=Strategy.FINE_TUNE)
    target = _restrict(dataset, config)
    _check_dataset(target)
    params = ModelParameters(pretrained.config.with_attributes(1), pretrained.copy().tensors)
    _check_backbone_fits(params, target)
    return _run(Strategy.FINE_TUNE, params, params.names(), lambda x: forward(params, x), target, config)


def prompt_tune(pretrained: ModelParameters, dataset: WindowDataset, config: TrainConfig) -> TrainResult:
    """Phase II: backbone frozen; prompt tokens and the head are trained"""
    config = replace(config, strategy=Strategy.PROMPT_TUNE)
    variant = config.prompt_variant
    if variant is None:
        raise ConfigError("prompt tuning needs a prompt_variant")
    target = _restrict(dataset, config)
    _check_dataset(target)

    model_config = pretrained.config.with_attributes(1)
    frozen = ModelParameters(model_config, pretrained.copy(requires_grad=False).tensors)
    _check_backbone_fits(frozen, target)
    if config.warm_start_head:
        head_tensors = {name: Tensor(pretrained[name].data, requires_grad=True, name=name)
                        for name in pretrained.head_names()}
    else:
        head_tensors = init_head(model_config, config.seed)
    params = frozen.replace_head(head_tensors)
    prompts = init_prompts(variant, model_config, seed=(config.seed, PROMPT_STREAM))

    result = _run(Strategy.PROMPT_TUNE, params, params.head_names(),
                  lambda x: forward(params, x, prompts), target, config, prompts=prompts)
    expected = trainable_params(variant, model_config)
    if result.trainable_count != expected:
        logger.error(f"trainable count {result.trainable_count} differs from closed form {expected}")
    return result


def train(strategy: Union[Strategy, str], dataset: WindowDataset, config: TrainConfig,
          model_config: Optional[ModelConfig] = None, pretrained: Optional[ModelParameters] = None) -> TrainResult:
    """Dispatch on ``strategy``"""
    strategy = Strategy(strategy)
    if strategy in (Strategy.FULL, Strategy.SINGLE):
        if model_config is None:
            raise ConfigError(f"{strategy.value} needs a model config")
        runner = pretrain if strategy == Strategy.FULL else single_train
        return runner(dataset, model_config, replace(config, strategy=strategy))
    if pretrained is None:
        raise ConfigError(f"{strategy.value} needs pretrained parameters")
    if strategy == Strategy.FINE_TUNE:
        return fine_tune(pretrained, dataset, replace(config, strategy=strategy))
    return prompt_tune(pretrained, dataset, replace(config, strategy=strategy))
