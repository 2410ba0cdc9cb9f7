"""
ConvNova Training

AdamW with decoupled weight decay, cosine learning-rate decay, masked
language model pretraining, fine-tuning with best-epoch selection, and
read-only evaluation.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from src.convnova_model import MLM_CLASSES, ConvNova, ModelConfig, head_logits, mlm_logits, model_forward
from src.errors import ConfigError, NumericalError, PreconditionError, ShapeError
from src.genome_data import FastaRecord, LabeledSet, MaskedBatch, NucSeq, mlm_mask, split
from src.metrics import METRICS, MetricReport, build_report, check_metric_names
from src.settings import get_workers
from src.tensor_engine import (
    DTYPES,
    Rng,
    Tape,
    Tensor,
    masked_cross_entropy,
    precision,
    sigmoid_cross_entropy,
)
from src.utils.windowing import SequenceWindower

logger = logging.getLogger(__name__)

STREAM_PRETRAIN = 11
STREAM_FINETUNE = 12
STREAM_SPLIT = 13
TASK_HEADS = {"sequence": "sequence_class", "token": "token_class", "multilabel": "sequence_class"}


@dataclass
class TrainConfig:
    """Optimizer and loop settings (pretraining defaults: lr 1e-3, AdamW, wd 0.1, cosine decay)."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 1
    max_steps: Optional[int] = None
    window_length: int = 1024
    window_stride: Optional[int] = None
    mask_rate: float = 0.10
    valid_fraction: float = 0.10
    select_metric: str = "top1"
    precision: str = "float32"
    seed: int = 0
    progress: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise ConfigError(f"train.{name} must lie in [0, 1), got {value}")
        if self.weight_decay < 0 or not self.eps > 0:
            raise ConfigError(f"train.weight_decay must be >= 0 and train.eps > 0, got {self.weight_decay}, {self.eps}")
        if self.batch_size < 1 or self.epochs < 0 or self.window_length < 1:
            raise ConfigError(
                f"train.batch_size and train.window_length must be >= 1 and train.epochs >= 0, "
                f"got {self.batch_size}, {self.window_length}, {self.epochs}"
            )
        if self.window_stride is None:
            self.window_stride = self.window_length
        if self.window_stride < 1:
            raise ConfigError(f"train.window_stride must be >= 1, got {self.window_stride}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"train.max_steps must be >= 1, got {self.max_steps}")
        if not 0 <= self.mask_rate <= 1:
            raise ConfigError(f"train.mask_rate must lie in [0, 1], got {self.mask_rate}")
        if not 0 <= self.valid_fraction < 1:
            raise ConfigError(f"train.valid_fraction must lie in [0, 1), got {self.valid_fraction}")
        if self.select_metric not in METRICS:
            raise ConfigError(f"train.select_metric must be one of {METRICS}, got {self.select_metric!r}")
        if self.precision not in DTYPES:
            raise ConfigError(f"train.precision must be one of {sorted(DTYPES)}, got {self.precision!r}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown train config keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class AdamState:
    """First and second moments per parameter plus the step counter."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Dict[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


GradLike = Union[Tensor, np.ndarray]


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, GradLike], state: AdamState,
               config: TrainConfig, lr_t: float) -> Tuple[Dict[str, Tensor], AdamState]:
    """
    One AdamW update with bias correction and decoupled weight decay.

    param <- param - lr_t * (m_hat / (sqrt(v_hat) + eps) + weight_decay * param)

    Args:
        params: Name -> parameter tensor (updated in place)
        grads: Name -> gradient with the parameter's shape
        state: Moments from the previous step
        config: Supplies betas, eps and weight decay
        lr_t: Learning rate for this step

    Returns:
        (params, new state)
    """
    arrays: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        if name not in grads:
            raise ShapeError(f"No gradient for parameter {name}")
        grad = grads[name].data if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient for {name} has shape {grad.shape}, parameter has {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"Non-finite gradient for parameter {name}; step aborted")
        arrays[name] = grad

    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    bias1, bias2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    m_new: Dict[str, np.ndarray] = {}
    v_new: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        grad = arrays[name]
        m = b1 * state.m[name] + (1.0 - b1) * grad
        v = b2 * state.v[name] + (1.0 - b2) * grad * grad
        m_hat, v_hat = m / bias1, v / bias2
        update = m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * param.data
        param.data = (param.data - lr_t * update).astype(param.data.dtype)
        m_new[name], v_new[name] = m, v
    return params, AdamState(m_new, v_new, t)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps)); no warmup, floor 0."""
    if not 0 <= step <= total_steps:
        raise PreconditionError(f"Step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _cast_params(model: ConvNova, name: str) -> None:
    dtype = DTYPES[name]
    for tensor in model.params.named_tensors().values():
        if tensor.data.dtype != dtype:
            tensor.data = tensor.data.astype(dtype)


def _progress(total: Optional[int], desc: str, enabled: bool) -> tqdm:
    return tqdm(total=total, desc=desc, unit="step", dynamic_ncols=True, leave=False,
                disable=None if enabled else True)


def _loss_and_grads(model: ConvNova, loss_fn: Any, inputs: Tensor) -> Tuple[float, Dict[str, np.ndarray]]:
    named = model.params.named_tensors()
    with Tape() as tape:
        for tensor in named.values():
            tape.watch(tensor)
        features = model_forward(inputs, model.params, model.config)
        loss = loss_fn(features)
        grads = tape.backward(loss)
        return loss.item(), {name: grads.of(tensor).data for name, tensor in named.items()}


# ----------------------------------------------------------------------------
# Pretraining
# ----------------------------------------------------------------------------


@dataclass
class PretrainResult:
    model: ConvNova
    epoch_losses: List[float]
    step_losses: List[float]
    steps: int
    skipped_batches: int


def pretrain_mlm(model: ConvNova, corpus: Sequence[Union[FastaRecord, NucSeq]],
                 config: TrainConfig) -> PretrainResult:
    """
    Masked language model pretraining.

    Each epoch windows the corpus, shuffles the windows, masks each one at
    ``mask_rate`` with N, and takes one AdamW step per batch on the masked
    cross entropy. Batches without any masked position are skipped and
    counted.

    Args:
        model: Model with an 'mlm' head (parameters updated in place)
        corpus: FASTA records or sequences
        config: Training settings

    Returns:
        PretrainResult with per-epoch mean and per-step losses
    """
    if model.config.head != "mlm" or model.config.n_classes != MLM_CLASSES:
        raise ConfigError(f"Pretraining needs the mlm head with {MLM_CLASSES} classes, model has "
                          f"{model.config.head!r} with {model.config.n_classes}")
    sequences = [item.seq if isinstance(item, FastaRecord) else item for item in corpus]
    if not sequences:
        raise PreconditionError("Pretraining corpus is empty")
    windows = SequenceWindower().window_all(sequences, config.window_length, 'sliding', config.window_stride)
    if not windows:
        raise PreconditionError(f"Corpus has no sequence of length >= {config.window_length}")

    batches_per_epoch = math.ceil(len(windows) / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    logger.info("Pretraining on %d windows of %d bases: %d epochs, %d steps",
                len(windows), config.window_length, config.epochs, total_steps)

    rng = Rng(config.seed, stream=STREAM_PRETRAIN)
    epoch_losses: List[float] = []
    step_losses: List[float] = []
    step = skipped = 0

    with precision(config.precision):
        _cast_params(model, config.precision)
        named = model.params.named_tensors()
        state = AdamState.zeros(named)
        head = model.params.head

        with _progress(total_steps, "pretrain", config.progress) as bar:
            for epoch in range(config.epochs):
                if step >= total_steps:
                    break
                order = rng.permutation(len(windows))
                losses: List[float] = []
                for start in range(0, len(windows), config.batch_size):
                    if step >= total_steps:
                        break
                    rows = [mlm_mask(windows[i], config.mask_rate, rng) for i in order[start:start + config.batch_size]]
                    batch = MaskedBatch.stack(rows)
                    if batch.n_masked == 0:
                        skipped += 1
                        logger.debug("Skipped batch without masked positions (epoch %d)", epoch)
                        continue

                    def loss_fn(features: Tensor) -> Tensor:
                        return masked_cross_entropy(mlm_logits(features, head), batch.targets, batch.mask)

                    loss, grads = _loss_and_grads(model, loss_fn, batch.inputs)
                    lr = cosine_lr(step, total_steps, config.learning_rate)
                    _, state = adamw_step(named, grads, state, config, lr)
                    losses.append(loss)
                    step += 1
                    bar.update(1)
                    bar.set_postfix(loss=f"{loss:.4f}")

                step_losses.extend(losses)
                mean = float(np.mean(losses)) if losses else float("nan")
                epoch_losses.append(mean)
                logger.info("Epoch %d: mean masked loss %.4f over %d batches", epoch, mean, len(losses))

    if skipped:
        logger.warning("Skipped %d batches with an empty mask", skipped)
    return PretrainResult(model, epoch_losses, step_losses, step, skipped)


# ----------------------------------------------------------------------------
# Fine-tuning and evaluation
# ----------------------------------------------------------------------------


def check_compatible(config: ModelConfig, dataset: LabeledSet) -> None:
    """Reject a model whose head does not fit the dataset's task or class count."""
    expected = TASK_HEADS[dataset.task]
    if config.head != expected:
        raise ConfigError(f"{dataset.task} tasks need the {expected} head, model has {config.head!r}")
    if config.n_classes != dataset.n_classes:
        raise ConfigError(
            f"Model head predicts {config.n_classes} classes but the dataset has {dataset.n_classes}"
        )


def _task_loss(model: ConvNova, task: str, labels: np.ndarray) -> Any:
    def loss_fn(features: Tensor) -> Tensor:
        logits = head_logits(features, model.params, model.config)
        if task == "multilabel":
            return sigmoid_cross_entropy(logits, labels)
        return masked_cross_entropy(logits, labels, np.ones(labels.shape, dtype=bool))
    return loss_fn


def evaluate(model: ConvNova, dataset: LabeledSet, metrics: Sequence[str] = METRICS,
             batch_size: int = 32) -> MetricReport:
    """
    Score a dataset without touching the parameters.

    Batches are scored on ``get_workers()`` threads and reassembled in order,
    so the report does not depend on the worker count.

    Args:
        model: Model whose head matches the dataset
        dataset: Nonempty labeled set
        metrics: Names from ('mcc', 'f1', 'top1', 'auroc'); may be empty
        batch_size: Examples per forward pass

    Returns:
        MetricReport
    """
    if len(dataset) == 0:
        raise PreconditionError("Cannot evaluate an empty dataset")
    metrics = check_metric_names(metrics)
    check_compatible(model.config, dataset)
    batches = [list(range(start, min(start + batch_size, len(dataset))))
               for start in range(0, len(dataset), batch_size)]

    def score(indices: List[int]) -> np.ndarray:
        features = model_forward(dataset.inputs(indices), model.params, model.config)
        return head_logits(features, model.params, model.config).data

    workers = get_workers()
    if workers == 1:
        parts = [score(indices) for indices in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(score, batches))
    return build_report(np.concatenate(parts), dataset.labels, dataset.n_classes, dataset.task, metrics)


@dataclass
class FinetuneResult:
    model: ConvNova
    report: MetricReport
    best_epoch: int
    history: List[Dict[str, float]] = field(default_factory=list)


def _check_trainable(dataset: LabeledSet) -> None:
    if dataset.task == "multilabel":
        return
    present = np.flatnonzero(dataset.class_counts())
    if len(present) < 2:
        raise PreconditionError(f"Training set contains a single class {present.tolist()}; MCC is undefined")


def finetune(model: ConvNova, dataset: LabeledSet, config: TrainConfig,
             valid: Optional[LabeledSet] = None, metrics: Sequence[str] = METRICS) -> FinetuneResult:
    """
    Full-model fine-tuning with per-epoch validation.

    When no validation set is given, ``valid_fraction`` of the data is held
    out. After every epoch the validation set is scored; the parameters and
    report of the epoch with the best ``select_metric`` (earliest on ties)
    are kept.

    Args:
        model: Model with a head matching the dataset (updated in place)
        dataset: Training data
        config: Training settings
        valid: Optional explicit validation set
        metrics: Metrics to report

    Returns:
        FinetuneResult; zero epochs return the untrained model's evaluation
    """
    if len(dataset) == 0:
        raise PreconditionError("Cannot fine-tune on an empty dataset")
    check_compatible(model.config, dataset)
    metrics = check_metric_names(metrics)
    if config.select_metric not in metrics:
        metrics = metrics + [config.select_metric]

    train_set = dataset
    if valid is None and config.valid_fraction > 0:
        train_set, valid = split(dataset, 1.0 - config.valid_fraction, Rng(config.seed, stream=STREAM_SPLIT))
    if valid is None or len(valid) == 0:
        logger.warning("No validation examples; selecting epochs on the training set")
        valid = train_set
    _check_trainable(train_set)

    with precision(config.precision):
        _cast_params(model, config.precision)
        if config.epochs == 0:
            return FinetuneResult(model, evaluate(model, valid, metrics), best_epoch=-1)

        named = model.params.named_tensors()
        state = AdamState.zeros(named)
        rng = Rng(config.seed, stream=STREAM_FINETUNE)
        total_steps = config.epochs * math.ceil(len(train_set) / config.batch_size)
        if config.max_steps is not None:
            total_steps = min(total_steps, config.max_steps)
        logger.info("Fine-tuning on %d examples (%d held out): %d epochs, %d steps",
                    len(train_set), len(valid), config.epochs, total_steps)

        history: List[Dict[str, float]] = []
        best_score, best_epoch = -math.inf, -1
        best_report: Optional[MetricReport] = None
        best_params: Dict[str, np.ndarray] = {}
        step = 0

        with _progress(total_steps, "finetune", config.progress) as bar:
            for epoch in range(config.epochs):
                if step >= total_steps:
                    break
                order = rng.permutation(len(train_set))
                losses: List[float] = []
                for start in range(0, len(train_set), config.batch_size):
                    if step >= total_steps:
                        break
                    indices = order[start:start + config.batch_size]
                    loss_fn = _task_loss(model, train_set.task, train_set.labels[indices])
                    loss, grads = _loss_and_grads(model, loss_fn, train_set.inputs(indices))
                    _, state = adamw_step(named, grads, state, config,
                                          cosine_lr(step, total_steps, config.learning_rate))
                    losses.append(loss)
                    step += 1
                    bar.update(1)
                    bar.set_postfix(loss=f"{loss:.4f}")

                report = evaluate(model, valid, metrics)
                value = report.value(config.select_metric)
                score = -math.inf if value is None else value
                history.append({"epoch": epoch, "loss": float(np.mean(losses)), config.select_metric: score})
                logger.info("Epoch %d: loss %.4f, valid %s %.4f", epoch, history[-1]["loss"],
                            config.select_metric, score)
                if best_report is None or score > best_score:
                    best_score, best_epoch, best_report = score, epoch, report
                    best_params = {name: tensor.data.copy() for name, tensor in named.items()}

        for name, tensor in named.items():
            tensor.data = best_params[name]

    logger.info("Best epoch %d with valid %s %.4f", best_epoch, config.select_metric, best_score)
    return FinetuneResult(model, best_report, best_epoch, history)
