'''Training, evaluation and the module-ablation harness.'''
import dataclasses
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .asc_graph import validate_record
from .autodiff import Tape, backward, cross_entropy, grad_check
from .exceptions import TrainingDivergedException, ValidationException
from .layers import (GraphBatch, ModelConfig, ModelParams, PreparedGraph, bind_params, check_params,
                     fit_standardization, init_params, make_batch, model_forward, prepare_graph)
from .schema import DatasetRecord, EpochMetrics, EvalResult, GradCheckReport, Prediction

logger = logging.getLogger(__name__)

Dataset = Sequence[Union[DatasetRecord, PreparedGraph]]

ABLATION_SETTINGS = OrderedDict([
    ("DVM", "disable_dvm"),
    ("Edge-Enhanced", "disable_edge_enhance"),
    ("GNE", "disable_gne"),
    ("EPE", "disable_epe"),
    ("None", None),
])


@dataclass(frozen=True)
class AblationFlags:
    '''Modules removed from the full model. All False is the full model.'''
    disable_dvm: bool = False
    disable_edge_enhance: bool = False
    disable_gne: bool = False
    disable_epe: bool = False

    @classmethod
    def only(cls, name: Optional[str]) -> "AblationFlags":
        return cls(**{name: True}) if name else cls()


@dataclass(frozen=True)
class TrainConfig:
    '''
    Optimizer and loop settings.

    Args:
        learning_rate (float): Adam step size; 0 leaves parameters unchanged
        beta1, beta2 (float): Adam moment coefficients
        adam_eps (float): Adam denominator epsilon
        epochs (int): passes over the training set
        batch_size (int): graphs per optimizer step
        seed (int): seeds parameter init, shuffling and simulated walks
        disable_dvm, disable_edge_enhance, disable_gne, disable_epe (bool): ablation switches
    '''
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    disable_dvm: bool = False
    disable_edge_enhance: bool = False
    disable_gne: bool = False
    disable_epe: bool = False

    def __post_init__(self):
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValidationException(f"learning_rate must be a non-negative number, got {self.learning_rate}.")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValidationException(f"{name} must lie in [0, 1), got {getattr(self, name)}.")
        if self.adam_eps <= 0:
            raise ValidationException("adam_eps must be positive.")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationException("epochs and batch_size must be at least 1.")

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags(self.disable_dvm, self.disable_edge_enhance, self.disable_gne, self.disable_epe)


def ablate(config: ModelConfig, flags: AblationFlags) -> ModelConfig:
    '''ModelConfig with the flagged modules removed.

    disable_dvm feeds alpha as a raw 7th continuous column; disable_edge_enhance drops the
    edge terms from attention and freezes edge features; disable_gne zeroes the GNE block;
    disable_epe zeroes the EPE input.
    '''
    if flags == AblationFlags():
        return config
    changes = {}
    if flags.disable_dvm:
        changes["use_dvm"] = False
    if flags.disable_edge_enhance:
        changes["edge_enhance"] = False
    if flags.disable_gne:
        changes["use_gne"] = False
    if flags.disable_epe:
        changes["use_epe"] = False
    if changes.get("use_dvm", config.use_dvm) != config.use_dvm:
        # statistics belong to the old column set
        changes["feature_mean"] = None
        changes["feature_std"] = None
    return dataclasses.replace(config, **changes)


class Adam:
    '''Adaptive-moment optimizer updating ModelParams in place.'''

    def __init__(self, params: ModelParams, learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray]):
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name, value in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            value -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


class TrainResult(NamedTuple):
    '''The configuration actually trained (ablated, with statistics), its parameters and metrics.'''
    config: ModelConfig
    params: ModelParams
    history: List[EpochMetrics]


def prepare_dataset(dataset: Dataset, config: ModelConfig, seed: int = 0) -> List[PreparedGraph]:
    '''Validate labels against class_count and prepare every record.'''
    prepared = []
    for index, item in enumerate(dataset):
        if isinstance(item, PreparedGraph):
            graph = item
        else:
            graph = prepare_graph(validate_record(item, config.class_count), config, seed=seed)
        if not 0 <= graph.label < config.class_count:
            raise ValidationException(f"Label {graph.label} of item {index} is outside [0, {config.class_count}).")
        prepared.append(graph)
    return prepared


def batch_loss(batch: GraphBatch, config: ModelConfig, params: ModelParams):
    '''Mean cross entropy over the batch with its tape-derived gradients.

    Returns:
        tuple: (loss, logits array, gradient dict)
    '''
    tape = Tape()
    logits = model_forward(batch, config, bind_params(tape, params))
    loss = cross_entropy(logits, batch.labels)
    value = float(loss.data)
    if not math.isfinite(value):
        return value, logits.data, None
    return value, logits.data, backward(tape, loss)


def train(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
          val_dataset: Optional[Dataset] = None,
          on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> TrainResult:
    '''Mini-batch Adam on mean cross entropy.

    Args:
        dataset: training records or prepared graphs
        model_config (ModelConfig): architecture; ablation flags of train_config are applied to it
        train_config (TrainConfig): optimizer and loop settings
        val_dataset (optional): records evaluated after every epoch
        on_epoch (callable, optional): receives each epoch's metrics

    Returns:
        TrainResult: trained config, params and per-epoch metrics
    '''
    if not dataset:
        raise ValidationException("The training set is empty.")
    config = ablate(model_config, train_config.flags)
    prepared = prepare_dataset(dataset, config, train_config.seed)
    if not config.has_stats:
        config = fit_standardization(prepared, config)
    validation = prepare_dataset(val_dataset, config, train_config.seed) if val_dataset else None

    params = init_params(config, train_config.seed)
    optimizer = Adam(params, train_config.learning_rate, train_config.beta1, train_config.beta2,
                     train_config.adam_eps)
    rng = np.random.default_rng(train_config.seed)
    history = []
    logger.info("Training %d parameters on %d graphs for %d epochs", params.count(), len(prepared),
                train_config.epochs)

    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(prepared))
        total_loss, correct = 0.0, 0
        for number, start in enumerate(range(0, len(order), train_config.batch_size)):
            batch = make_batch([prepared[i] for i in order[start:start + train_config.batch_size]])
            loss, logits, grads = batch_loss(batch, config, params)
            if grads is None:
                raise TrainingDivergedException(
                    f"Non-finite loss ({loss}) at epoch {epoch}, batch {number}; "
                    f"try a lower learning rate than {train_config.learning_rate}.")
            optimizer.step(params, grads)
            total_loss += loss * batch.num_graphs
            correct += int(np.sum(np.argmax(logits, axis=1) == batch.labels))
            logger.debug("epoch %d batch %d loss %.6f", epoch, number, loss)

        metrics = EpochMetrics(epoch=epoch, loss=total_loss / len(prepared),
                               train_acc=correct / len(prepared),
                               val_acc=evaluate(validation, config, params).pcc if validation else None)
        history.append(metrics)
        logger.info("epoch %d: loss %.4f train_acc %.4f val_acc %s", epoch, metrics["loss"],
                    metrics["train_acc"], "-" if metrics["val_acc"] is None else f"{metrics['val_acc']:.4f}")
        if on_epoch is not None:
            on_epoch(metrics)

    return TrainResult(config, params, history)


def predict(dataset: Dataset, config: ModelConfig, params: ModelParams, batch_size: int = 64,
            seed: int = 0) -> Prediction:
    '''Argmax labels and softmax probabilities for each graph. seed is the base walk seed
    when epe_mode is "simulate".'''
    check_params(config, params)
    prepared = [item if isinstance(item, PreparedGraph) else prepare_graph(item, config, seed=seed)
                for item in dataset]
    probabilities = []
    for start in range(0, len(prepared), batch_size):
        logits = model_forward(make_batch(prepared[start:start + batch_size]), config, params).data
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        probabilities.append(shifted / shifted.sum(axis=1, keepdims=True))
    probabilities = np.concatenate(probabilities) if probabilities else np.zeros((0, config.class_count))
    return Prediction(np.argmax(probabilities, axis=1), probabilities)


def evaluate(dataset: Dataset, config: ModelConfig, params: ModelParams) -> EvalResult:
    '''Probability of correct classification and confusion matrix (rows true, columns predicted).'''
    check_params(config, params)
    prepared = prepare_dataset(dataset, config)
    if not prepared:
        raise ValidationException("The evaluation set is empty.")
    predicted = predict(prepared, config, params).labels
    labels = np.array([g.label for g in prepared])
    confusion = np.zeros((config.class_count, config.class_count), dtype=np.int64)
    np.add.at(confusion, (labels, predicted), 1)
    return EvalResult(pcc=float(np.trace(confusion)) / len(prepared), confusion=confusion, total=len(prepared))


def run_ablation(train_set: Dataset, test_set: Dataset, model_config: ModelConfig,
                 train_config: TrainConfig, seeds: Sequence[int] = (0,)) -> pd.DataFrame:
    '''Train the full model and each single-module ablation per seed and tabulate test PCC.

    Returns:
        pd.DataFrame: one row per removed module ("None" is the full model), a pcc column
                      per seed and their mean
    '''
    rows = []
    for seed in seeds:
        for setting, flag in ABLATION_SETTINGS.items():
            flags = AblationFlags.only(flag)
            config = dataclasses.replace(train_config, seed=seed, **dataclasses.asdict(flags))
            result = train(train_set, model_config, config)
            pcc = evaluate(test_set, result.config, result.params).pcc
            logger.info("ablation %s seed %d: PCC %.4f", setting, seed, pcc)
            rows.append({"setting": setting, "seed": seed, "pcc": pcc})

    table = pd.DataFrame(rows).pivot(index="setting", columns="seed", values="pcc")
    table.columns = [f"seed_{seed}" for seed in table.columns]
    table["mean"] = table.mean(axis=1)
    return table.reindex(list(ABLATION_SETTINGS)).reset_index()


def model_loss_fn(batch: GraphBatch, config: ModelConfig):
    '''Loss builder for grad_check: mean cross entropy of the batch under the given tensors.'''

    def loss(tape: Tape, tensors):
        return cross_entropy(model_forward(batch, config, tensors), batch.labels)

    return loss


def check_model_gradients(dataset: Dataset, model_config: ModelConfig, seed: int = 0, h: float = 1e-5,
                          tol: float = 1e-4, entries: Optional[int] = None) -> GradCheckReport:
    '''Finite-difference check of the full model loss on a dataset, with seeded parameters.'''
    prepared = prepare_dataset(dataset, model_config, seed)
    config = model_config if model_config.has_stats else fit_standardization(prepared, model_config)
    params = init_params(config, seed)
    return grad_check(model_loss_fn(make_batch(prepared), config), dict(params.items()),
                      h=h, tol=tol, entries=entries, seed=seed)


def split_dataset(dataset: Sequence, test_fraction: float = 0.2, seed: int = 0):
    '''Seeded shuffle split into (train, test); both parts keep at least one item.'''
    if len(dataset) < 2:
        raise ValidationException("Need at least two records to split.")
    if not 0 < test_fraction < 1:
        raise ValidationException(f"test_fraction must lie in (0, 1), got {test_fraction}.")
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = min(max(1, int(round(test_fraction * len(dataset)))), len(dataset) - 1)
    return [dataset[i] for i in order[cut:]], [dataset[i] for i in order[:cut]]
