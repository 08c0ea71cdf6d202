"""
Cross-entropy training with Adam, learning rate annealing, scheduled sampling and the time cost penalty.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .data.dataset import Dataset, Example
from .data.vocab import BOS, EOS, Vocabulary
from .decoder import AatDecoder, DecodeMode, ModelConfig, decode_sequence
from .errors import ConfigError, DimensionError, TrainingDivergedError
from .halting import HaltingRecord
from .layers import ParameterSet, load_parameters, save_parameters
from .metrics import (
    EvaluationReport,
    attention_stats,
    bleu,
    token_accuracy,
)
from .tensor import Tape

logger = logging.getLogger(__name__)

CLIP_NORM = 5.0


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: ParameterSet,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """
    One bias-corrected Adam update, applied to `params` in place.

    ``` python
    >>> params = ParameterSet({"w": [0.0]})
    >>> _ = adam_step(params, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    >>> round(float(params["w"][0]), 6)
    -0.1
    ```

    :return: The updated optimizer state (the same object as `state`).
    """
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, value in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != value.shape:
            raise DimensionError(f"adam {name}", value.shape, grad.shape)
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * grad
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        params[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def lr_schedule(epoch: int, lr0: float, decay: float = 0.8, every: int = 2) -> float:
    """
    `lr0 * decay ** (epoch // every)`

    ``` python
    >>> round(lr_schedule(2, 1e-4), 12)
    8e-05
    ```
    """
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return lr0 * decay ** (epoch // every)


def scheduled_sampling_prob(
    epoch: int, step: float = 0.05, every: int = 3, cap: float = 0.25
) -> float:
    """
    The probability of feeding the decoder its own sample instead of the ground truth token:
    `min(cap, step * (epoch // every))`.
    """
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return min(cap, step * (epoch // every))


def clip_gradients(
    grads: Mapping[str, np.ndarray], max_norm: float = CLIP_NORM
) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Rescales the gradients so their global L2 norm is at most `max_norm`.

    :return: The (possibly rescaled) gradients and the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 10
    """Instances per parameter update; their gradients are summed."""

    lr: float = 2e-3
    lr_decay: float = 0.8
    lr_every: int = 2
    ss_step: float = 0.05
    ss_every: int = 3
    ss_cap: float = 0.25
    clip_norm: float = CLIP_NORM
    max_len: int = 16
    """Longest caption produced by greedy decoding during validation."""

    seed: int = 0
    workers: int = 1
    """Processes used for validation; 1 evaluates in the training process."""

    progress: bool = False
    """Show a progress bar per epoch."""

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1 or self.lr_every < 1:
            raise ConfigError("invalid learning rate schedule")
        if self.ss_step < 0 or self.ss_every < 1 or not 0 <= self.ss_cap <= 1:
            raise ConfigError("invalid scheduled sampling schedule")
        if self.clip_norm <= 0 or self.max_len < 1 or self.workers < 1:
            raise ConfigError("clip_norm, max_len and workers must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def instance_loss(
    decoder: AatDecoder,
    example: Example,
    tape: Optional[Tape] = None,
    sampling_prob: float = 0.0,
    rng: Optional[np.random.Generator] = None,
):
    """
    Teacher-forced decode of one example (its caption followed by EOS).

    :return: The bound decoder and the decode result; the loss tensor lives on `tape` when one is given.
    """
    bound = decoder.bind(tape)
    result = decode_sequence(
        bound,
        example.features.vectors,
        BOS,
        EOS,
        targets=list(example.target) + [EOS],
        mode=DecodeMode.TEACHER_FORCING,
        sampling_prob=sampling_prob,
        rng=rng,
    )
    return bound, result


@dataclass
class EvaluationResult:
    report: EvaluationReport
    traces: List[List[HaltingRecord]]
    captions: List[List[int]]


def _evaluate_examples(
    decoder: AatDecoder, examples: Sequence[Example], max_len: int
) -> List[tuple]:
    rows = []
    for example in examples:
        _, forced = instance_loss(decoder, example)
        greedy = decode_sequence(
            decoder.bind(),
            example.features.vectors,
            BOS,
            EOS,
            max_len=max_len,
            mode=DecodeMode.GREEDY,
        )
        rows.append(
            (forced.cross_entropy, forced.ponder, forced.tokens, greedy.tokens, greedy.trace)
        )
    return rows


def _evaluate_chunk(payload: tuple) -> List[tuple]:
    config, arrays, examples, max_len = payload
    decoder = AatDecoder(ModelConfig.from_dict(config), ParameterSet(arrays))
    return _evaluate_examples(decoder, examples, max_len)


def evaluate(
    decoder: AatDecoder,
    examples: Sequence[Example],
    max_len: int = 16,
    workers: int = 1,
) -> EvaluationResult:
    """
    Teacher-forced loss and token accuracy plus greedy BLEU and attention step statistics.

    With `workers > 1` the examples are split into contiguous chunks evaluated in separate processes on a
    snapshot of the parameters; results are merged in example order, so the report does not depend on
    `workers`.
    """
    if not examples:
        raise ConfigError("nothing to evaluate")
    if workers > 1 and len(examples) > 1:
        chunks = np.array_split(np.arange(len(examples)), min(workers, len(examples)))
        config = decoder.config.to_dict()
        arrays = dict(decoder.params.items())
        payloads = [
            (config, arrays, [examples[i] for i in chunk], max_len) for chunk in chunks
        ]
        with ProcessPoolExecutor(max_workers=len(payloads)) as pool:
            rows = [row for part in pool.map(_evaluate_chunk, payloads) for row in part]
    else:
        rows = _evaluate_examples(decoder, examples, max_len)

    references = [list(e.target) + [EOS] for e in examples]
    predictions = [row[2] for row in rows]
    captions = [row[3] for row in rows]
    traces = [row[4] for row in rows]
    for index, trace in enumerate(traces):
        for record in trace:
            record.sequence = index
    scores = bleu(
        [[str(t) for t in c] for c in captions],
        [[str(t) for t in e.target] for e in examples],
    )
    stats = attention_stats(r for trace in traces for r in trace)
    report = EvaluationReport(
        loss=float(np.mean([row[0] for row in rows])),
        ponder=float(np.mean([row[1] for row in rows])),
        acc=token_accuracy(predictions, references),
        bleu1=scores[1],
        bleu2=scores[2],
        bleu3=scores[3],
        bleu4=scores[4],
        min_steps=stats.min,
        max_steps=stats.max,
        mean_steps=stats.mean,
        n=len(examples),
    )
    return EvaluationResult(report, traces, captions)


@dataclass
class TrainResult:
    history: List[dict]
    best_epoch: int
    best_loss: float
    params: ParameterSet
    """The parameters with the lowest validation loss."""


def check_training_data(config: ModelConfig, dataset: Dataset) -> None:
    """
    Raises `ConfigError` when `dataset` cannot train a decoder built from `config`.
    """
    train_set = dataset["train"]
    _check_compatible(config, dataset.vocab, dataset.feature_dim)
    if not train_set:
        raise ConfigError("the training split is empty")


def train(
    decoder: AatDecoder,
    dataset: Dataset,
    config: TrainConfig,
    checkpoint: Union[str, Path, None] = None,
    on_record: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """
    Trains `decoder` in place on the `train` split of `dataset`, validating on `val` after every epoch.

    The loss of an instance is the sum over decoding steps of the cross-entropy and the time cost penalty.
    Gradients of `batch_size` instances are summed, clipped to a global norm of `clip_norm` and applied
    with Adam. After training the decoder holds the parameters of the epoch with the lowest validation
    loss (training loss when there is no validation data), which are also written to `checkpoint`.

    :param on_record: Called with one log record per epoch and split, with the keys
    `epoch, split, loss, ponder, mean_steps, acc, bleu4, lr, ss_prob`.
    :raises TrainingDivergedError: When the loss of an instance is not finite.
    """
    config.validate()
    check_training_data(decoder.config, dataset)
    train_set = dataset["train"]
    val_set = dataset.splits.get("val", [])

    rng = np.random.default_rng(config.seed)
    adam = AdamState()
    history: List[dict] = []
    best = (math.inf, -1, decoder.params.copy())

    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.lr, config.lr_decay, config.lr_every)
        ss_prob = scheduled_sampling_prob(
            epoch, config.ss_step, config.ss_every, config.ss_cap
        )
        order = rng.permutation(len(train_set))
        batches = [
            order[i : i + config.batch_size]
            for i in range(0, len(order), config.batch_size)
        ]
        totals = {"loss": 0.0, "ponder": 0.0, "steps": 0, "records": 0}
        predictions, references = [], []
        for batch_index, batch in enumerate(
            tqdm(batches, desc=f"epoch {epoch}", disable=not config.progress, leave=False)
        ):
            summed: Dict[str, np.ndarray] = {}
            for index in batch:
                example = train_set[int(index)]
                tape = Tape()
                bound, result = instance_loss(decoder, example, tape, ss_prob, rng)
                loss = result.loss.item()
                if not math.isfinite(loss):
                    raise TrainingDivergedError(epoch, batch_index, int(index), loss)
                grads = bound.gradients(tape.backward(result.loss))
                for name, grad in grads.items():
                    summed[name] = summed[name] + grad if name in summed else grad
                totals["loss"] += result.cross_entropy
                totals["ponder"] += result.ponder
                totals["steps"] += sum(r.steps for r in result.trace)
                totals["records"] += len(result.trace)
                predictions.append(result.tokens)
                references.append(list(example.target) + [EOS])
            clipped, norm = clip_gradients(summed, config.clip_norm)
            logger.debug("epoch %d batch %d: gradient norm %.4g", epoch, batch_index, norm)
            adam_step(decoder.params, clipped, adam, lr)

        record = {
            "epoch": epoch,
            "split": "train",
            "loss": totals["loss"] / len(train_set),
            "ponder": totals["ponder"] / len(train_set),
            "mean_steps": totals["steps"] / max(totals["records"], 1),
            "acc": token_accuracy(predictions, references),
            "bleu4": None,
            "lr": lr,
            "ss_prob": ss_prob,
        }
        _emit_record(history, record, on_record)
        selection_loss = record["loss"]

        if val_set:
            report = evaluate(decoder, val_set, config.max_len, config.workers).report
            record = {
                "epoch": epoch,
                "split": "val",
                "loss": report.loss,
                "ponder": report.ponder,
                "mean_steps": report.mean_steps,
                "acc": report.acc,
                "bleu4": report.bleu4,
                "lr": lr,
                "ss_prob": ss_prob,
            }
            _emit_record(history, record, on_record)
            selection_loss = report.loss

        if selection_loss < best[0]:
            best = (selection_loss, epoch, decoder.params.copy())
            if checkpoint is not None:
                save_checkpoint(checkpoint, decoder, dataset.vocab)
            logger.info("epoch %d: new best loss %.4f", epoch, selection_loss)

    decoder.params = best[2]
    return TrainResult(history, best[1], best[0], best[2])


def _emit_record(
    history: List[dict], record: dict, on_record: Optional[Callable[[dict], None]]
) -> None:
    history.append(record)
    logger.info(
        "epoch %d %s: loss=%.4f ponder=%.4g steps=%.2f acc=%.3f",
        record["epoch"],
        record["split"],
        record["loss"],
        record["ponder"],
        record["mean_steps"],
        record["acc"],
    )
    if on_record is not None:
        on_record(record)


def _check_compatible(config: ModelConfig, vocab: Vocabulary, feature_dim: int) -> None:
    if config.vocab_size != len(vocab):
        raise ConfigError(
            f"model vocabulary has {config.vocab_size} tokens, dataset vocabulary has {len(vocab)}"
        )
    if config.feature_dim != feature_dim:
        raise ConfigError(
            f"model expects {config.feature_dim}-d features, dataset has {feature_dim}-d features"
        )


def save_checkpoint(
    path: Union[str, Path], decoder: AatDecoder, vocab: Optional[Vocabulary] = None
) -> None:
    """
    Writes the parameters with the model configuration (and the vocabulary, when given) as JSON extras.
    """
    extras = {"config": json.dumps(decoder.config.to_dict(), sort_keys=True)}
    if vocab is not None:
        extras["vocab"] = json.dumps(vocab.tokens)
    save_parameters(path, decoder.params, extras)


def load_checkpoint(
    path: Union[str, Path]
) -> Tuple[AatDecoder, Optional[Vocabulary]]:
    params, extras = load_parameters(path)
    if "config" not in extras:
        raise ConfigError(f"{path} holds no model configuration")
    config = ModelConfig.from_dict(json.loads(extras["config"]))
    vocab = None
    if "vocab" in extras:
        vocab = Vocabulary(json.loads(extras["vocab"])[4:])
    expected = AatDecoder.initial_parameters(config)
    if set(expected) != set(params) or any(
        expected[name].shape != params[name].shape for name in expected
    ):
        raise ConfigError(f"{path}: parameters do not match the stored configuration")
    return AatDecoder(config, params), vocab


def check_vocab(decoder: AatDecoder, checkpoint_vocab: Optional[Vocabulary], dataset: Dataset) -> None:
    """
    Raises `ConfigError` when a checkpoint does not fit a dataset.
    """
    if checkpoint_vocab is not None and checkpoint_vocab != dataset.vocab:
        raise ConfigError("the checkpoint was trained with a different vocabulary")
    _check_compatible(decoder.config, dataset.vocab, dataset.feature_dim)
