"""
Ablation sweeps at desk scale: attention steps, the time cost penalty weight and the number of attention heads.

Every sweep trains one model per configuration and seed on the same synthetic dataset and reports the mean
and standard deviation of the validation metrics over seeds. The default settings are a reduced version of
the command line defaults (400 training captions instead of 5000, `d = 32` instead of 64, six epochs) so that
a whole sweep finishes within minutes on the pure-numpy tape; trials can run in parallel processes.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np

from .attention import AttentionConfig, AttentionKind
from .data.dataset import Dataset, generate_dataset
from .data.synth import SynthConfig
from .decoder import AatDecoder, AttentionMode, ModelConfig
from .errors import ConfigError
from .training import TrainConfig, evaluate, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrialSpec:
    """One model configuration of a sweep."""

    name: str
    mode: AttentionMode = AttentionMode.ADAPTIVE
    m_r: int = 1
    m_min: int = 0
    m_max: int = 4
    ponder_lambda: float = 1e-4
    kind: AttentionKind = AttentionKind.ADDITIVE
    heads: int = 1


SWEEPS: Dict[str, List[TrialSpec]] = {
    "steps": [
        TrialSpec("base", AttentionMode.BASE),
        TrialSpec("recurrent-2", AttentionMode.RECURRENT, m_r=2),
        TrialSpec("recurrent-4", AttentionMode.RECURRENT, m_r=4),
        TrialSpec("recurrent-8", AttentionMode.RECURRENT, m_r=8),
        TrialSpec("adaptive-0-4", AttentionMode.ADAPTIVE, m_min=0, m_max=4),
    ],
    "lambda": [
        TrialSpec(f"lambda-{value:g}", ponder_lambda=value)
        for value in (1e-1, 1e-3, 1e-4, 1e-5, 0.0)
    ],
    "heads": [TrialSpec("additive-1")]
    + [
        TrialSpec(f"dot-product-{h}", kind=AttentionKind.DOT_PRODUCT, heads=h)
        for h in (1, 2, 4, 8, 16)
    ],
}

METRICS = ("acc", "bleu4", "loss", "mean_steps", "min_steps", "max_steps")


@dataclass
class ExperimentSettings:
    synth: SynthConfig = field(default_factory=SynthConfig)
    data_seed: int = 0
    n_train: int = 400
    n_val: int = 60
    d: int = 32
    layer_norm: bool = True
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=6))

    workers: int = 1
    """Trials run in this many processes. Each trial then evaluates in its own process only."""

    def validate(self) -> "ExperimentSettings":
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("a sweep needs training and validation captions")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        self.train.validate()
        return self


def model_config(spec: TrialSpec, vocab_size: int, settings: ExperimentSettings) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        d=settings.d,
        feature_dim=settings.synth.feature_dim,
        attention=AttentionConfig(kind=spec.kind, heads=spec.heads),
        mode=spec.mode,
        m_r=spec.m_r,
        m_min=spec.m_min,
        m_max=spec.m_max,
        ponder_lambda=spec.ponder_lambda,
        layer_norm=settings.layer_norm,
    ).validate()


def run_trial(
    spec: TrialSpec,
    seed: int,
    settings: Optional[ExperimentSettings] = None,
    dataset: Optional[Dataset] = None,
) -> dict:
    """
    Trains and validates one model.

    :param seed: Seeds the parameters and the training order.
    :param dataset: A prebuilt dataset; generated from `settings` when missing.
    :return: A record with the trial name and seed and its validation metrics.
    """
    settings = settings or ExperimentSettings()
    if dataset is None:
        dataset = generate_dataset(
            settings.synth, settings.data_seed, settings.n_train, settings.n_val
        )
    decoder = AatDecoder(model_config(spec, len(dataset.vocab), settings), seed=seed)
    train(decoder, dataset, replace(settings.train, seed=seed))
    report = evaluate(
        decoder, dataset["val"], settings.train.max_len, settings.train.workers
    ).report
    record = {"name": spec.name, "seed": seed}
    record.update({key: getattr(report, key) for key in METRICS})
    logger.info("trial %s seed %d: %s", spec.name, seed, record)
    return record


def summarize(name: str, records: Sequence[dict]) -> dict:
    """Mean and standard deviation of every metric over the records of one configuration."""
    summary = {"name": name, "seeds": [r["seed"] for r in records]}
    for key in METRICS:
        values = np.array([r[key] for r in records], dtype=np.float64)
        summary[f"{key}_mean"] = float(values.mean())
        summary[f"{key}_std"] = float(values.std())
    return summary


def sweep(
    name: str,
    seeds: Sequence[int] = (0, 1, 2),
    settings: Optional[ExperimentSettings] = None,
    on_record: Optional[Callable[[dict], None]] = None,
    specs: Optional[Sequence[TrialSpec]] = None,
) -> List[dict]:
    """
    Runs every configuration of a sweep over every seed.

    :param name: `steps`, `lambda` or `heads`.
    :param on_record: Called with every trial record and then with the summary of each configuration.
    :param specs: Overrides the configurations of the named sweep.
    :return: One summary per configuration, in sweep order.
    """
    if specs is None:
        if name not in SWEEPS:
            raise ConfigError(f"unknown sweep {name!r}, expected one of {sorted(SWEEPS)}")
        specs = SWEEPS[name]
    if not seeds:
        raise ConfigError("a sweep needs at least one seed")
    settings = (settings or ExperimentSettings()).validate()
    dataset = generate_dataset(
        settings.synth, settings.data_seed, settings.n_train, settings.n_val
    )
    jobs = [(spec, seed) for spec in specs for seed in seeds]
    if settings.workers > 1:
        trial_settings = replace(settings, train=replace(settings.train, workers=1))
        run = partial(run_trial, settings=trial_settings, dataset=dataset)
        with ProcessPoolExecutor(max_workers=min(settings.workers, len(jobs))) as pool:
            # map yields in submission order, so records stream out as in a serial sweep
            return _collect(name, specs, seeds, pool.map(run, *zip(*jobs)), on_record)
    run = partial(run_trial, settings=settings, dataset=dataset)
    return _collect(name, specs, seeds, map(run, *zip(*jobs)), on_record)


def _collect(
    name: str,
    specs: Sequence[TrialSpec],
    seeds: Sequence[int],
    results: Iterator[dict],
    on_record: Optional[Callable[[dict], None]],
) -> List[dict]:
    summaries = []
    for spec in specs:
        records = []
        for _ in seeds:
            record = next(results)
            record["sweep"] = name
            records.append(record)
            if on_record is not None:
                on_record(record)
        summary = summarize(spec.name, records)
        summary["sweep"] = name
        summaries.append(summary)
        if on_record is not None:
            on_record(summary)
    return summaries
