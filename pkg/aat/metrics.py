"""
Evaluation metrics: cross-entropy, token accuracy, corpus BLEU and attention step statistics.
"""

import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np
from sacrebleu.metrics import BLEU

from .errors import MetricError, TokenLookupError
from .halting import HaltingRecord

PROBABILITY_FLOOR = 1e-12


def cross_entropy(distribution: Sequence[float], target: int) -> float:
    """
    `-log(distribution[target])`, with the probability clamped to at least `1e-12`.

    ``` python
    >>> round(cross_entropy([0.7, 0.3], 1), 5)
    1.20397
    ```
    """
    distribution = np.asarray(distribution, dtype=np.float64)
    if not 0 <= target < distribution.shape[0]:
        raise TokenLookupError(target, distribution.shape[0])
    return -math.log(max(float(distribution[target]), PROBABILITY_FLOOR))


def token_accuracy(
    predictions: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]
) -> float:
    """
    The fraction of positions where the prediction equals the target, over all sequences.
    """
    if len(predictions) != len(targets):
        raise MetricError("predictions and targets differ in number of sequences")
    correct = total = 0
    for predicted, target in zip(predictions, targets):
        if len(predicted) != len(target):
            raise MetricError("a prediction and its target differ in length")
        correct += sum(int(p == t) for p, t in zip(predicted, target))
        total += len(target)
    if total == 0:
        raise MetricError("token accuracy over zero tokens")
    return correct / total


def bleu(
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    n_max: int = 4,
) -> Dict[int, float]:
    """
    Corpus-level BLEU-1 to BLEU-`n_max`: the geometric mean of the clipped n-gram precisions times the
    brevity penalty, without smoothing. A precision of zero makes the score zero.

    :param hypotheses: One token list per candidate.
    :param references: One reference token list per candidate.
    :return: A map of `n` to the BLEU-`n` score in `[0, 1]`.
    """
    if not hypotheses:
        raise MetricError("BLEU over an empty hypothesis set")
    if len(hypotheses) != len(references):
        raise MetricError(
            f"{len(hypotheses)} hypotheses but {len(references)} references"
        )
    if n_max < 1:
        raise MetricError("n_max must be >= 1")
    hyps = [" ".join(h) for h in hypotheses]
    refs = [[" ".join(r) for r in references]]
    scores = {}
    for n in range(1, n_max + 1):
        metric = BLEU(
            tokenize="none", smooth_method="none", max_ngram_order=n, force=True
        )
        scores[n] = metric.corpus_score(hyps, refs).score / 100.0
    return scores


@dataclass(frozen=True)
class AttentionStats:
    min: int
    max: int
    mean: float


def attention_stats(
    traces: Iterable[Union[HaltingRecord, int]]
) -> AttentionStats:
    """
    Order statistics and the mean of the attention step counts over every decoding step.

    :param traces: Halting records, or bare step counts.
    """
    steps: List[int] = [
        r.steps if isinstance(r, HaltingRecord) else int(r) for r in traces
    ]
    if not steps:
        raise MetricError("attention statistics over zero decoding steps")
    return AttentionStats(min(steps), max(steps), sum(steps) / len(steps))


@dataclass
class EvaluationReport:
    loss: float
    """Mean teacher-forced cross-entropy per caption."""

    ponder: float
    """Mean time cost penalty per caption."""

    acc: float
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    min_steps: int
    max_steps: int
    mean_steps: float
    n: int
    """Number of evaluated examples."""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
