"""
The halting rule: how many attention steps to take, how to weight the state of every step, and what the
time cost of those steps is.

The functions working on plain floats are the reference the decoder's tensor computation is held to. Both
accumulate the running product of `1 - p` left to right, so their results are identical bit for bit.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, as_tensor, mul, stop_gradient, sub

DEFAULT_EPSILON = 1e-4
"""The halting threshold."""

NORMALIZATION_TOLERANCE = 1e-12

ATTENTION_TOLERANCE = 1e-9
"""How far a row of attention weights may sum away from one."""


def force_minimum(confidences: Sequence[float], min_steps: int) -> List[float]:
    """
    Sets the confidence of the first `min_steps` steps to zero, which guarantees at least `min_steps` steps.
    """
    return [0.0 if n < min_steps else float(p) for n, p in enumerate(confidences)]


def halting_step_count(
    confidences: Sequence[float], epsilon: float, max_steps: int
) -> int:
    """
    The number of attention steps: the first `n` at which the product of `1 - p` over steps `0..n` drops
    below `epsilon` (strictly), capped at `max_steps`.

    ``` python
    >>> halting_step_count([0.2, 0.3, 1.0], epsilon=1e-4, max_steps=4)
    2
    ```

    :param confidences: `p_0, p_1, ...`; must be long enough to reach a decision.
    """
    remainder = 1.0
    for n, p in enumerate(confidences):
        remainder *= 1.0 - p
        if remainder < epsilon or n >= max_steps:
            return n
    raise ContractError("confidence sequence ended before a halting decision")


def raw_weights(confidences: Sequence[float], steps: int) -> List[float]:
    """
    `beta_0 = p_0` and `beta_n = p_n * prod_{n' < n} (1 - p_n')` for `n = 1..steps`.
    """
    weights = []
    remainder = 1.0
    for p in confidences[: steps + 1]:
        weights.append(p * remainder if weights else float(p))
        remainder *= 1.0 - p
    return weights


def normalize_weights(weights: Sequence[float]) -> List[float]:
    """
    Rescales the weights to sum to one. When every weight is zero all mass goes to the last step.
    """
    weights = np.asarray(weights, dtype=np.float64)
    norm = weights.sum()
    if norm <= 0.0:
        return one_hot_last(len(weights))
    return (weights / norm).tolist()


def one_hot_last(length: int) -> List[float]:
    return [0.0] * (length - 1) + [1.0]


def ponder_cost(
    confidences: Sequence[float], steps: int, ponder_lambda: float
) -> float:
    """
    `lambda * (N + sum_{n=0..N} (n + 1) * (1 - p_n))`
    """
    _check_lambda(ponder_lambda)
    cost = float(steps)
    for n, p in enumerate(confidences[: steps + 1]):
        cost = cost + (n + 1) * (1.0 - p)
    return ponder_lambda * cost


def ponder_loss(
    confidences: Sequence[Union[Tensor, float]], steps: int, ponder_lambda: float
) -> Tensor:
    """
    The time cost penalty as a differentiable scalar. The step count enters through `stop_gradient`, so
    gradients only flow through the `1 - p` terms.

    :param confidences: The confidences `p_0..p_N` as scalar tensors (or floats).
    :param steps: `N`.
    :param ponder_lambda: The penalty weight, `>= 0`.
    """
    _check_lambda(ponder_lambda)
    cost = stop_gradient(Tensor(float(steps)))
    for n, p in enumerate(confidences[: steps + 1]):
        cost = cost + mul(n + 1, sub(1.0, as_tensor(p)))
    return mul(ponder_lambda, cost)


def _check_lambda(ponder_lambda: float) -> None:
    if ponder_lambda < 0:
        raise ConfigError(f"the ponder penalty must be >= 0, got {ponder_lambda}")


@dataclass
class HaltingDecision:
    """The outcome of the halting rule for one decoding step."""

    steps: int
    confidences: List[float]
    beta_raw: List[float]
    beta_norm: List[float]


def decide(
    confidences: Sequence[float],
    epsilon: float = DEFAULT_EPSILON,
    min_steps: int = 0,
    max_steps: int = 4,
) -> HaltingDecision:
    """
    Applies the whole rule to a scripted confidence sequence.

    ``` python
    >>> [round(b, 6) for b in decide([0.1, 0.1, 0.1, 0.1], max_steps=2).beta_raw]
    [0.1, 0.09, 0.081]
    ```
    """
    forced = force_minimum(confidences, min_steps)
    steps = halting_step_count(forced, epsilon, max_steps)
    raw = raw_weights(forced, steps)
    return HaltingDecision(steps, forced[: steps + 1], raw, normalize_weights(raw))


@dataclass
class HaltingRecord:
    """
    What happened at one decoding step. Base and recurrent decoding leave the confidence and weight lists
    empty.

    `alpha` holds the attention weights of every attention step taken: one `heads x k` matrix per step, each
    row a distribution over the `k` regions.
    """

    t: int
    token: int
    steps: int
    confidences: List[float] = field(default_factory=list)
    beta_raw: List[float] = field(default_factory=list)
    beta_norm: List[float] = field(default_factory=list)
    ponder_term: float = 0.0
    sequence: Optional[int] = None
    alpha: List[List[List[float]]] = field(default_factory=list)

    def to_dict(self) -> dict:
        record = {
            "t": self.t,
            "token": self.token,
            "N_t": self.steps,
            "p": self.confidences,
            "beta_raw": self.beta_raw,
            "beta_norm": self.beta_norm,
            "ponder_term": self.ponder_term,
        }
        if self.alpha:
            record["alpha"] = self.alpha
        if self.sequence is not None:
            record["sequence"] = self.sequence
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "HaltingRecord":
        return cls(
            t=int(record["t"]),
            token=int(record["token"]),
            steps=int(record["N_t"]),
            confidences=list(record.get("p", [])),
            beta_raw=list(record.get("beta_raw", [])),
            beta_norm=list(record.get("beta_norm", [])),
            ponder_term=float(record.get("ponder_term", 0.0)),
            sequence=record.get("sequence"),
            alpha=[[list(head) for head in step] for step in record.get("alpha", [])],
        )


def check_record(
    record: HaltingRecord, min_steps: Optional[int] = None, max_steps: Optional[int] = None
) -> List[str]:
    """
    Re-checks the invariants of a record.

    :return: A description of every violated invariant; empty when the record is valid.
    """
    problems = []
    if record.beta_norm:
        if any(b < 0 for b in record.beta_raw + record.beta_norm):
            problems.append("negative weight")
        if abs(float(np.sum(record.beta_norm)) - 1.0) > NORMALIZATION_TOLERANCE:
            problems.append(f"normalized weights sum to {np.sum(record.beta_norm)!r}")
        if len(record.beta_norm) != record.steps + 1:
            problems.append("weight count does not match the step count")
        if min_steps is not None and record.steps < min_steps:
            problems.append(f"N_t={record.steps} below the minimum {min_steps}")
        if max_steps is not None and record.steps > max_steps:
            problems.append(f"N_t={record.steps} above the maximum {max_steps}")
    if record.alpha:
        if len(record.alpha) != record.steps:
            problems.append(
                f"{len(record.alpha)} attention weight sets for N_t={record.steps}"
            )
        for n, step in enumerate(record.alpha, start=1):
            for head, weights in enumerate(step):
                if any(a < 0 for a in weights):
                    problems.append(f"negative attention weight at step {n}, head {head}")
                if abs(float(np.sum(weights)) - 1.0) > ATTENTION_TOLERANCE:
                    problems.append(
                        f"attention weights of step {n}, head {head} sum to {float(np.sum(weights))!r}"
                    )
    return problems
