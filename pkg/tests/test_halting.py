import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aat.errors import ConfigError, ContractError
from aat.halting import (
    DEFAULT_EPSILON,
    HaltingRecord,
    check_record,
    decide,
    force_minimum,
    halting_step_count,
    normalize_weights,
    ponder_cost,
    ponder_loss,
    raw_weights,
)
from aat.tensor import Tape


def brute_force(confidences, epsilon, min_steps, max_steps):
    """
    Enumerates every candidate step count and recomputes each product from scratch.
    """
    p = [0.0 if n < min_steps else c for n, c in enumerate(confidences)]

    def product(upto):
        value = 1.0
        for n in range(upto + 1):
            value *= 1.0 - p[n]
        return value

    candidates = [n for n in range(max_steps + 1) if product(n) < epsilon]
    steps = min([max_steps] + candidates)
    raw = [p[0]] + [p[n] * product(n - 1) for n in range(1, steps + 1)]
    total = np.asarray(raw).sum()
    if total > 0:
        normalized = list(np.asarray(raw) / total)
    else:
        normalized = [0.0] * steps + [1.0]
    return steps, raw, normalized


def random_case(rng):
    max_steps = int(rng.integers(1, 9))
    min_steps = int(rng.integers(0, max_steps + 1))
    epsilon = float(10.0 ** rng.uniform(-6, -0.5))
    kind = rng.integers(4)
    if kind == 0:
        confidences = rng.uniform(size=max_steps + 1)
    elif kind == 1:
        confidences = rng.beta(0.3, 0.3, size=max_steps + 1)
    elif kind == 2:
        confidences = rng.choice([0.0, 0.5, 1.0], size=max_steps + 1)
    else:
        confidences = rng.uniform(0.0, 0.05, size=max_steps + 1)
    return [float(c) for c in confidences], epsilon, min_steps, max_steps


def test_halting_rule_matches_brute_force_on_1000_sequences():
    rng = np.random.default_rng(2019)
    for _ in range(1000):
        confidences, epsilon, min_steps, max_steps = random_case(rng)
        decision = decide(confidences, epsilon, min_steps, max_steps)
        steps, raw, normalized = brute_force(confidences, epsilon, min_steps, max_steps)

        assert decision.steps == steps
        assert decision.beta_raw == raw
        assert decision.beta_norm == normalized


def test_worked_example_halts_on_a_confident_step():
    decision = decide([0.2, 0.3, 1.0], epsilon=1e-4, max_steps=4)

    assert decision.steps == 2
    assert decision.beta_raw == pytest.approx([0.2, 0.24, 0.56], abs=1e-12)
    assert decision.beta_norm == pytest.approx([0.2, 0.24, 0.56], abs=1e-12)


def test_worked_example_clamped_at_max_steps():
    decision = decide([0.1] * 6, epsilon=1e-4, max_steps=2)

    assert decision.steps == 2
    assert decision.beta_raw == pytest.approx([0.1, 0.09, 0.081], abs=1e-12)
    assert decision.beta_norm == pytest.approx(
        [0.1 / 0.271, 0.09 / 0.271, 0.081 / 0.271], abs=1e-12
    )


def test_worked_example_takes_no_attention_step():
    decision = decide([1.0, 0.3], epsilon=1e-4, max_steps=4)

    assert decision.steps == 0
    assert decision.beta_raw == [1.0]
    assert decision.beta_norm == [1.0]


def test_worked_example_ponder_cost():
    assert ponder_cost([0.2, 0.3, 1.0], 2, 1e-4) == pytest.approx(4.2e-4, abs=1e-12)
    assert ponder_cost([1.0], 0, 1e-4) == 0.0


def test_ponder_loss_value_matches_ponder_cost():
    confidences = [0.2, 0.3, 1.0]

    assert ponder_loss(confidences, 2, 1e-4).item() == pytest.approx(
        ponder_cost(confidences, 2, 1e-4), abs=1e-18
    )


def test_ponder_loss_gradient_flows_only_through_confidences():
    tape = Tape()
    confidences = [tape.leaf(p) for p in (0.2, 0.3, 0.9)]
    loss = ponder_loss(confidences, 2, 1e-2)
    grads = tape.backward(loss)

    # d/dp_n = -lambda * (n + 1); the step count adds nothing.
    assert [float(grads[p.grad_id]) for p in confidences] == pytest.approx(
        [-1e-2, -2e-2, -3e-2], abs=1e-15
    )
    assert loss.item() == pytest.approx(1e-2 * (2 + 0.8 + 1.4 + 0.3), abs=1e-15)


def test_ponder_loss_is_linear_in_lambda():
    confidences = [0.4, 0.1, 0.7]
    base = ponder_loss(confidences, 2, 1e-3).item()

    assert ponder_loss(confidences, 2, 3e-3).item() == pytest.approx(3 * base, rel=1e-12)
    assert ponder_loss(confidences, 2, 0.0).item() == 0.0


def test_negative_lambda_is_rejected():
    with pytest.raises(ConfigError):
        ponder_cost([0.5], 0, -1e-4)
    with pytest.raises(ConfigError):
        ponder_loss([0.5], 0, -1e-4)


def test_minimum_steps_are_forced():
    assert force_minimum([1.0, 1.0, 1.0, 0.2], 2) == [0.0, 0.0, 1.0, 0.2]
    decision = decide([1.0, 1.0, 1.0, 1.0], min_steps=2, max_steps=4)

    assert decision.steps == 2
    assert decision.beta_norm == [0.0, 0.0, 1.0]


def test_equal_minimum_and_maximum_give_one_hot_weights():
    decision = decide([0.9, 0.9, 0.3, 0.5], min_steps=3, max_steps=3)

    assert decision.steps == 3
    assert decision.beta_raw == [0.0, 0.0, 0.0, 0.5]
    assert decision.beta_norm == [0.0, 0.0, 0.0, 1.0]


def test_all_zero_weights_put_everything_on_the_last_step():
    decision = decide([0.0, 0.0, 0.0], max_steps=2)

    assert decision.beta_norm == [0.0, 0.0, 1.0]
    assert normalize_weights([0.0]) == [1.0]


def test_a_remainder_equal_to_epsilon_keeps_attending():
    assert halting_step_count([0.5, 0.5, 0.5], epsilon=0.5, max_steps=4) == 1


def test_short_confidence_sequence():
    with pytest.raises(ContractError):
        halting_step_count([0.1, 0.1], DEFAULT_EPSILON, max_steps=4)


def test_raw_weights_stop_at_the_step_count():
    assert raw_weights([0.5, 0.5, 0.5, 0.5], 1) == [0.5, 0.25]


confidence_lists = st.lists(st.floats(0.0, 1.0), min_size=9, max_size=9)


@settings(max_examples=300, deadline=None)
@given(
    confidence_lists,
    st.floats(1e-8, 0.9),
    st.floats(1e-8, 0.9),
    st.integers(0, 8),
    st.integers(1, 8),
)
def test_larger_epsilon_never_takes_more_steps(confidences, eps_a, eps_b, min_steps, max_steps):
    min_steps = min(min_steps, max_steps)
    low, high = sorted((eps_a, eps_b))
    forced = force_minimum(confidences, min_steps)

    assert halting_step_count(forced, high, max_steps) <= halting_step_count(
        forced, low, max_steps
    )


@settings(max_examples=300, deadline=None)
@given(confidence_lists, st.integers(0, 8), st.integers(1, 8))
def test_weights_are_a_distribution_within_bounds(confidences, min_steps, max_steps):
    min_steps = min(min_steps, max_steps)
    decision = decide(confidences, DEFAULT_EPSILON, min_steps, max_steps)

    assert min_steps <= decision.steps <= max_steps
    assert all(b >= 0 for b in decision.beta_raw + decision.beta_norm)
    assert abs(sum(decision.beta_norm) - 1.0) <= 1e-12
    assert len(decision.beta_norm) == decision.steps + 1


def test_record_round_trip_and_check():
    record = HaltingRecord(
        t=3,
        token=7,
        steps=2,
        confidences=[0.2, 0.3, 1.0],
        beta_raw=[0.2, 0.24, 0.56],
        beta_norm=[0.2, 0.24, 0.56],
        ponder_term=4.2e-4,
        sequence=1,
        alpha=[[[0.5, 0.5]], [[0.125, 0.875]]],
    )
    data = record.to_dict()

    assert sorted(data) == [
        "N_t",
        "alpha",
        "beta_norm",
        "beta_raw",
        "p",
        "ponder_term",
        "sequence",
        "t",
        "token",
    ]
    assert HaltingRecord.from_dict(data) == record
    assert check_record(record, 0, 4) == []


@pytest.mark.parametrize(
    "changes,problem",
    [
        ({"beta_norm": [0.5, 0.2, 0.2]}, "sum"),
        ({"beta_norm": [-0.1, 0.5, 0.6]}, "negative"),
        ({"steps": 5, "beta_norm": [1.0 / 6] * 6}, "above"),
        ({"steps": 0, "beta_norm": [1.0], "alpha": []}, "below"),
        ({"alpha": [[[0.5, 0.4]], [[0.25, 0.75]]]}, "attention weights of step 1, head 0 sum"),
        ({"alpha": [[[0.5, 0.5]], [[1.25, -0.25]]]}, "negative attention weight at step 2"),
        ({"alpha": [[[1.0]]]}, "1 attention weight sets for N_t=2"),
    ],
)
def test_check_record_reports_violations(changes, problem):
    data = {
        "t": 0,
        "token": 1,
        "steps": 2,
        "confidences": [0.2, 0.3, 1.0],
        "beta_raw": [0.2, 0.24, 0.56],
        "beta_norm": [0.2, 0.24, 0.56],
        "alpha": [[[0.5, 0.5]], [[0.25, 0.75]]],
    }
    data.update(changes)
    problems = check_record(HaltingRecord(**data), min_steps=1, max_steps=4)

    assert any(problem in p for p in problems)


def test_records_without_weights_are_not_checked():
    assert check_record(HaltingRecord(t=0, token=1, steps=4), min_steps=0, max_steps=2) == []


def test_records_without_attention_weights_still_load():
    data = {"t": 0, "token": 1, "N_t": 1, "p": [0.5, 1.0], "beta_raw": [0.5, 0.5], "beta_norm": [0.5, 0.5]}
    record = HaltingRecord.from_dict(data)

    assert record.alpha == []
    assert "alpha" not in record.to_dict()
    assert check_record(record, 0, 4) == []


def test_attention_weights_are_checked_for_fixed_step_records():
    record = HaltingRecord(t=0, token=1, steps=2, alpha=[[[1.0, 0.0]], [[0.3, 0.3]]])

    assert check_record(record) == ["attention weights of step 2, head 0 sum to 0.6"]
