"""
The two-layer caption decoder with base, recurrent and adaptive attention.

All three modes run through one state machine. Base attention is one attention step whose query is the
input-layer hidden state; recurrent attention takes a fixed number of steps with a learned query; adaptive
attention lets a confidence network decide how many steps to take and mixes the states of every step.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .attention import (
    Attention,
    AttentionConfig,
    PreparedFeatures,
    initialize_attention,
)
from .errors import ConfigError, DimensionError, EmptyFeatureSetError
from .halting import (
    DEFAULT_EPSILON,
    HaltingRecord,
    one_hot_last,
    ponder_loss,
)
from .layers import (
    Embedding,
    LayerNorm,
    Linear,
    LstmCell,
    ParameterSet,
    embed,
    lstm_step,
)
from .tensor import (
    Tape,
    Tensor,
    add,
    concat,
    div,
    log,
    matmul,
    mul,
    pick,
    relu,
    sigmoid,
    softmax,
    stack,
    sub,
    total,
)

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
"""Probabilities are clamped to at least this value before taking logarithms."""

HALTING_BIAS = 4.0
"""
Initial bias of the halting unit. Confidences start near `sigmoid(4) = 0.982`, so an untrained adaptive
decoder halts after two attention steps under the default threshold instead of always running to `M_max`.
"""


class AttentionMode(Enum):
    """
    How many attention steps the decoder takes per output token.
    """

    BASE = "base"
    RECURRENT = "recurrent"
    ADAPTIVE = "adaptive"


class DecodeMode(Enum):
    TEACHER_FORCING = "teacher_forcing"
    GREEDY = "greedy"


@dataclass
class ModelConfig:
    vocab_size: int
    """Number of tokens, special tokens included."""

    d: int = 64
    """Hidden size of both LSTMs, word embedding size and attended vector size."""

    feature_dim: int = 32
    """Length of the raw region feature vectors; projected to `d` once per image."""

    attention: AttentionConfig = field(default_factory=AttentionConfig)
    mode: AttentionMode = AttentionMode.ADAPTIVE

    m_r: int = 1
    """Attention steps per token in recurrent mode."""

    m_min: int = 0
    """Minimum attention steps per token in adaptive mode."""

    m_max: int = 4
    """Maximum attention steps per token in adaptive mode."""

    epsilon: float = DEFAULT_EPSILON
    """Halting threshold."""

    ponder_lambda: float = 1e-4
    """Weight of the time cost penalty."""

    layer_norm: bool = True
    """Normalize the LSTM state after every adaptive attention step."""

    halting_bias: float = HALTING_BIAS
    """Initial bias of the confidence network's output unit."""

    def __post_init__(self):
        # The attention dimensions always follow the decoder width. The caller's config is left untouched.
        self.attention = replace(
            self.attention, query_dim=self.d, key_dim=self.d, value_dim=self.d
        )

    def validate(self) -> "ModelConfig":
        if self.vocab_size < 1 or self.d < 2 or self.feature_dim < 1:
            raise ConfigError("vocab_size and feature_dim must be positive and d >= 2")
        if not isinstance(self.mode, AttentionMode):
            raise ConfigError(f"unknown attention mode {self.mode!r}")
        if self.mode is AttentionMode.BASE and self.m_r != 1:
            raise ConfigError(f"base attention takes exactly one step, got M_r={self.m_r}")
        if self.m_r < 1:
            raise ConfigError(f"M_r must be >= 1, got {self.m_r}")
        if self.m_min < 0 or self.m_max < 1 or self.m_min > self.m_max:
            raise ConfigError(
                f"need 0 <= M_min <= M_max and M_max >= 1, got M_min={self.m_min} M_max={self.m_max}"
            )
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.ponder_lambda < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.ponder_lambda}")
        if not np.isfinite(self.halting_bias):
            raise ConfigError(f"halting_bias must be finite, got {self.halting_bias}")
        self.attention.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d": self.d,
            "feature_dim": self.feature_dim,
            "attention": self.attention.to_dict(),
            "mode": self.mode.value,
            "m_r": self.m_r,
            "m_min": self.m_min,
            "m_max": self.m_max,
            "epsilon": self.epsilon,
            "ponder_lambda": self.ponder_lambda,
            "layer_norm": self.layer_norm,
            "halting_bias": self.halting_bias,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        data = dict(data)
        data["attention"] = AttentionConfig.from_dict(data.get("attention", {}))
        data["mode"] = AttentionMode(data.get("mode", AttentionMode.ADAPTIVE.value))
        return cls(**data)


@dataclass
class DecoderState:
    """
    The recurrent state carried from one decoding step to the next.
    """

    h1: Tensor
    m1: Tensor
    h2: Tensor
    m2: Tensor
    c_prev: Tensor

    @classmethod
    def zeros(cls, d: int) -> "DecoderState":
        return cls(*(Tensor(np.zeros(d)) for _ in range(5)))


@dataclass
class ImageContext:
    """A feature set projected to the decoder width, with its mean and prepared attention keys."""

    regions: PreparedFeatures
    mean: Tensor


@dataclass
class StepOutput:
    distribution: Tensor
    state: DecoderState
    record: HaltingRecord
    ponder: Optional[Tensor] = None


@dataclass
class AdaptiveOutput:
    h2: Tensor
    m2: Tensor
    record: HaltingRecord
    confidences: List[Tensor]
    ponder: Tensor
    alphas: List[Tensor] = field(default_factory=list)
    """The attention weights of steps `1..N`, each `heads x k`."""


class AatDecoder:
    """
    Owns the configuration and the parameters of a decoder.

    ``` python
    >>> decoder = AatDecoder(ModelConfig(vocab_size=5, d=4, feature_dim=3), seed=0)
    >>> sorted(decoder.params)[:2]
    ['attention.v', 'attention.w_a']
    ```
    """

    def __init__(
        self,
        config: ModelConfig,
        params: Optional[ParameterSet] = None,
        seed: int = 0,
    ):
        self.config = config.validate()
        self.params = params if params is not None else self.initial_parameters(config, seed)
        logger.debug(
            "%s decoder with %d parameters", config.mode.value, sum(p.size for p in self.params.values())
        )

    @staticmethod
    def initial_parameters(config: ModelConfig, seed: int = 0) -> ParameterSet:
        """
        Draws a fresh set of parameters. Every weight is uniform in `[-0.08, 0.08]`; biases start at zero
        except for the LSTM forget gates and the halting unit (`config.halting_bias`).
        """
        rng = np.random.default_rng(seed)
        d = config.d
        params = ParameterSet()
        Linear.initialize(params, "features", config.feature_dim, d, rng)
        Embedding.initialize(params, "embed", config.vocab_size, d, rng)
        LstmCell.initialize(params, "lstm1", 2 * d, d, rng)
        if config.mode is not AttentionMode.BASE:
            Linear.initialize(params, "query", 2 * d, d, rng)
        initialize_attention(config.attention, params, "attention", rng)
        LstmCell.initialize(params, "lstm2", 2 * d, d, rng)
        if config.mode is AttentionMode.ADAPTIVE:
            Linear.initialize(params, "confidence1", d, d, rng)
            Linear.initialize(params, "confidence2", d, 1, rng)
            params.constant("confidence2.bias", (1,), config.halting_bias)
            LayerNorm.initialize(params, "norm_h", d)
            LayerNorm.initialize(params, "norm_m", d)
        Linear.initialize(params, "output", d, config.vocab_size, rng)
        return params

    def bind(self, tape: Optional[Tape] = None) -> "BoundDecoder":
        """
        Wraps the parameters in tensors for one forward pass.

        :param tape: Record the pass on this tape; without one the pass is not differentiable.
        """
        return BoundDecoder(self.config, self.params.bind(tape), tape)


class BoundDecoder:
    """
    A decoder whose parameters are tensors, possibly on a tape. Every decoding operation lives here.
    """

    def __init__(
        self, config: ModelConfig, bound: Dict[str, Tensor], tape: Optional[Tape] = None
    ):
        self.config = config
        self.bound = bound
        self.tape = tape
        self.features = Linear.bind(bound, "features")
        self.embedding = Embedding.bind(bound, "embed")
        self.lstm1 = LstmCell.bind(bound, "lstm1")
        self.lstm2 = LstmCell.bind(bound, "lstm2")
        self.attention = Attention.bind(config.attention, bound, "attention")
        self.output = Linear.bind(bound, "output")
        self.query = Linear.bind(bound, "query") if "query.weight" in bound else None
        if config.mode is AttentionMode.ADAPTIVE:
            self.confidence1 = Linear.bind(bound, "confidence1")
            self.confidence2 = Linear.bind(bound, "confidence2")
            self.norm_h = LayerNorm.bind(bound, "norm_h")
            self.norm_m = LayerNorm.bind(bound, "norm_m")

    def gradients(self, grads: Mapping[int, np.ndarray]) -> Dict[str, np.ndarray]:
        return ParameterSet.gradients(self.bound, grads)

    def prepare(self, features: np.ndarray) -> ImageContext:
        """
        Projects the `k x feature_dim` region matrix to the decoder width and precomputes its mean and its
        attention keys.
        """
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise EmptyFeatureSetError()
        if features.shape[1] != self.config.feature_dim:
            raise DimensionError("features", features.shape, (self.config.feature_dim,))
        projected = self.features(Tensor(features))
        regions = self.attention.prepare(projected)
        return ImageContext(regions, _row_mean(projected))

    def initial_state(self) -> DecoderState:
        return DecoderState.zeros(self.config.d)

    def input_step(
        self, state: DecoderState, token_id: int, image: ImageContext
    ) -> Tuple[Tensor, Tensor]:
        """
        `(h1, m1) = LSTM_1([embed(token), mean(A) + c_prev], (h1, m1))`
        """
        x = concat([embed(self.embedding, token_id), add(image.mean, state.c_prev)])
        return lstm_step(self.lstm1, x, state.h1, state.m1)

    def make_query(self, h1: Tensor, h2_prev: Tensor) -> Tensor:
        """
        `q = [h1, h2_prev] W_q + b_q`; base mode has no query projection and uses `h1` directly.
        """
        if self.query is None:
            return h1
        return self.query(concat([h1, h2_prev]))

    def attention_step(
        self,
        image: ImageContext,
        query: Tensor,
        h2: Tensor,
        m2: Tensor,
    ) -> Tuple[Tensor, Tensor, Tensor]:
        """
        Attends with `query` and feeds `[attended, query]` to the attention LSTM. In adaptive mode the new
        state is layer-normalized.

        :return: The new hidden state and memory cell, and the `heads x k` attention weights.
        """
        attended, alpha = self.attention(query, image.regions)
        h2, m2 = lstm_step(self.lstm2, concat([attended, query]), h2, m2)
        if self.config.mode is AttentionMode.ADAPTIVE and self.config.layer_norm:
            h2, m2 = self.norm_h(h2), self.norm_m(m2)
        return h2, m2, alpha

    def confidence(self, h: Tensor) -> Tensor:
        """
        `p = sigmoid(relu(h W_1 + b_1) W_2 + b_2)` as a scalar tensor; the same network scores `h1` (step 0)
        and every attention step.
        """
        return pick(sigmoid(self.confidence2(relu(self.confidence1(h)))), 0)

    def adaptive_attention(
        self, state: DecoderState, h1: Tensor, image: ImageContext
    ) -> AdaptiveOutput:
        """
        Takes attention steps until the halting rule fires and mixes the states of every step with the
        normalized halting weights.
        """
        cfg = self.config
        confidences: List[Tensor] = []
        hidden: List[Tensor] = [h1]
        memory: List[Tensor] = [state.m2]
        alphas: List[Tensor] = []
        h2, m2 = state.h2, state.m2
        n = 0
        remainder = 1.0
        while True:
            if n < cfg.m_min:
                p = Tensor(0.0)
            else:
                p = self.confidence(h1 if n == 0 else h2)
            confidences.append(p)
            remainder *= 1.0 - p.item()
            if remainder < cfg.epsilon or n >= cfg.m_max:
                break
            n += 1
            h2, m2, alpha = self.attention_step(image, self.make_query(h1, h2), h2, m2)
            hidden.append(h2)
            memory.append(m2)
            alphas.append(alpha)

        steps = n
        raw = []
        carry: Optional[Tensor] = None
        for p in confidences:
            raw.append(p if carry is None else mul(p, carry))
            carry = sub(1.0, p) if carry is None else mul(carry, sub(1.0, p))
        raw_vector = stack(raw)
        norm = total(raw_vector)
        if norm.item() > 0.0:
            weights = div(raw_vector, norm)
        else:
            weights = Tensor(one_hot_last(steps + 1))
        beta = [pick(weights, i) for i in range(steps + 1)]
        mixed_h = _weighted_sum(beta, hidden)
        mixed_m = _weighted_sum(beta, memory)
        ponder = ponder_loss(confidences, steps, cfg.ponder_lambda)
        record = HaltingRecord(
            t=0,
            token=-1,
            steps=steps,
            confidences=[p.item() for p in confidences],
            beta_raw=raw_vector.tolist(),
            beta_norm=weights.tolist(),
            ponder_term=ponder.item(),
            alpha=[alpha.tolist() for alpha in alphas],
        )
        return AdaptiveOutput(mixed_h, mixed_m, record, confidences, ponder, alphas)

    def decode_step(
        self, state: DecoderState, token_id: int, image: ImageContext, t: int = 0
    ) -> StepOutput:
        """
        Produces the distribution over the next token.

        :param state: The state after the previous token.
        :param token_id: The previous token (BOS at the first step).
        :param image: The result of `prepare`.
        :param t: Index of this decoding step, recorded in the halting record.
        """
        h1, m1 = self.input_step(state, token_id, image)
        ponder = None
        if self.config.mode is AttentionMode.ADAPTIVE:
            adaptive = self.adaptive_attention(state, h1, image)
            h2, m2, record = adaptive.h2, adaptive.m2, adaptive.record
            ponder = adaptive.ponder
        else:
            steps = 1 if self.config.mode is AttentionMode.BASE else self.config.m_r
            h2, m2 = state.h2, state.m2
            alphas = []
            for _ in range(steps):
                h2, m2, alpha = self.attention_step(image, self.make_query(h1, h2), h2, m2)
                alphas.append(alpha.tolist())
            record = HaltingRecord(t=0, token=-1, steps=steps, alpha=alphas)
        record.t = t
        context = h2
        distribution = softmax(self.output(context))
        return StepOutput(
            distribution, DecoderState(h1, m1, h2, m2, context), record, ponder
        )


@dataclass
class DecodeResult:
    tokens: List[int]
    loss: Optional[Tensor]
    cross_entropy: float
    ponder: float
    trace: List[HaltingRecord]
    distributions: List[np.ndarray] = field(default_factory=list)

    @property
    def mean_steps(self) -> float:
        return float(np.mean([r.steps for r in self.trace])) if self.trace else 0.0


def decode_sequence(
    decoder: BoundDecoder,
    features: np.ndarray,
    bos_id: int,
    eos_id: int,
    targets: Optional[Sequence[int]] = None,
    max_len: int = 16,
    mode: DecodeMode = DecodeMode.TEACHER_FORCING,
    sampling_prob: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> DecodeResult:
    """
    Runs the decoder over a whole sequence.

    With teacher forcing the decoder predicts `targets` one by one (callers append EOS to `targets` when the
    end of the sequence should be learned) and accumulates cross-entropy plus the time cost penalty. With
    probability `sampling_prob` the input of a step is drawn from the previous step's distribution instead
    of the ground truth. Greedy decoding emits the most likely token until EOS or `max_len` tokens.

    :return: The emitted tokens (the predictions under teacher forcing), the differentiable loss (teacher
    forcing only), its two components as floats, and one halting record per decoding step.
    """
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    if mode is DecodeMode.TEACHER_FORCING and targets is None:
        raise ConfigError("teacher forcing needs target tokens")
    image = decoder.prepare(features)
    state = decoder.initial_state()
    steps = len(targets) if mode is DecodeMode.TEACHER_FORCING else max_len
    token = bos_id
    tokens: List[int] = []
    trace: List[HaltingRecord] = []
    distributions: List[np.ndarray] = []
    loss: Optional[Tensor] = None
    cross_entropy = 0.0
    ponder_total = 0.0

    for t in range(steps):
        out = decoder.decode_step(state, token, image, t)
        out.record.token = token
        trace.append(out.record)
        state = out.state
        probs = out.distribution.data
        distributions.append(probs)
        predicted = int(np.argmax(probs))

        if mode is DecodeMode.GREEDY:
            if predicted == eos_id:
                break
            tokens.append(predicted)
            token = predicted
            continue

        tokens.append(predicted)
        target = int(targets[t])
        step_loss = sub(0.0, log(pick(out.distribution, target), PROBABILITY_FLOOR))
        cross_entropy += step_loss.item()
        if out.ponder is not None:
            ponder_total += out.ponder.item()
            step_loss = add(step_loss, out.ponder)
        loss = step_loss if loss is None else add(loss, step_loss)

        token = target
        if sampling_prob > 0.0 and rng is not None and rng.random() < sampling_prob:
            token = int(rng.choice(len(probs), p=probs / probs.sum()))

    return DecodeResult(tokens, loss, cross_entropy, ponder_total, trace, distributions)


def _row_mean(matrix: Tensor) -> Tensor:
    k = matrix.shape[0]
    return matmul(Tensor(np.full(k, 1.0 / k)), matrix)


def _weighted_sum(weights: Sequence[Tensor], vectors: Sequence[Tensor]) -> Tensor:
    result = mul(weights[0], vectors[0])
    for weight, vector in zip(weights[1:], vectors[1:]):
        result = add(result, mul(weight, vector))
    return result
