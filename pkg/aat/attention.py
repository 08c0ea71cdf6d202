"""
Attention functions: single-head additive attention and multi-head scaled dot-product attention, behind one
interface.
"""

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from .errors import ConfigError, DimensionError, EmptyFeatureSetError
from .layers import ParameterSet
from .tensor import (
    Tensor,
    add,
    concat,
    matmul,
    mul,
    reshape,
    softmax,
    stack,
    take,
    tanh,
)


class AttentionKind(Enum):
    """
    Scoring functions supported by `Attention`.
    """

    ADDITIVE = "additive"
    DOT_PRODUCT = "dot_product"


@dataclass
class AttentionConfig:
    kind: AttentionKind = AttentionKind.ADDITIVE
    """The scoring function."""

    heads: int = 1
    """Number of heads. Additive attention is single-headed."""

    query_dim: int = 64
    """Length of the query vector. Also the hidden size of additive scoring."""

    key_dim: int = 64
    """Length of each feature vector."""

    value_dim: int = 64
    """Length of the attended vector. Must be divisible by `heads`."""

    identity_output: bool = False
    """Initialize the output projection to the identity matrix instead of randomly."""

    @property
    def head_dim(self) -> int:
        return self.value_dim // self.heads

    def validate(self) -> "AttentionConfig":
        if not isinstance(self.kind, AttentionKind):
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        if min(self.query_dim, self.key_dim, self.value_dim) < 1:
            raise ConfigError("attention dimensions must be positive")
        if self.heads < 1:
            raise ConfigError("attention needs at least one head")
        if self.kind is AttentionKind.ADDITIVE and self.heads != 1:
            raise ConfigError("additive attention is single-headed (heads must be 1)")
        if self.value_dim % self.heads:
            raise ConfigError(
                f"value_dim {self.value_dim} is not divisible by {self.heads} heads"
            )
        if (
            self.identity_output
            and self.kind is AttentionKind.ADDITIVE
            and self.key_dim != self.value_dim
        ):
            raise ConfigError("an identity output projection needs key_dim == value_dim")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["kind"] = self.kind.value
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttentionConfig":
        data = dict(data)
        data["kind"] = AttentionKind(data.get("kind", AttentionKind.ADDITIVE.value))
        return cls(**data)


def initialize_attention(
    config: AttentionConfig, params: ParameterSet, name: str, rng: np.random.Generator
) -> None:
    """
    Adds the parameters of an attention function to `params`.
    """
    config.validate()
    if config.kind is AttentionKind.ADDITIVE:
        params.uniform(f"{name}.w_q", (config.query_dim, config.query_dim), rng)
        params.uniform(f"{name}.w_a", (config.key_dim, config.query_dim), rng)
        params.uniform(f"{name}.v", (config.query_dim,), rng)
        projected = config.key_dim
    else:
        params.uniform(f"{name}.w_q", (config.query_dim, config.value_dim), rng)
        params.uniform(f"{name}.w_k", (config.key_dim, config.value_dim), rng)
        params.uniform(f"{name}.w_v", (config.key_dim, config.value_dim), rng)
        projected = config.value_dim
    if config.identity_output:
        params[f"{name}.w_o"] = np.eye(projected, config.value_dim)
    else:
        params.uniform(f"{name}.w_o", (projected, config.value_dim), rng)


@dataclass
class PreparedFeatures:
    """
    Feature vectors with their keys and values projected once per image.
    """

    features: Tensor
    keys: Tensor
    values: Tensor

    @property
    def k(self) -> int:
        return self.features.shape[0]


@dataclass
class Attention:
    config: AttentionConfig
    weights: Dict[str, Tensor]

    @classmethod
    def bind(
        cls, config: AttentionConfig, bound: Mapping[str, Tensor], name: str
    ) -> "Attention":
        prefix = f"{name}."
        weights = {
            key[len(prefix) :]: tensor
            for key, tensor in bound.items()
            if key.startswith(prefix)
        }
        return cls(config.validate(), weights)

    def prepare(self, features: Tensor) -> PreparedFeatures:
        """
        Projects the feature vectors into keys (and values, for dot-product attention).

        :param features: A `k x key_dim` matrix.
        """
        if features.ndim != 2 or features.shape[0] == 0:
            raise EmptyFeatureSetError()
        if features.shape[1] != self.config.key_dim:
            raise DimensionError(
                "attention features", features.shape, (self.config.key_dim,)
            )
        if self.config.kind is AttentionKind.ADDITIVE:
            return PreparedFeatures(features, matmul(features, self.weights["w_a"]), features)
        return PreparedFeatures(
            features,
            matmul(features, self.weights["w_k"]),
            matmul(features, self.weights["w_v"]),
        )

    def __call__(
        self, query: Tensor, prepared: PreparedFeatures
    ) -> Tuple[Tensor, Tensor]:
        if query.shape != (self.config.query_dim,):
            raise DimensionError("attention query", query.shape, (self.config.query_dim,))
        if self.config.kind is AttentionKind.ADDITIVE:
            return self._additive(query, prepared)
        return self._dot_product(query, prepared)

    def _additive(
        self, query: Tensor, prepared: PreparedFeatures
    ) -> Tuple[Tensor, Tensor]:
        hidden = tanh(add(prepared.keys, matmul(query, self.weights["w_q"])))
        alpha = softmax(matmul(hidden, self.weights["v"]))
        context = matmul(alpha, prepared.values)
        return matmul(context, self.weights["w_o"]), reshape(alpha, (1, prepared.k))

    def _dot_product(
        self, query: Tensor, prepared: PreparedFeatures
    ) -> Tuple[Tensor, Tensor]:
        head_dim = self.config.head_dim
        scale = 1.0 / math.sqrt(head_dim)
        projected = matmul(query, self.weights["w_q"])
        heads, alphas = [], []
        for h in range(self.config.heads):
            start, stop = h * head_dim, (h + 1) * head_dim
            scores = matmul(take(prepared.keys, start, stop), take(projected, start, stop))
            alpha = softmax(mul(scores, scale))
            heads.append(matmul(alpha, take(prepared.values, start, stop)))
            alphas.append(alpha)
        return matmul(concat(heads), self.weights["w_o"]), stack(alphas)


def attend(
    attention: Attention,
    query: Tensor,
    features: Union[Tensor, PreparedFeatures],
) -> Tuple[Tensor, Tensor]:
    """
    Attends over a feature set.

    :param attention: A bound attention function.
    :param query: The query vector, length `query_dim`.
    :param features: A `k x key_dim` matrix, or the result of `Attention.prepare` for it.
    :return: The attended vector (length `value_dim`) and the attention weights (`heads x k`, each row a
    distribution over the `k` regions).
    """
    if not isinstance(features, PreparedFeatures):
        features = attention.prepare(features)
    return attention(query, features)
