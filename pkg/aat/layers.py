"""
Parameterized layers: linear maps, embeddings, LSTM cells and layer normalization.

Parameters live in a `ParameterSet` as plain arrays. For every forward pass the set is bound to a `Tape`
(`ParameterSet.bind`), and layers are built over the bound tensors with their `bind` class methods.
"""

from collections.abc import MutableMapping
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, DimensionError, TokenLookupError
from .tensor import (
    Tape,
    Tensor,
    add,
    concat,
    layer_norm,
    matmul,
    mul,
    row,
    sigmoid,
    tanh,
)

INIT_RANGE = 0.08
"""Weights are initialized uniformly in `[-INIT_RANGE, INIT_RANGE]`."""

FORGET_BIAS = 1.0
"""Initial value of the forget-gate bias of every `LstmCell`."""

PARAMETER_FORMAT = "aat-parameters/1"
"""Version header written into every parameter archive."""

LSTM_GATES = ("i", "f", "o", "g")
"""Input, forget and output gates, and the candidate memory."""


class ParameterSet(MutableMapping):
    """
    An ordered mapping of parameter names to float64 arrays.
    """

    def __init__(self, arrays: Optional[Mapping[str, np.ndarray]] = None):
        self._arrays: Dict[str, np.ndarray] = {}
        for name, array in (arrays or {}).items():
            self[name] = array

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array) -> None:
        self._arrays[name] = np.array(array, dtype=np.float64)

    def __delitem__(self, name: str) -> None:
        del self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}: {v.shape}" for k, v in self._arrays.items())
        return f"ParameterSet({shapes})"

    def copy(self) -> "ParameterSet":
        return ParameterSet(self._arrays)

    def uniform(
        self,
        name: str,
        shape: Tuple[int, ...],
        rng: np.random.Generator,
        scale: float = INIT_RANGE,
    ) -> None:
        self._arrays[name] = rng.uniform(-scale, scale, size=shape)

    def constant(self, name: str, shape: Tuple[int, ...], value: float = 0.0) -> None:
        self._arrays[name] = np.full(shape, value, dtype=np.float64)

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        """
        Wraps every array in a `Tensor`.

        :param tape: When given, every array is registered on it as a leaf so its gradient is collected.
        :return: A map of names to tensors sharing memory with the arrays of this set.
        """
        if tape is None:
            return {name: Tensor(array) for name, array in self._arrays.items()}
        return {name: tape.leaf(array) for name, array in self._arrays.items()}

    @staticmethod
    def gradients(
        bound: Mapping[str, Tensor], grads: Mapping[int, np.ndarray]
    ) -> Dict[str, np.ndarray]:
        """
        Maps the result of `Tape.backward` back onto parameter names.

        :param bound: The result of `bind`.
        :param grads: The result of `Tape.backward`.
        """
        return {name: grads[tensor.grad_id] for name, tensor in bound.items()}


def save_parameters(
    path: Union[str, Path],
    params: ParameterSet,
    extras: Optional[Mapping[str, str]] = None,
) -> None:
    """
    Writes a named-tensor archive: a numpy `.npz` file with one row-major array per parameter plus a
    `__format__` version header.

    :param extras: Additional string records (e.g. a serialized config), stored under `__<key>__`.
    """
    records = {"__format__": np.array(PARAMETER_FORMAT)}
    for key, value in (extras or {}).items():
        records[f"__{key}__"] = np.array(value)
    for name, array in params.items():
        if name.startswith("__"):
            raise ConfigError(f"parameter names may not start with '__': {name}")
        records[name] = np.ascontiguousarray(array)
    with open(path, "wb") as handle:
        np.savez(handle, **records)


def load_parameters(path: Union[str, Path]) -> Tuple[ParameterSet, Dict[str, str]]:
    """
    Reads an archive written by `save_parameters`.

    :return: The parameters and the extra string records.
    """
    with np.load(path, allow_pickle=False) as archive:
        if "__format__" not in archive.files:
            raise ConfigError(f"{path} is not a parameter archive")
        found = str(archive["__format__"])
        if found != PARAMETER_FORMAT:
            raise ConfigError(f"{path}: unsupported archive format {found!r}")
        params = ParameterSet()
        extras = {}
        for key in archive.files:
            if key == "__format__":
                continue
            if key.startswith("__") and key.endswith("__"):
                extras[key[2:-2]] = str(archive[key])
            else:
                params[key] = archive[key]
    return params, extras


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Affine map `x W + b` over the last axis of `x`.

    ``` python
    >>> linear(Tensor([1.0, 2.0]), Tensor([[1.0], [1.0]]), Tensor([3.0])).tolist()
    [6.0]
    ```
    """
    if (
        weight.ndim != 2
        or x.ndim == 0
        or x.shape[-1] != weight.shape[0]
        or bias.shape != (weight.shape[1],)
    ):
        raise DimensionError("linear", x.shape, weight.shape, bias.shape)
    return add(matmul(x, weight), bias)


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @staticmethod
    def initialize(
        params: ParameterSet,
        name: str,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
    ) -> None:
        params.uniform(f"{name}.weight", (in_dim, out_dim), rng)
        params.constant(f"{name}.bias", (out_dim,))

    @classmethod
    def bind(cls, bound: Mapping[str, Tensor], name: str) -> "Linear":
        return cls(bound[f"{name}.weight"], bound[f"{name}.bias"])

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


@dataclass
class Embedding:
    """
    A word embedding table; looking up a row is the same as multiplying a one-hot vector by the table.
    """

    table: Tensor

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @staticmethod
    def initialize(
        params: ParameterSet,
        name: str,
        vocab_size: int,
        dim: int,
        rng: np.random.Generator,
    ) -> None:
        params.uniform(f"{name}.table", (vocab_size, dim), rng)

    @classmethod
    def bind(cls, bound: Mapping[str, Tensor], name: str) -> "Embedding":
        return cls(bound[f"{name}.table"])


def embed(embedding: Embedding, token_id: int) -> Tensor:
    """
    :return: Row `token_id` of the embedding table.
    """
    if not 0 <= token_id < embedding.vocab_size:
        raise TokenLookupError(token_id, embedding.vocab_size)
    return row(embedding.table, token_id)


@dataclass
class LstmCell:
    """
    A standard LSTM cell without peepholes. Each gate has its own `(input_dim + hidden_dim) x hidden_dim`
    matrix and `hidden_dim` bias.
    """

    input_dim: int
    hidden_dim: int
    weights: Dict[str, Tensor]
    biases: Dict[str, Tensor]

    @staticmethod
    def initialize(
        params: ParameterSet,
        name: str,
        input_dim: int,
        hidden_dim: int,
        rng: np.random.Generator,
    ) -> None:
        for gate in LSTM_GATES:
            params.uniform(f"{name}.w_{gate}", (input_dim + hidden_dim, hidden_dim), rng)
            params.constant(
                f"{name}.b_{gate}", (hidden_dim,), FORGET_BIAS if gate == "f" else 0.0
            )

    @classmethod
    def bind(cls, bound: Mapping[str, Tensor], name: str) -> "LstmCell":
        weights = {gate: bound[f"{name}.w_{gate}"] for gate in LSTM_GATES}
        biases = {gate: bound[f"{name}.b_{gate}"] for gate in LSTM_GATES}
        stacked, hidden_dim = weights["i"].shape
        for gate in LSTM_GATES:
            if weights[gate].shape != (stacked, hidden_dim) or biases[gate].shape != (
                hidden_dim,
            ):
                raise DimensionError(
                    f"lstm gate {gate}", weights[gate].shape, biases[gate].shape
                )
        return cls(stacked - hidden_dim, hidden_dim, weights, biases)


def lstm_step(
    cell: LstmCell, x: Tensor, h: Tensor, m: Tensor
) -> Tuple[Tensor, Tensor]:
    """
    One LSTM update.

    :param x: Input, length `input_dim`.
    :param h: Previous hidden state, length `hidden_dim`.
    :param m: Previous memory cell, length `hidden_dim`.
    :return: The new hidden state and memory cell.
    """
    if x.shape != (cell.input_dim,) or h.shape != (cell.hidden_dim,) or m.shape != (
        cell.hidden_dim,
    ):
        raise DimensionError("lstm_step", x.shape, h.shape, m.shape)
    xh = concat([x, h])
    pre = {g: linear(xh, cell.weights[g], cell.biases[g]) for g in LSTM_GATES}
    memory = add(mul(sigmoid(pre["f"]), m), mul(sigmoid(pre["i"]), tanh(pre["g"])))
    hidden = mul(sigmoid(pre["o"]), tanh(memory))
    return hidden, memory


@dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor

    @staticmethod
    def initialize(params: ParameterSet, name: str, dim: int) -> None:
        params.constant(f"{name}.gain", (dim,), 1.0)
        params.constant(f"{name}.bias", (dim,))

    @classmethod
    def bind(cls, bound: Mapping[str, Tensor], name: str) -> "LayerNorm":
        return cls(bound[f"{name}.gain"], bound[f"{name}.bias"])

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)
