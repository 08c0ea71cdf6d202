"""
Exceptions raised by `aat`.

Every exception derives from `AatError`. Errors describing a bad value also derive from `ValueError`
(or `IndexError` for lookups) so that generic handlers keep working.
"""

from typing import Optional, Sequence

__all__ = [
    "AatError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DomainError",
    "EmptyFeatureSetError",
    "FeatureFormatError",
    "MetricError",
    "TokenLookupError",
    "TrainingDivergedError",
]


class AatError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AatError, ValueError):
    """Two operands have incompatible shapes."""

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        rendered = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class DomainError(AatError, ValueError):
    """An operation was called outside of the domain it is defined on."""


class ContractError(AatError, ValueError):
    """A calling contract was broken, e.g. `backward` on a non-scalar loss."""


class TokenLookupError(AatError, IndexError):
    """A token id is outside of the vocabulary."""

    def __init__(self, token_id: int, vocab_size: int):
        self.token_id = token_id
        self.vocab_size = vocab_size
        super().__init__(f"token id {token_id} is outside of [0, {vocab_size})")


class ConfigError(AatError, ValueError):
    """A configuration object (or a combination of CLI flags) is invalid."""


class EmptyFeatureSetError(AatError, ValueError):
    """A feature set holds no region vectors."""

    def __init__(self):
        super().__init__("feature set must hold at least one region vector (k >= 1)")


class FeatureFormatError(AatError, ValueError):
    """A feature file could not be parsed."""

    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")


class MetricError(AatError, ValueError):
    """A metric was asked for over an empty input."""


class TrainingDivergedError(AatError, RuntimeError):
    """The training loss became NaN or infinite."""

    def __init__(self, epoch: int, batch: int, instance: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.instance = instance
        self.loss = loss
        super().__init__(
            f"training diverged at epoch {epoch}, batch {batch}, instance {instance}: loss={loss}"
        )
