"""
Region feature sets and the binary feature file format.

A feature file is the magic string `AATF1`, then `k` and `d_a` as little-endian unsigned 32-bit integers, then
`k * d_a` little-endian float64 values in row-major order.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import EmptyFeatureSetError, FeatureFormatError

MAGIC = b"AATF1"
_HEADER = struct.Struct("<II")
_VALUE_DTYPE = np.dtype("<f8")


@dataclass(frozen=True)
class FeatureSet:
    """
    The `k x d_a` matrix of region feature vectors of one image.
    """

    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] == 0:
            raise EmptyFeatureSetError()
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def d_a(self) -> int:
        return self.vectors.shape[1]

    @property
    def mean(self) -> np.ndarray:
        """The mean-pooled feature vector."""
        return self.vectors.mean(axis=0)

    def to_bytes(self) -> bytes:
        return (
            MAGIC
            + _HEADER.pack(self.k, self.d_a)
            + np.ascontiguousarray(self.vectors, dtype=_VALUE_DTYPE).tobytes()
        )

    @classmethod
    def from_bytes(cls, blob: bytes, path: Union[str, Path, None] = None) -> "FeatureSet":
        """
        Parses a feature file.

        :raises FeatureFormatError: On a bad magic string, a truncated file, trailing bytes, `k == 0` or a
        non-finite value. The error names the byte offset of the problem.
        """
        where = str(path) if path is not None else None
        if blob[: len(MAGIC)] != MAGIC:
            raise FeatureFormatError(f"bad magic string, expected {MAGIC!r}", 0, where)
        offset = len(MAGIC)
        if len(blob) < offset + _HEADER.size:
            raise FeatureFormatError("truncated header", len(blob), where)
        k, d_a = _HEADER.unpack_from(blob, offset)
        if k == 0:
            raise FeatureFormatError("feature set has no regions (k = 0)", offset, where)
        if d_a == 0:
            raise FeatureFormatError("feature dimension is 0", offset + 4, where)
        offset += _HEADER.size
        expected = offset + k * d_a * _VALUE_DTYPE.itemsize
        if len(blob) != expected:
            raise FeatureFormatError(
                f"expected {k} x {d_a} values ({expected} bytes in total), found {len(blob)} bytes",
                min(len(blob), expected),
                where,
            )
        values = np.frombuffer(blob, dtype=_VALUE_DTYPE, offset=offset).astype(np.float64)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise FeatureFormatError(
                "non-finite feature value", offset + int(bad[0]) * _VALUE_DTYPE.itemsize, where
            )
        return cls(values.reshape(k, d_a))


def write_features(path: Union[str, Path], features: Union[FeatureSet, np.ndarray]) -> None:
    if not isinstance(features, FeatureSet):
        features = FeatureSet(features)
    Path(path).write_bytes(features.to_bytes())


def load_features(path: Union[str, Path]) -> FeatureSet:
    """
    Reads a feature file.

    ``` python
    >>> import tempfile, os
    >>> path = os.path.join(tempfile.mkdtemp(), "one.aatf")
    >>> write_features(path, [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    >>> load_features(path).mean.tolist()
    [2.5, 3.5, 4.5]
    ```
    """
    return FeatureSet.from_bytes(Path(path).read_bytes(), path)
