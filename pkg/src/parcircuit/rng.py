"""Deterministic splittable random streams.

Every random decision in the package is drawn from a counter-based Philox
stream whose 128-bit key is derived by hashing an `RngKey`. Identical keys
give bit-identical streams on any platform and under any thread schedule;
keys differing in any field give computationally independent streams.
"""

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ParameterError

PURPOSES = ("init", "node-mask", "circuit-mask", "shuffle", "split")

_FIELD_MAX = 2**64
_INV_2_53 = 2.0**-53


@dataclass(frozen=True)
class RngKey:
    """Names one random stream: (trial, epoch, sample, circuit, purpose)."""

    trial: int = 0
    epoch: int = 0
    sample: int = 0
    circuit: int = 0
    purpose: str = "init"

    def __post_init__(self):
        for name in ("trial", "epoch", "sample", "circuit"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= v < _FIELD_MAX:
                raise ParameterError(f"RngKey.{name} must be an int in [0, 2^64), got {v!r}")
        if self.purpose not in PURPOSES:
            raise ParameterError(f"RngKey.purpose must be one of {PURPOSES}, got {self.purpose!r}")

    def with_fields(self, **kw) -> "RngKey":
        return replace(self, **kw)


def _philox(key: RngKey, lane: int = 0) -> np.random.Philox:
    # lane is an internal sub-stream index (layer number, resample attempt, ...)
    packed = struct.pack(
        ">6Q",
        key.trial,
        key.epoch,
        key.sample,
        key.circuit,
        PURPOSES.index(key.purpose),
        lane,
    )
    digest = hashlib.blake2b(packed, digest_size=16, person=b"parcircuit").digest()
    return np.random.Philox(key=np.frombuffer(digest, dtype=np.uint64))


def random_u64(key: RngKey, n: int, lane: int = 0) -> np.ndarray:
    """n raw 64-bit draws from the stream named by (key, lane)."""
    return _philox(key, lane).random_raw(n)


def uniform_stream(key: RngKey, n: int, lane: int = 0) -> np.ndarray:
    """n doubles uniform on [0, 1), derived from the raw stream."""
    return (random_u64(key, n, lane) >> np.uint64(11)) * _INV_2_53


def bernoulli_stream(key: RngKey, p: float, n: int, lane: int = 0) -> np.ndarray:
    """n Bernoulli(p) bits as a uint8 vector, fully determined by the key."""
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"Bernoulli probability must be in [0, 1], got {p}")
    return (uniform_stream(key, n, lane) < p).astype(np.uint8)


class _BitSource:
    """Buffered uint64 reader over one Philox stream."""

    def __init__(self, key: RngKey, lane: int = 0, block: int = 4096):
        self._bg = _philox(key, lane)
        self._block = block
        self._buf = self._bg.random_raw(block)
        self._pos = 0

    def next_u64(self) -> int:
        if self._pos >= len(self._buf):
            self._buf = self._bg.random_raw(self._block)
            self._pos = 0
        v = int(self._buf[self._pos])
        self._pos += 1
        return v

    def bounded(self, bound: int) -> int:
        # rejection sampling keeps the draw exactly uniform on [0, bound)
        threshold = (_FIELD_MAX // bound) * bound
        while True:
            v = self.next_u64()
            if v < threshold:
                return v % bound


def permutation(key: RngKey, n: int, lane: int = 0) -> np.ndarray:
    """Deterministic Fisher-Yates permutation of range(n)."""
    idx = np.arange(n, dtype=np.int64)
    if n < 2:
        return idx
    src = _BitSource(key, lane)
    for j in range(n - 1, 0, -1):
        r = src.bounded(j + 1)
        idx[j], idx[r] = idx[r], idx[j]
    return idx
