"""Datasets, a portable counter-based RNG, and mini-batch sampling.

The generator is SplitMix64 evaluated in counter mode: draw ``k`` (0-based,
counted from construction) is

    z = seed + (k + 1) * 0x9E3779B97F4A7C15          (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9          (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB          (mod 2**64)
    out = z ^ (z >> 31)

which is exactly the reference SplitMix64 stream for a state initialised to
``seed``. Because each output depends only on ``(seed, k)`` the stream can be
produced in vectorised blocks and reproduced in any language.

Derived quantities:

* uniform double in [0, 1): ``(out >> 11) * 2**-53``
* integer in [0, n): ``floor(uniform * n)``
* standard normal: Box-Muller on consecutive pairs ``(u1, u2)``,
  ``sqrt(-2 log(1 - u1)) * cos(2 pi u2)``; one normal per pair.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def stable_hash(key) -> int:
    """64-bit hash of ``str(key)`` that is stable across processes and runs."""
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """SplitMix64 stream with an explicit draw counter.

    Not thread safe; give every worker its own instance (see :meth:`spawn`).
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def next_u64(self, size: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + 1 + size, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * _GOLDEN
        self.counter += size
        return _mix64(z)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        u = self.uniform(2 * n).reshape(n, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        z = loc + scale * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, n: int, size=None):
        if n < 1:
            raise ValueError(f"integers needs n >= 1, got {n}")
        m = 1 if size is None else int(np.prod(size))
        idx = np.floor(self.uniform(m) * n).astype(np.int64)
        np.minimum(idx, n - 1, out=idx)
        return int(idx[0]) if size is None else idx.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        return self.permutation(n)[:k]

    def spawn(self, key) -> "Rng":
        """Independent child stream keyed by ``key``; does not advance self."""
        z = np.array([self.seed ^ stable_hash(key)], dtype=np.uint64)
        return Rng(int(_mix64(z)[0]))


@dataclass(frozen=True)
class Sample:
    y: float
    w: float
    x: tuple[float, ...]


@dataclass(frozen=True)
class Dataset:
    """Column store of IV samples: outcome ``y``, scalar treatment ``w``,
    instruments ``x`` of shape ``(n, d)``."""

    y: np.ndarray
    w: np.ndarray
    x: np.ndarray
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=np.float64).reshape(-1)
        w = np.ascontiguousarray(self.w, dtype=np.float64).reshape(-1)
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        x = np.ascontiguousarray(x)
        if not (len(y) == len(w) == x.shape[0]):
            raise ValueError(
                f"column lengths differ: y={len(y)}, w={len(w)}, x={x.shape[0]}"
            )
        if x.shape[1] < 1:
            raise ValueError("instrument dimension d must be >= 1")
        for name, arr in (("y", y), ("w", w), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in column {name}")
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.n

    @property
    def samples(self) -> list[Sample]:
        return [
            Sample(float(self.y[i]), float(self.w[i]), tuple(self.x[i]))
            for i in range(self.n)
        ]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.y[idx], self.w[idx], self.x[idx])

    def to_csv(self, path) -> None:
        header = ["y", "w"] + [f"x{j}" for j in range(self.d)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(self.n):
                row = [self.y[i], self.w[i], *self.x[i]]
                writer.writerow([f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(Path(path), newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["y", "w"] or len(header) < 3:
                raise ValueError(f"unexpected CSV header {header!r}")
            rows = np.array([[float(v) for v in row] for row in reader])
        if rows.size == 0:
            raise ValueError("CSV contains no samples")
        return cls(rows[:, 0], rows[:, 1], rows[:, 2:])


def sample_batch(ds: Dataset, rng: Rng, size: int) -> Dataset:
    """Draw ``size`` rows uniformly with replacement."""
    if ds.n < 1:
        raise ValueError("cannot sample from an empty dataset")
    if size < 1:
        raise ValueError(f"batch size must be >= 1, got {size}")
    return ds.take(rng.integers(ds.n, size))


def empirical_mean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empirical mean of an empty vector")
    return float(values.mean())
