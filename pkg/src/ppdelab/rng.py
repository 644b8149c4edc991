"""Counter-based noise.

Every Brownian increment is a pure function of ``(seed, path, step, mode)``,
so any subset of paths or steps can be regenerated without replaying a
sequential stream, and results do not depend on how work is split across
workers.  The mixing function is the splitmix64 finalizer applied once per
key component.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_K_PATH = np.uint64(0xD1B54A32D192ED03)
_K_STEP = np.uint64(0xABC98388FB8FAC03)
_K_MODE = np.uint64(0x8CB92BA72F3D8DD7)

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def hash_keys(seed: int, path, step, mode, lane=0) -> np.ndarray:
    """64-bit hash of broadcast key arrays."""
    with np.errstate(over="ignore"):
        u64 = lambda a: np.asarray(a).astype(np.uint64)
        h = _mix(np.asarray(np.uint64(seed) + _GOLDEN, dtype=np.uint64))
        h = _mix(h ^ (u64(path) * _K_PATH + np.uint64(1)))
        h = _mix(h ^ (u64(step) * _K_STEP + np.uint64(2)))
        h = _mix(h ^ ((u64(mode) * np.uint64(8) + u64(lane)) * _K_MODE + np.uint64(3)))
    return h


def uniforms(seed: int, path, step, mode, lane=0) -> np.ndarray:
    """Uniform draws in the open interval (0, 1)."""
    h = hash_keys(seed, path, step, mode, lane)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(seed: int, path, step, mode, lane=0) -> np.ndarray:
    return ndtri(uniforms(seed, path, step, mode, lane))


@dataclass(frozen=True)
class NoiseStream:
    """Keyed source of Brownian increments for a family of paths.

    ``kind`` is ``"gaussian"`` (N(0, dt) increments) or ``"bernoulli"``
    (``+-sqrt(dt)`` with equal probability).
    """
    seed: int
    dim_k: int
    kind: str = GAUSSIAN

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.kind not in (GAUSSIAN, BERNOULLI):
            raise ValueError(f"unknown noise kind {self.kind!r}")

    def increments(self, paths, step: int, dt: float) -> np.ndarray:
        """Increments over step ``step`` (from node ``step`` to ``step + 1``)
        for the given path indices; shape ``(len(paths), dim_k)``."""
        paths = np.asarray(paths, dtype=np.int64).reshape(-1, 1)
        modes = np.arange(self.dim_k).reshape(1, -1)
        if self.kind == BERNOULLI:
            h = hash_keys(self.seed, paths, step, modes)
            signs = np.where((h >> np.uint64(63)) == 1, 1.0, -1.0)
            return signs * np.sqrt(dt)
        return normals(self.seed, paths, step, modes) * np.sqrt(dt)


def derive_seed(seed: int, *salt: int) -> int:
    """Deterministic child seed, used to keep training and validation noise
    disjoint."""
    h = hash_keys(seed, np.uint64(len(salt)), np.uint64(0x5EED), 0)
    for s in salt:
        h = hash_keys(int(h), s, np.uint64(0xC0FFEE), 1)
    return int(h)
