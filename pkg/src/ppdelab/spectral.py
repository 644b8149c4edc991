"""Spectral truncation of the state space H and the semigroup generated by A.

H is represented by its first ``dim_h`` eigenmodes, the noise space K by its
first ``dim_k`` modes.  The generator A is diagonal with nonpositive
eigenvalues, so ``e^{sA}`` is evaluated exactly as a vector of exponentials.
Elements of H are 1-D float arrays of length ``dim_h``; operators K -> H are
``(dim_h, dim_k)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class SpectralModel:
    dim_h: int
    dim_k: int
    eigenvalues: np.ndarray
    gamma: float
    lip_b: float
    lip_sigma: float
    horizon: float

    def __post_init__(self):
        if self.dim_h < 1 or self.dim_k < 1:
            raise ValueError("dim_h and dim_k must be positive")
        eig = np.asarray(self.eigenvalues, dtype=float).reshape(-1)
        if eig.shape != (self.dim_h,):
            raise ValueError(f"expected {self.dim_h} eigenvalues, got {eig.size}")
        if not np.all(np.isfinite(eig)) or np.any(eig > 0):
            raise ValueError("eigenvalues must be finite and <= 0")
        if not 0.0 <= self.gamma < 0.5:
            raise ValueError(f"gamma must lie in [0, 1/2), got {self.gamma}")
        for name in ("lip_b", "lip_sigma", "horizon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        eig.setflags(write=False)
        object.__setattr__(self, "eigenvalues", eig)

    @classmethod
    def heat(cls, dim_h: int, dim_k: int | None = None, scale: float = 1.0, **kw) -> "SpectralModel":
        """Dirichlet-Laplacian spectrum ``-scale * k^2``, k = 1..dim_h."""
        k = np.arange(1, dim_h + 1, dtype=float)
        return cls(dim_h=dim_h, dim_k=dim_k or dim_h, eigenvalues=-scale * k**2, **kw)

    def decay(self, s: float) -> np.ndarray:
        """Diagonal of ``e^{sA}``."""
        if s < 0:
            raise ValueError(f"semigroup time must be nonnegative, got {s}")
        return np.exp(s * self.eigenvalues)

    def truncated(self, n_modes: int) -> "SpectralModel":
        """Same model with only the first ``n_modes`` eigenvalues kept; the
        remaining modes are frozen (eigenvalue 0) and receive no input."""
        eig = self.eigenvalues.copy()
        eig[n_modes:] = 0.0
        return SpectralModel(self.dim_h, self.dim_k, eig, self.gamma, self.lip_b,
                             self.lip_sigma, self.horizon)


def semigroup_apply(model: SpectralModel, s: float, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if s == 0:
        return v.copy()
    # broadcasting over leading batch axes; last axis is the mode axis
    return model.decay(s) * v


def semigroup_apply_operator(model: SpectralModel, s: float, m) -> np.ndarray:
    """``e^{sA} m`` for an operator (or a batch of operators) K -> H."""
    m = np.asarray(m, dtype=float)
    if s == 0:
        return m.copy()
    return model.decay(s)[:, None] * m


def hs_norm(m) -> float:
    """Hilbert-Schmidt norm of a matrix K -> H in orthonormal bases."""
    m = np.asarray(m, dtype=float)
    return float(np.sqrt(np.sum(m * m)))


def critical_exponent(gamma: float) -> float:
    """Moment threshold ``p* = 2 / (1 - 2 gamma)``."""
    if not 0.0 <= gamma < 0.5:
        raise ValueError(f"gamma must lie in [0, 1/2), got {gamma}")
    return 2.0 / (1.0 - 2.0 * gamma)


@dataclass
class SmoothingReport:
    constant: float
    lip_sigma: float
    per_sample: list = field(default_factory=list)

    @property
    def violated(self) -> bool:
        return self.constant > self.lip_sigma


def check_smoothing(model: SpectralModel, sigma_fn: Callable, sample_points: Sequence,
                    s_grid: Sequence[float]) -> SmoothingReport:
    """Smallest ``c`` with ``|e^{sA} sigma(t,x)|_HS <= c s^-gamma (1 + |x|_inf)``
    over the given samples and semigroup times.

    ``sample_points`` holds ``(t, DiscretePath)`` pairs; ``sigma_fn`` is called
    on the path stopped at ``t``.
    """
    from .paths import PathView, node_index, sup_norm, stop_path

    if len(sample_points) == 0:
        raise ValueError("check_smoothing needs at least one sample point")
    s_grid = [float(s) for s in s_grid]
    if any(s <= 0 for s in s_grid):
        raise ValueError("s_grid entries must be positive")
    worst = 0.0
    rows = []
    for t, path in sample_points:
        j = node_index(path.grid, t)
        view = PathView.of(path, j)
        sig = np.asarray(sigma_fn(path.grid[j], view), dtype=float)
        sig = sig.reshape(model.dim_h, model.dim_k)
        xnorm = sup_norm(stop_path(path, path.grid[j]))
        c = max(hs_norm(semigroup_apply_operator(model, s, sig)) * s**model.gamma / (1.0 + xnorm)
                for s in s_grid)
        rows.append((float(t), c))
        worst = max(worst, c)
    return SmoothingReport(constant=worst, lip_sigma=model.lip_sigma, per_sample=rows)
