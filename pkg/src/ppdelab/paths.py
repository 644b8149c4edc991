"""Discretized path space: uniform grids, stopped paths and the pseudometric.

Functionals on path space are plain callables ``f(t, view)`` where ``view`` is
a :class:`PathView`.  The simulation and solver code only ever hand over the
history up to ``t`` (nodes ``0..j``), which makes non-anticipativity a
structural property.  :func:`assert_non_anticipative` hands over the full,
unstopped path instead, so evaluators that reach past ``view.j`` are caught.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

GRID_RTOL = 1e-9


def make_grid(horizon: float, n_steps: int) -> np.ndarray:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    return np.arange(n_steps + 1, dtype=float) * (horizon / n_steps)


def node_index(grid: np.ndarray, t: float) -> int:
    """Index of the grid node at time ``t``.

    Times within ``GRID_RTOL * T`` of a node snap to it; anything else is
    rejected.
    """
    T = grid[-1]
    if t < -GRID_RTOL * T or t > T * (1 + GRID_RTOL):
        raise ValueError(f"time {t} outside [0, {T}]")
    dt = grid[1] - grid[0]
    j = int(round(t / dt))
    j = min(max(j, 0), len(grid) - 1)
    if abs(grid[j] - t) > GRID_RTOL * T:
        raise ValueError(f"time {t} is not a grid node (nearest {grid[j]})")
    return j


@dataclass(frozen=True)
class DiscretePath:
    grid: np.ndarray
    values: np.ndarray  # (n_steps + 1, dim_h)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if grid.ndim != 1 or len(grid) < 2:
            raise ValueError("grid needs at least two nodes")
        if values.shape[0] != len(grid):
            raise ValueError(f"values have {values.shape[0]} rows for {len(grid)} grid nodes")
        if grid[0] != 0.0:
            raise ValueError("grid must start at 0")
        steps = np.diff(grid)
        if np.any(steps <= 0) or np.ptp(steps) > GRID_RTOL * grid[-1]:
            raise ValueError("grid must be uniform and strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("path values must be finite")
        grid.setflags(write=False)
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid, value) -> "DiscretePath":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (len(grid), 1)))

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def n_steps(self) -> int:
        return len(self.grid) - 1

    @property
    def dim_h(self) -> int:
        return self.values.shape[1]

    def __sub__(self, other: "DiscretePath") -> "DiscretePath":
        _check_same_grid(self, other)
        return DiscretePath(self.grid, self.values - other.values)


@dataclass(frozen=True)
class PathView:
    """A batch of paths seen at node ``j`` (time ``t``).

    ``values`` has shape ``(batch, m, dim_h)`` with ``m > j``; evaluators may
    only read nodes ``0..j``.
    """
    t: float
    j: int
    dt: float
    values: np.ndarray = field(repr=False)

    @classmethod
    def of(cls, path: DiscretePath, j: int, full: bool = False) -> "PathView":
        vals = path.values if full else path.values[: j + 1]
        return cls(float(path.grid[j]), j, path.dt, vals[None])

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def current(self) -> np.ndarray:
        return self.values[:, self.j]

    @property
    def history(self) -> np.ndarray:
        return self.values[:, : self.j + 1]

    def running_integral(self) -> np.ndarray:
        """Trapezoid integral of each mode over ``[0, t]``; shape (batch, dim_h)."""
        return running_integral(self.history, self.dt)[:, -1]

    def running_sup_norm(self) -> np.ndarray:
        return np.max(np.linalg.norm(self.history, axis=2), axis=1)


def running_integral(values: np.ndarray, dt: float) -> np.ndarray:
    """Cumulative trapezoid integral along axis 1 (node axis), starting at 0.

    Sequential accumulation, so a prefix of the result equals the result on
    the prefix bit for bit.
    """
    out = np.zeros_like(values)
    if values.shape[1] > 1:
        np.cumsum(0.5 * dt * (values[:, 1:] + values[:, :-1]), axis=1, out=out[:, 1:])
    return out


def running_sup_norm(values: np.ndarray) -> np.ndarray:
    return np.maximum.accumulate(np.linalg.norm(values, axis=2), axis=1)


def stop_path(x: DiscretePath, t: float) -> DiscretePath:
    j = node_index(x.grid, t)
    vals = np.array(x.values)
    vals[j + 1:] = vals[j]
    return DiscretePath(x.grid, vals)


def sup_norm(x: DiscretePath) -> float:
    return float(np.max(np.linalg.norm(x.values, axis=1)))


def _check_same_grid(a: DiscretePath, b: DiscretePath) -> None:
    if a.grid.shape != b.grid.shape or not np.array_equal(a.grid, b.grid):
        raise ValueError("paths live on different grids")
    if a.dim_h != b.dim_h:
        raise ValueError("paths have different dimensions")


def d_infty(a: tuple[float, DiscretePath], b: tuple[float, DiscretePath]) -> float:
    """``|t - t'| + sup |x_{.^t} - x'_{.^t'}|``."""
    (t, x), (s, y) = a, b
    _check_same_grid(x, y)
    return abs(t - s) + sup_norm(stop_path(x, t) - stop_path(y, s))


@dataclass
class AnticipationReport:
    n_probes: int
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def assert_non_anticipative(f: Callable, probes: Sequence) -> AnticipationReport:
    """Evaluate ``f`` on each probe path and on its tail-perturbed copy.

    Each probe is ``(t, path, perturbation)``; the perturbation is a
    ``(n_nodes, dim_h)`` array (or a callable ``path -> array``) that must
    vanish on nodes ``<= t``.  Both evaluations see the whole path, so only
    the evaluator's own discipline keeps them equal.
    """
    report = AnticipationReport(n_probes=len(probes))
    for k, (t, path, pert) in enumerate(probes):
        j = node_index(path.grid, t)
        delta = np.asarray(pert(path) if callable(pert) else pert, dtype=float)
        delta = delta.reshape(path.values.shape)
        if np.any(delta[: j + 1] != 0):
            raise ValueError(f"probe {k}: perturbation touches nodes <= t")
        other = DiscretePath(path.grid, path.values + delta)
        v0 = np.asarray(f(path.grid[j], PathView.of(path, j, full=True)))
        v1 = np.asarray(f(path.grid[j], PathView.of(other, j, full=True)))
        if v0.shape != v1.shape or not np.array_equal(v0, v1):
            report.violations.append((k, float(t)))
    return report
