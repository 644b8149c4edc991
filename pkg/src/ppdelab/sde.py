"""Mild-solution simulation of path-dependent SDEs on the spectral truncation.

Scheme (exponential Euler, coefficients frozen at the left node)::

    X_{j+1} = e^{dt A} (X_j + b(t_j, X_{.^t_j}) dt + sigma(t_j, X_{.^t_j}) dW_j)

Each step reads only the history up to node ``j`` and the noise keyed by
``(seed, path, j, mode)``; restarting from a stopped path with the same keys
therefore reproduces the original path bit for bit.
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import SimulationError
from .paths import DiscretePath, PathView, make_grid, node_index
from .rng import GAUSSIAN, NoiseStream
from .spectral import SpectralModel

CHUNK = 8192


@dataclass(frozen=True)
class SdeProblem:
    """``dX = AX dt + b(t,X) dt + sigma(t,X) dW`` started from ``(t0, init)``.

    ``init`` is a constant H-vector or a :class:`DiscretePath` whose nodes up
    to ``t0`` give the initial segment.  ``drift``/``diffusion`` may be None
    (identically zero).
    """
    model: SpectralModel
    drift: Optional[Callable] = None
    diffusion: Optional[Callable] = None
    t0: float = 0.0
    init: object = 0.0

    def initial_path(self, grid: np.ndarray) -> DiscretePath:
        if isinstance(self.init, DiscretePath):
            if len(self.init.grid) != len(grid) or not np.allclose(self.init.grid, grid):
                raise ValueError("initial path grid does not match the simulation grid")
            return self.init
        v = np.broadcast_to(np.asarray(self.init, dtype=float), (self.model.dim_h,))
        return DiscretePath.constant(grid, v)

    def grid(self, n_steps: int) -> np.ndarray:
        return make_grid(self.model.horizon, n_steps)

    def with_init(self, t0: float, init) -> "SdeProblem":
        return replace(self, t0=t0, init=init)


@dataclass(frozen=True)
class ControlledSdeProblem:
    """Controlled variant: ``drift(t, view, a)`` and ``diffusion(t, view, a)``
    take the action payloads (one float per path).

    ``structure_b0``, when given, declares ``drift = diffusion @ b0`` with
    ``b0(t, view, a)`` valued in K.
    """
    model: SpectralModel
    actions: tuple
    drift: Optional[Callable] = None
    diffusion: Optional[Callable] = None
    t0: float = 0.0
    init: object = 0.0
    labels: Optional[tuple] = None
    structure_b0: Optional[Callable] = None

    def __post_init__(self):
        acts = tuple(float(a) for a in self.actions)
        if not acts:
            raise ValueError("action set must be nonempty")
        object.__setattr__(self, "actions", acts)
        if self.labels is None:
            object.__setattr__(self, "labels", tuple(str(a) for a in acts))

    initial_path = SdeProblem.initial_path
    grid = SdeProblem.grid

    def with_init(self, t0, init):
        return replace(self, t0=t0, init=init)

    def restricted(self, indices: Sequence[int]) -> "ControlledSdeProblem":
        return replace(self, actions=tuple(self.actions[i] for i in indices),
                       labels=tuple(self.labels[i] for i in indices))

    def fixed(self, action_index: int) -> SdeProblem:
        """Uncontrolled problem obtained by freezing one action."""
        a = self.actions[action_index]
        drift = diffusion = None
        if self.drift is not None:
            drift = lambda t, x, f=self.drift: f(t, x, np.full(x.batch, a))
        if self.diffusion is not None:
            diffusion = lambda t, x, f=self.diffusion: f(t, x, np.full(x.batch, a))
        return SdeProblem(self.model, drift, diffusion, self.t0, self.init)


def _as_batch(arr, batch: int, shape: tuple, what: str, j: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.shape == shape:
        return arr
    try:
        return np.broadcast_to(arr, (batch,) + shape)
    except ValueError:
        raise SimulationError(f"{what} at step {j} has shape {arr.shape}, expected {shape}") from None


def advance(model: SpectralModel, values: np.ndarray, grid: np.ndarray, j_start: int,
            j_end: int, stream: NoiseStream, path_ids: np.ndarray,
            drift=None, diffusion=None, action_fn=None, actions=None) -> np.ndarray:
    """Fill nodes ``j_start+1 .. j_end`` of ``values`` (batch, nodes, dim_h) in place.

    ``action_fn(j, view) -> indices`` switches on controlled mode; ``drift``
    and ``diffusion`` then receive the action payloads as third argument.
    Returns the action indices used, shape (batch, j_end - j_start).
    """
    dt = float(grid[1] - grid[0])
    decay = model.decay(dt)
    batch, dh = values.shape[0], values.shape[2]
    used = np.zeros((batch, max(j_end - j_start, 0)), dtype=np.int64)
    payload = None if actions is None else np.asarray(actions, dtype=float)
    for j in range(j_start, j_end):
        t = float(grid[j])
        view = PathView(t, j, dt, values[:, : j + 1])
        args = ()
        if action_fn is not None:
            idx = np.asarray(action_fn(j, view), dtype=np.int64).reshape(-1)
            idx = np.broadcast_to(idx, (batch,))
            used[:, j - j_start] = idx
            args = (payload[idx],)
        nxt = values[:, j].copy()
        if drift is not None:
            nxt += _as_batch(drift(t, view, *args), batch, (dh,), "drift", j) * dt
        if diffusion is not None:
            sig = np.asarray(diffusion(t, view, *args), dtype=float)
            dw = stream.increments(path_ids, j, dt)
            if sig.ndim == 2:
                nxt += dw @ sig.T
            else:
                sig = _as_batch(sig, batch, (dh, stream.dim_k), "diffusion", j)
                nxt += np.einsum("bhk,bk->bh", sig, dw)
        nxt *= decay
        if not np.all(np.isfinite(nxt)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(nxt), axis=1))[0])
            raise SimulationError(
                f"non-finite state at step {j} (t={t:.6g}) on path {int(path_ids[bad])}")
        values[:, j + 1] = nxt
    return used


def _start_values(problem, grid: np.ndarray, batch: int) -> tuple[np.ndarray, int]:
    j0 = node_index(grid, problem.t0)
    init = problem.initial_path(grid)
    values = np.empty((batch, len(grid), problem.model.dim_h))
    values[:, : j0 + 1] = init.values[: j0 + 1]
    return values, j0


def simulate_batch(problem: SdeProblem, n_steps: int, stream: NoiseStream,
                   path_ids) -> np.ndarray:
    """Paths for the given indices, shape (len(path_ids), n_steps+1, dim_h)."""
    grid = problem.grid(n_steps)
    path_ids = np.asarray(path_ids, dtype=np.int64).reshape(-1)
    values, j0 = _start_values(problem, grid, len(path_ids))
    advance(problem.model, values, grid, j0, n_steps, stream, path_ids,
            problem.drift, problem.diffusion)
    return values


def simulate_mild(problem: SdeProblem, n_steps: int, stream: NoiseStream,
                  path_index: int = 0) -> DiscretePath:
    grid = problem.grid(n_steps)
    return DiscretePath(grid, simulate_batch(problem, n_steps, stream, [path_index])[0])


def simulate_controlled(problem: ControlledSdeProblem, policy, n_steps: int,
                        stream: NoiseStream, path_index: int = 0) -> DiscretePath:
    grid = problem.grid(n_steps)
    values = simulate_controlled_batch(problem, policy, n_steps, stream, [path_index])
    return DiscretePath(grid, values[0])


def simulate_controlled_batch(problem: ControlledSdeProblem, policy, n_steps: int,
                              stream: NoiseStream, path_ids, start_values=None,
                              j0: int | None = None, j_end: int | None = None):
    """Controlled paths.  ``policy`` needs ``indices(j, view)``.

    ``start_values``/``j0`` allow restarting a batch of different histories
    (one per path) at node ``j0``.
    """
    grid = problem.grid(n_steps)
    path_ids = np.asarray(path_ids, dtype=np.int64).reshape(-1)
    if start_values is None:
        values, j0 = _start_values(problem, grid, len(path_ids))
    else:
        values = start_values
    advance(problem.model, values, grid, j0, n_steps if j_end is None else j_end, stream,
            path_ids, problem.drift, problem.diffusion, action_fn=policy.indices,
            actions=problem.actions)
    return values


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get("WORKERS", "1") or 1)
    return max(1, int(workers))


@dataclass
class PathEnsemble:
    grid: np.ndarray
    values: np.ndarray  # (n_paths, n_steps+1, dim_h)
    path_ids: np.ndarray
    seed: int
    t0: float
    noise: str = GAUSSIAN
    scheme: str = "exponential-euler"
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def path(self, i: int) -> DiscretePath:
        return DiscretePath(self.grid, self.values[i])

    def sup_norms(self) -> np.ndarray:
        return np.max(np.linalg.norm(self.values, axis=2), axis=1)

    def sup_moment(self, p: float = 2.0) -> tuple[float, float]:
        """Empirical ``E[|X|_inf^p]`` and its standard error."""
        m = self.sup_norms() ** p
        return float(m.mean()), float(m.std(ddof=1) / np.sqrt(len(m))) if len(m) > 1 else 0.0


def ensemble_simulate(problem: SdeProblem, n_paths: int, n_steps: int, seed: int,
                      noise: str = GAUSSIAN, workers: int | None = None,
                      p: float = 2.0, first_path: int = 0) -> PathEnsemble:
    """Independent mild paths, built in chunks and merged in path order."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    stream = NoiseStream(seed, problem.model.dim_k, noise)
    ids = np.arange(first_path, first_path + n_paths, dtype=np.int64)
    grid = problem.grid(n_steps)
    values = np.empty((n_paths, n_steps + 1, problem.model.dim_h))
    chunks = [slice(i, min(i + CHUNK, n_paths)) for i in range(0, n_paths, CHUNK)]

    def run(sl):
        values[sl] = simulate_batch(problem, n_steps, stream, ids[sl])

    nw = worker_count(workers)
    if nw == 1 or len(chunks) == 1:
        for sl in chunks:
            run(sl)
    else:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            list(pool.map(run, chunks))
    ens = PathEnsemble(grid, values, ids, seed, problem.t0, noise)
    moment, se = ens.sup_moment(p)
    if not np.isfinite(moment):
        raise SimulationError(f"empirical sup-moment of order {p} is not finite")
    ens.meta.update(p=p, sup_moment=moment, sup_moment_se=se)
    return ens


def simulate_terminal(problem: SdeProblem, n_paths: int, n_steps: int, seed: int,
                      noise: str = GAUSSIAN, workers: int | None = None) -> np.ndarray:
    """Terminal values only, shape (n_paths, dim_h); memory stays at one chunk
    per worker."""
    stream = NoiseStream(seed, problem.model.dim_k, noise)
    out = np.empty((n_paths, problem.model.dim_h))
    chunks = [slice(i, min(i + CHUNK, n_paths)) for i in range(0, n_paths, CHUNK)]

    def run(sl):
        out[sl] = simulate_batch(problem, n_steps, stream, np.arange(sl.start, sl.stop))[:, -1]

    nw = worker_count(workers)
    if nw == 1:
        for sl in chunks:
            run(sl)
    else:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            list(pool.map(run, chunks))
    return out


def flow_check(problem: SdeProblem, s: float, n_steps: int, stream: NoiseStream,
               n_paths: int = 8) -> float:
    """Max node-wise deviation between ``X^{t,z}`` and the restart
    ``X^{s, X^{t,z}}`` driven by the same noise keys."""
    grid = problem.grid(n_steps)
    js = node_index(grid, s)
    j0 = node_index(grid, problem.t0)
    if js < j0:
        raise ValueError("restart time precedes the initial time")
    ids = np.arange(n_paths)
    full = simulate_batch(problem, n_steps, stream, ids)
    restarted = np.empty_like(full)
    restarted[:, : js + 1] = full[:, : js + 1]
    advance(problem.model, restarted, grid, js, n_steps, stream, ids,
            problem.drift, problem.diffusion)
    return float(np.max(np.linalg.norm(full - restarted, axis=2)))


def sde_stability_check(problem_sequence: Sequence[SdeProblem], limit_problem: SdeProblem,
                        n_steps: int, seed: int, n_paths: int = 256, p: float = 2.0,
                        noise: str = GAUSSIAN) -> np.ndarray:
    """``(E sup|X^(n) - X|^p)^{1/p}`` for each approximating problem, with
    common noise."""
    ref = ensemble_simulate(limit_problem, n_paths, n_steps, seed, noise).values
    errs = []
    for prob in problem_sequence:
        vals = ensemble_simulate(prob, n_paths, n_steps, seed, noise).values
        sup = np.max(np.linalg.norm(vals - ref, axis=2), axis=1)
        errs.append(float(np.mean(sup**p) ** (1.0 / p)))
    return np.array(errs)


# ensemble persistence: little-endian header then node-major float64 rows
_HEADER = struct.Struct("<4sIIIQQdd")
MAGIC = b"PPDE"
VERSION = 1


def ensemble_bytes(ens: PathEnsemble) -> bytes:
    n_paths, nodes, dh = ens.values.shape
    head = _HEADER.pack(MAGIC, VERSION, dh, nodes - 1, n_paths, int(ens.seed),
                        float(ens.t0), float(ens.grid[-1]))
    return head + np.ascontiguousarray(ens.values, dtype="<f8").tobytes()


def ensemble_from_bytes(data: bytes) -> PathEnsemble:
    magic, version, dh, n_steps, n_paths, seed, t0, T = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError("not a PPDE ensemble file")
    if version != VERSION:
        raise ValueError(f"unsupported ensemble version {version}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    expected = n_paths * (n_steps + 1) * dh
    if body.size != expected:
        raise ValueError(f"ensemble body has {body.size} values, expected {expected}")
    values = body.reshape(n_paths, n_steps + 1, dh).astype(float)
    return PathEnsemble(make_grid(T, n_steps), values, np.arange(n_paths), seed, t0)
