"""Solvers for the semilinear path-dependent equation ``Lu + F(t, x, u) = 0``,
``u(T, .) = xi``.

Two independent routes:

* :func:`picard_solve` splits ``[0, T]`` into windows short enough for the
  fixed-point map ``Gamma`` to contract, and iterates
  ``Gamma(u)(t,x) = E[zeta(X) + int_t^b F(s, X, u(s, X)) ds]`` on each window
  from the last one backwards.  Conditional expectations are per-node ridge
  regressions on non-anticipative path features.
* :func:`bsde_solve` runs the explicit backward Euler recursion for the
  associated BSDE with the same regression machinery.

Time integrals use the trapezoid rule on grid nodes everywhere except the
BSDE recursion, which is first order by design.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonContractionError
from .paths import DiscretePath, PathView, make_grid, node_index
from .regression import DEFAULT_FEATURES, RIDGE_SCALE, Fit, check_features, feature_tensor, features_at, ridge_fit
from .rng import GAUSSIAN, NoiseStream, derive_seed, normals
from .sde import SdeProblem, advance


@dataclass(frozen=True)
class Nonlinearity:
    """``F(t, view, y)`` with growth constant ``L``, Lipschitz constant
    ``L_hat`` in ``y`` and growth exponent ``p``."""
    fn: Callable
    L: float = 1.0
    L_hat: float = 1.0
    p: float = 0.0
    reads_y: bool = True

    def __call__(self, t, view, y):
        return self.fn(t, view, y)

    def shifted(self, c: float) -> "Nonlinearity":
        return Nonlinearity(lambda t, x, y, f=self.fn: f(t, x, y) + c,
                            self.L + abs(c), self.L_hat, self.p, self.reads_y)

    def mirrored(self) -> "Nonlinearity":
        """``-F(t, x, -y)``: the nonlinearity seen by ``-u``."""
        return Nonlinearity(lambda t, x, y, f=self.fn: -f(t, x, -y), self.L, self.L_hat,
                            self.p, self.reads_y)

    def check(self, probes: Sequence, ys: Sequence[float]) -> dict:
        """Sampled Lipschitz and growth checks on ``(t, DiscretePath)`` probes."""
        lip_worst = growth_worst = 0.0
        for t, path in probes:
            j = node_index(path.grid, t)
            view = PathView.of(path, j)
            xn = float(np.max(np.linalg.norm(path.values[: j + 1], axis=1)))
            vals = [float(np.asarray(self.fn(path.grid[j], view, np.array([y]))).reshape(-1)[0])
                    for y in ys]
            for (y1, v1) in zip(ys, vals):
                growth_worst = max(growth_worst, abs(v1) / (1 + xn**self.p + abs(y1)))
                for (y2, v2) in zip(ys, vals):
                    if y1 != y2:
                        lip_worst = max(lip_worst, abs(v1 - v2) / abs(y1 - y2))
        return {"lipschitz": lip_worst, "lipschitz_ok": lip_worst <= self.L_hat * (1 + 1e-12),
                "growth": growth_worst, "growth_ok": growth_worst <= self.L * (1 + 1e-12)}


@dataclass
class SolverConfig:
    n_steps: int = 64
    n_train_paths: int = 4096
    window_safety: float = 0.5
    tol: float = 1e-10
    max_picard_iters: int = 60
    features: tuple = DEFAULT_FEATURES
    ridge_scale: float = RIDGE_SCALE
    seed: int = 0
    init_spread: float = 0.0
    noise: str = GAUSSIAN

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown solver keys {sorted(extra)}")
        d = dict(d)
        if "features" in d:
            d["features"] = check_features(d["features"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        return d


class ValueFunctional:
    """Non-anticipative functional stored as one regression per grid node.

    Nodes before the solve start carry no fit.  At ``T`` the terminal
    functional ``xi`` is evaluated directly.
    """

    def __init__(self, grid, features, fits, terminal: Callable, t0: float = 0.0,
                 diagnostics: Optional[dict] = None):
        self.grid = np.asarray(grid, dtype=float)
        self.features = tuple(features)
        self.fits = list(fits)
        self.terminal = terminal
        self.t0 = t0
        self.diagnostics = diagnostics or {}

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def n_steps(self) -> int:
        return len(self.grid) - 1

    def _fit(self, j: int) -> Fit:
        fit = self.fits[j]
        if fit is None:
            raise ValueError(f"value functional has no fit at node {j} (t={self.grid[j]})")
        return fit

    def evaluate_view(self, view: PathView) -> np.ndarray:
        if view.j == self.n_steps:
            return np.asarray(self.terminal(self.grid[-1], view), dtype=float).reshape(view.batch)
        return self._fit(view.j).predict(features_at(view, self.features))

    def check_grid(self, grid) -> None:
        if len(grid) != len(self.grid) or not np.allclose(grid, self.grid, rtol=0, atol=1e-12):
            raise ValueError(f"path grid with {len(grid) - 1} steps does not match the "
                             f"value functional's {self.n_steps}-step grid")

    def value(self, t: float, path: DiscretePath) -> float:
        self.check_grid(path.grid)
        j = node_index(self.grid, t)
        return float(self.evaluate_view(PathView.of(path, j))[0])

    def __call__(self, t: float, view: PathView) -> np.ndarray:
        return self.evaluate_view(view)

    def along(self, values: np.ndarray, j_from: int, j_to: int, phi=None) -> np.ndarray:
        """Values at nodes ``j_from..j_to`` along a batch of full paths:
        shape (batch, j_to - j_from + 1)."""
        if values.shape[1] != len(self.grid):
            self.check_grid(np.arange(values.shape[1]))
        if phi is None:
            phi = feature_tensor(values[:, : j_to + 1], self.dt, self.features)
        out = np.empty((values.shape[0], j_to - j_from + 1))
        for j in range(j_from, j_to + 1):
            if j == self.n_steps:
                view = PathView(self.horizon, j, self.dt, values)
                out[:, j - j_from] = np.asarray(self.terminal(self.horizon, view), dtype=float)
            else:
                out[:, j - j_from] = self._fit(j).predict(phi[:, j])
        return out

    def _derived(self, fits, terminal) -> "ValueFunctional":
        return ValueFunctional(self.grid, self.features, fits, terminal, self.t0)

    def shifted(self, c: float) -> "ValueFunctional":
        """``u(t, x) + c (T - t)``; the terminal value is unchanged."""
        T = self.horizon
        fits = [None if f is None else f.shifted(c * (T - t)) for f, t in zip(self.fits, self.grid)]
        return self._derived(fits, self.terminal)

    def negated(self) -> "ValueFunctional":
        fits = [None if f is None else f.scaled(-1.0) for f in self.fits]
        return self._derived(fits, lambda t, x, g=self.terminal: -np.asarray(g(t, x)))

    def to_json(self) -> dict:
        nodes = []
        for j, f in enumerate(self.fits):
            if f is None or j == self.n_steps:
                continue
            nodes.append({"node": j, "t": float(self.grid[j]),
                          "intercept": float(f.intercept), "coef": np.asarray(f.coef).tolist()})
        return {"features": list(self.features), "T": self.horizon, "n_steps": self.n_steps,
                "t0": self.t0, "terminal": "xi", "nodes": nodes}

    @classmethod
    def from_json(cls, d: dict, terminal: Callable) -> "ValueFunctional":
        grid = make_grid(d["T"], d["n_steps"])
        fits = [None] * (d["n_steps"] + 1)
        for node in d["nodes"]:
            fits[node["node"]] = Fit(np.float64(node["intercept"]), np.asarray(node["coef"], dtype=float))
        return cls(grid, d["features"], fits, terminal, d.get("t0", 0.0))


def training_paths(problem: SdeProblem, cfg: SolverConfig, seed: int | None = None,
                   n_paths: int | None = None) -> tuple[np.ndarray, np.ndarray, int]:
    """Training ensemble from the problem's initial condition.  With
    ``init_spread > 0`` each path's initial segment is shifted by an
    independent Gaussian offset so that regressions at the start node see
    more than one state."""
    seed = cfg.seed if seed is None else seed
    n = cfg.n_train_paths if n_paths is None else n_paths
    grid = problem.grid(cfg.n_steps)
    j0 = node_index(grid, problem.t0)
    init = problem.initial_path(grid)
    ids = np.arange(n)
    values = np.empty((n, cfg.n_steps + 1, problem.model.dim_h))
    values[:, : j0 + 1] = init.values[: j0 + 1]
    if cfg.init_spread > 0:
        off = normals(derive_seed(seed, 17), ids[:, None], 0, np.arange(problem.model.dim_h)[None])
        values[:, : j0 + 1] += cfg.init_spread * off[:, None, :]
    stream = NoiseStream(seed, problem.model.dim_k, cfg.noise)
    advance(problem.model, values, grid, j0, cfg.n_steps, stream, ids,
            problem.drift, problem.diffusion)
    return grid, values, j0


def _trapezoid_tail(Fv: np.ndarray, dt: float) -> np.ndarray:
    """For F sampled on nodes a..b (columns), ``int_{t_j}^{t_b} F`` for each
    j = a..b-1 by the trapezoid rule."""
    rev = np.cumsum(Fv[:, ::-1], axis=1)[:, ::-1]
    return dt * (rev[:, :-1] - 0.5 * Fv[:, :-1] - 0.5 * Fv[:, -1:])


def window_partition(j0: int, n: int, dt: float, L_hat: float, M: float,
                     safety: float) -> list[tuple[int, int]]:
    """Windows ``(a, b)`` of node indices, last window first, each of length
    at most ``safety / (L_hat (1 + M))``."""
    eps_max = safety / (L_hat * (1.0 + M))
    width = max(1, int(math.floor(eps_max / dt + 1e-9)))
    out, b = [], n
    while b > j0:
        a = max(j0, b - width)
        out.append((a, b))
        b = a
    return out


def picard_solve(problem: SdeProblem, F: Nonlinearity, xi: Callable,
                 cfg: SolverConfig | None = None) -> ValueFunctional:
    cfg = cfg or SolverConfig()
    grid, X, j0 = training_paths(problem, cfg)
    n, dt = cfg.n_steps, float(grid[1] - grid[0])
    phi = feature_tensor(X, dt, cfg.features)
    M = problem.model.lip_b
    fits: list = [None] * (n + 1)
    U = np.empty((X.shape[0], n + 1))
    U[:, n] = np.asarray(xi(grid[n], PathView(grid[n], n, dt, X)), dtype=float)
    windows, deficient = [], set()

    def F_at(k, y):
        return np.asarray(F(grid[k], PathView(grid[k], k, dt, X[:, : k + 1]), y), dtype=float)

    def regress(a, b, targets):
        for j in range(a, b):
            fit = ridge_fit(phi[:, j], targets[:, j - a], cfg.ridge_scale)
            if fit.rank_deficient:
                deficient.add(j)
            fits[j] = fit
            U[:, j] = fit.predict(phi[:, j])

    for a, b in window_partition(j0, n, dt, F.L_hat, M, cfg.window_safety):
        eps = (b - a) * dt
        bound = eps * F.L_hat * (1.0 + M)
        zeta = U[:, b].copy()
        F_b = F_at(b, zeta)
        regress(a, b, np.repeat(zeta[:, None], b - a, axis=1))
        changes, ratios = [], []
        scale = 1.0 + float(np.max(np.abs(U[:, a:b + 1])))
        converged = False
        for it in range(cfg.max_picard_iters):
            Fv = np.empty((X.shape[0], b - a + 1))
            for k in range(a, b):
                Fv[:, k - a] = F_at(k, U[:, k])
            Fv[:, -1] = F_b
            old = U[:, a:b].copy()
            regress(a, b, zeta[:, None] + _trapezoid_tail(Fv, dt))
            change = float(np.max(np.abs(U[:, a:b] - old)))
            if changes and changes[-1] > 1e3 * cfg.tol * scale:
                ratios.append(change / changes[-1])
            changes.append(change)
            if len(ratios) >= 3 and min(ratios[-3:]) >= 1.0:
                raise NonContractionError(
                    f"Picard iterates not contracting on window [{grid[a]:.4g}, {grid[b]:.4g}]",
                    {"window": (a, b), "changes": changes, "ratios": ratios, "bound": bound})
            if change <= cfg.tol * scale:
                converged = True
                break
        if not converged:
            raise NonContractionError(
                f"no convergence within {cfg.max_picard_iters} iterations on window "
                f"[{grid[a]:.4g}, {grid[b]:.4g}]",
                {"window": (a, b), "changes": changes, "ratios": ratios, "bound": bound})
        windows.append({"start": float(grid[a]), "end": float(grid[b]), "eps": eps,
                        "bound": bound, "iterations": len(changes), "changes": changes,
                        "ratios": ratios, "max_ratio": max(ratios) if ratios else 0.0})
    diag = {"windows": windows[::-1], "rank_deficient_nodes": sorted(deficient),
            "n_train_paths": X.shape[0], "config": cfg.to_dict()}
    return ValueFunctional(grid, cfg.features, fits, xi, problem.t0, diag)


@dataclass
class MCConfig:
    n_paths: int = 4096
    seed: int = 1
    noise: str = GAUSSIAN


def fresh_paths(problem: SdeProblem, t: float, x: DiscretePath, n_paths: int,
                seed: int, noise: str = GAUSSIAN) -> tuple[np.ndarray, int]:
    """Paths of ``X^{t,x}`` on the grid of ``x``."""
    grid = x.grid
    j = node_index(grid, t)
    values = np.empty((n_paths, len(grid), problem.model.dim_h))
    values[:, : j + 1] = x.values[: j + 1]
    advance(problem.model, values, grid, j, len(grid) - 1, NoiseStream(seed, problem.model.dim_k, noise),
            np.arange(n_paths), problem.drift, problem.diffusion)
    return values, j


def pathwise_increment(u: ValueFunctional, F: Nonlinearity, values: np.ndarray, j_t: int,
                       j_s: int) -> np.ndarray:
    """``u(s, X) + int_t^s F(r, X, u(r, X)) dr`` along each path."""
    if j_s == j_t:
        return u.along(values, j_t, j_t)[:, 0]
    Uv = u.along(values, j_t, j_s)
    dt = u.dt
    Fv = np.empty_like(Uv)
    for k in range(j_t, j_s + 1):
        view = PathView(u.grid[k], k, dt, values[:, : k + 1])
        Fv[:, k - j_t] = F(u.grid[k], view, Uv[:, k - j_t])
    return Uv[:, -1] + _trapezoid_tail(Fv, dt)[:, 0]


@dataclass
class DriftRow:
    probe: int
    t: float
    s: float
    u_t: float
    drift: float
    stderr: float


def drift_table(u: ValueFunctional, problem: SdeProblem, F: Nonlinearity,
                probes: Sequence, mc: MCConfig) -> list[DriftRow]:
    """Estimate ``E[u(s, X^{t,x}) + int_t^s F] - u(t, x)`` for probes
    ``(t, x, s)``; each probe uses its own noise seed derived from ``mc.seed``."""
    rows = []
    for k, (t, x, s) in enumerate(probes):
        j_t, j_s = node_index(x.grid, t), node_index(x.grid, s)
        if j_s < j_t:
            raise ValueError("s must not precede t")
        u_t = u.value(x.grid[j_t], x)
        if j_s == j_t:
            rows.append(DriftRow(k, float(t), float(s), u_t, 0.0, 0.0))
            continue
        values, _ = fresh_paths(problem, x.grid[j_t], x, mc.n_paths, derive_seed(mc.seed, k), mc.noise)
        q = pathwise_increment(u, F, values, j_t, j_s)
        se = float(q.std(ddof=1) / math.sqrt(len(q))) if len(q) > 1 else 0.0
        rows.append(DriftRow(k, float(t), float(s), u_t, float(q.mean() - u_t), se))
    return rows


def mild_residual(u: ValueFunctional, problem: SdeProblem, F: Nonlinearity, xi: Callable,
                  test_points: Sequence, s_choices: Sequence[float], mc: MCConfig) -> list[DriftRow]:
    """Residual of the mild identity at every ``(t, x)`` and every ``s >= t``."""
    probes = [(t, x, s) for t, x in test_points for s in s_choices if s >= t - 1e-12]
    return drift_table(u, problem, F, probes, mc)


@dataclass
class BsdeState:
    grid: np.ndarray
    y_fits: list
    z_fits: list
    features: tuple


def bsde_solve(problem: SdeProblem, F: Nonlinearity, xi: Callable, t: float, x: DiscretePath,
               cfg: SolverConfig | None = None) -> tuple[float, float, BsdeState]:
    """Explicit backward Euler for the BSDE from ``(t, x)``.

    Returns ``(Y_t, stderr, state)``.
    """
    cfg = cfg or SolverConfig()
    grid = x.grid
    if len(grid) != cfg.n_steps + 1:
        raise ValueError("x must live on the solver grid")
    X, j_t = fresh_paths(problem, t, x, cfg.n_train_paths, cfg.seed, cfg.noise)
    dt, n = float(grid[1] - grid[0]), cfg.n_steps
    phi = feature_tensor(X, dt, cfg.features)
    stream = NoiseStream(cfg.seed, problem.model.dim_k, cfg.noise)
    ids = np.arange(X.shape[0])
    Y = np.asarray(xi(grid[n], PathView(grid[n], n, dt, X)), dtype=float)
    y_fits: list = [None] * (n + 1)
    z_fits: list = [None] * (n + 1)
    target = Y
    for j in range(n - 1, j_t - 1, -1):
        view = PathView(grid[j], j, dt, X[:, : j + 1])
        target = Y + np.asarray(F(grid[j], view, Y), dtype=float) * dt
        dw = stream.increments(ids, j, dt)
        z_fits[j] = ridge_fit(phi[:, j], Y[:, None] * dw / dt, cfg.ridge_scale)
        y_fits[j] = ridge_fit(phi[:, j], target, cfg.ridge_scale)
        Y = y_fits[j].predict(phi[:, j])
    se = float(target.std(ddof=1) / math.sqrt(len(target))) if len(target) > 1 else 0.0
    return float(Y.mean()), se, BsdeState(grid, y_fits, z_fits, cfg.features)


def feynman_kac_linear(problem: SdeProblem, F_tx: Callable, xi: Callable, t: float,
                       x: DiscretePath, mc: MCConfig) -> tuple[float, float]:
    """Plain Monte Carlo of ``E[xi(X) + int_t^T F(s, X) ds]``."""
    values, j = fresh_paths(problem, t, x, mc.n_paths, mc.seed, mc.noise)
    grid, n = x.grid, len(x.grid) - 1
    dt = float(grid[1] - grid[0])
    q = np.asarray(xi(grid[n], PathView(grid[n], n, dt, values)), dtype=float).copy()
    if j < n:
        Fv = np.stack([np.broadcast_to(np.asarray(F_tx(grid[k], PathView(grid[k], k, dt, values[:, : k + 1])),
                                                  dtype=float), (len(q),))
                       for k in range(j, n + 1)], axis=1)
        q += _trapezoid_tail(Fv, dt)[:, 0]
    se = float(q.std(ddof=1) / math.sqrt(len(q))) if len(q) > 1 else 0.0
    return float(q.mean()), se
