"""Optimal stopping of path functionals: regression (Longstaff-Schwartz)
brackets and exact enumeration of Bernoulli noise trees.

On a tree every node carries its whole stopped history, so path-dependent
payoffs are handled by plain backward induction over histories.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import TreeSizeError
from .paths import DiscretePath, PathView, node_index
from .regression import check_features, feature_tensor, ridge_fit
from .rng import BERNOULLI, GAUSSIAN, derive_seed
from .sde import ControlledSdeProblem, SdeProblem, advance
from .solver import fresh_paths

TREE_CAP = 20  # max branching bits (steps x noise modes, plus action bits)


@dataclass
class ValueEstimate:
    value: float
    stderr: float
    high: Optional[float] = None
    high_stderr: Optional[float] = None
    policy: object = None
    rule: object = None
    exact: bool = False
    meta: dict = field(default_factory=dict)


@dataclass
class StopConfig:
    n_paths: int = 20000
    seed: int = 0
    noise: str = GAUSSIAN
    features: tuple = ("value", "value_sq")
    use_payoff: bool = True


@dataclass
class StoppingRule:
    """Stop at the first node ``j`` with ``payoff >= continuation_j``; the
    continuation estimate is a regression on features of the path stopped at
    ``j``.  The last node always stops."""
    grid: np.ndarray
    j_start: int
    j_end: int
    features: tuple
    use_payoff: bool
    fits: list

    def continuation(self, j: int, phi_j: np.ndarray) -> np.ndarray:
        return self.fits[j - self.j_start].predict(phi_j)

    def to_json(self) -> dict:
        return {"grid_T": float(self.grid[-1]), "n_steps": len(self.grid) - 1,
                "j_start": self.j_start, "j_end": self.j_end, "features": list(self.features),
                "use_payoff": self.use_payoff,
                "nodes": [{"node": self.j_start + k, "intercept": float(f.intercept),
                           "coef": np.asarray(f.coef).tolist()} for k, f in enumerate(self.fits)]}


def _payoffs(phi: Callable, values: np.ndarray, grid: np.ndarray, j0: int, j1: int) -> np.ndarray:
    dt = float(grid[1] - grid[0])
    out = np.empty((values.shape[0], j1 - j0 + 1))
    for j in range(j0, j1 + 1):
        out[:, j - j0] = np.asarray(phi(float(grid[j]), PathView(float(grid[j]), j, dt,
                                                                   values[:, : j + 1])), dtype=float)
    return out


def _design(values, dt, cfg: StopConfig, P, j0, j1):
    phi = feature_tensor(values[:, : j1 + 1], dt, cfg.features)
    if cfg.use_payoff:
        pad = np.zeros(phi.shape[:2] + (1,))
        pad[:, j0: j1 + 1, 0] = P
        phi = np.concatenate([phi, pad], axis=2)
    return phi


def _se(q: np.ndarray) -> float:
    return float(q.std(ddof=1) / math.sqrt(len(q))) if len(q) > 1 else 0.0


def lsm_stop(phi: Callable, problem: SdeProblem, t: float, x: DiscretePath, s: float,
             cfg: StopConfig | None = None) -> tuple[ValueEstimate, StoppingRule]:
    """Regression estimate of ``sup_tau E[phi(tau ^ s, X^{t,x})]``.

    ``value`` is the low-biased re-evaluation of the fitted rule on fresh
    noise; ``high`` is the in-sample backward value ``max(payoff, fit)``.
    """
    cfg = cfg or StopConfig()
    check_features(cfg.features)
    grid = x.grid
    j0, j1 = node_index(grid, t), node_index(grid, s)
    if j1 < j0:
        raise ValueError("stopping horizon precedes t")
    dt = x.dt
    X, _ = fresh_paths(problem, grid[j0], x, cfg.n_paths, cfg.seed, cfg.noise)
    P = _payoffs(phi, X[:, : j1 + 1], grid, j0, j1)
    phi_t = _design(X, dt, cfg, P, j0, j1)
    fits = [None] * (j1 - j0)
    V = P[:, -1].copy()
    high_se = 0.0
    for j in range(j1 - 1, j0 - 1, -1):
        high_se = _se(V)
        fit = ridge_fit(phi_t[:, j], V)
        fits[j - j0] = fit
        V = np.maximum(P[:, j - j0], fit.predict(phi_t[:, j]))
    rule = StoppingRule(grid, j0, j1, tuple(cfg.features), cfg.use_payoff, fits)
    high = float(V.mean())

    Y, _ = fresh_paths(problem, grid[j0], x, cfg.n_paths, derive_seed(cfg.seed, 1), cfg.noise)
    Q = _payoffs(phi, Y[:, : j1 + 1], grid, j0, j1)
    phi_f = _design(Y, dt, cfg, Q, j0, j1)
    realized = Q[:, -1].copy()
    stop_node = np.full(len(realized), j1)
    alive = np.ones(len(realized), dtype=bool)
    for j in range(j0, j1):
        trig = alive & (Q[:, j - j0] >= rule.continuation(j, phi_f[:, j]))
        realized[trig] = Q[trig, j - j0]
        stop_node[trig] = j
        alive &= ~trig
    est = ValueEstimate(float(realized.mean()), _se(realized), high, high_se, rule=rule,
                        meta={"mean_stop_time": float(grid[stop_node].mean())})
    return est, rule


def tree_bits(n_steps: int, dim_k: int, n_actions: int = 1) -> float:
    return n_steps * (dim_k + math.log2(max(1, n_actions)))


def tree_fits(n_steps: int, dim_k: int, n_actions: int = 1) -> bool:
    return tree_bits(n_steps, dim_k, n_actions) <= TREE_CAP + 1e-12


class _TreeNoise:
    """Increments addressed by leaf index: at step ``i`` (counted from the
    root) the leaf's base-``B`` digit selects an action and a sign pattern."""

    def __init__(self, dim_k: int, noise_bits: int, branch: int, depth: int, j0: int):
        self.dim_k, self.noise_bits, self.branch, self.depth, self.j0 = \
            dim_k, noise_bits, branch, depth, j0

    def digits(self, paths, step: int) -> np.ndarray:
        i = step - self.j0
        return (np.asarray(paths, dtype=np.int64) // self.branch ** (self.depth - 1 - i)) % self.branch

    def increments(self, paths, step: int, dt: float) -> np.ndarray:
        if self.noise_bits == 0:
            return np.zeros((len(paths), self.dim_k))
        pattern = self.digits(paths, step) % (1 << self.noise_bits)
        shifts = np.arange(self.dim_k - 1, -1, -1)
        bits = (pattern[:, None] >> shifts[None, :]) & 1
        return (2.0 * bits - 1.0) * math.sqrt(dt)


@dataclass
class TreeSolution:
    """Per level ``i`` (node ``j_start + i``): payoffs and values of every
    tree node, continuation flags, and, for controlled trees, the best
    action per node."""
    payoffs: list
    values: list
    continuation: list
    actions: list
    branch_noise: int


def _tree(phi, model, drift, diffusion, t, x, s, actions=None):
    grid = x.grid
    j0, j1 = node_index(grid, t), node_index(grid, s)
    if j1 < j0:
        raise ValueError("stopping horizon precedes t")
    m = j1 - j0
    dk = model.dim_k if diffusion is not None else 0
    n_act = 1 if actions is None else len(actions)
    if not tree_fits(m, dk, n_act):
        raise TreeSizeError(f"tree with {m} steps, {dk} noise modes and {n_act} actions exceeds "
                            f"the {TREE_CAP}-bit cap")
    nb = 1 << dk
    branch = n_act * nb
    n_leaves = branch ** m
    noise = _TreeNoise(model.dim_k, dk, branch, m, j0)
    values = np.empty((n_leaves, len(grid), model.dim_h))
    values[:, : j0 + 1] = x.values[: j0 + 1]
    ids = np.arange(n_leaves)
    action_fn = None
    if actions is not None:
        action_fn = lambda j, view: noise.digits(ids, j) // nb
    advance(model, values, grid, j0, j1, noise, ids, drift, diffusion,
            action_fn=action_fn, actions=actions)
    P = _payoffs(phi, values[:, : j1 + 1], grid, j0, j1)
    V = P[:, -1]
    sol = TreeSolution([P[:, -1]], [V], [np.zeros(n_leaves, dtype=bool)], [None], nb)
    for i in range(m - 1, -1, -1):
        groups = branch ** i
        p_i = P[:, i].reshape(groups, -1)[:, 0]
        child = V.reshape(groups, n_act, nb).mean(axis=2)
        best = np.argmax(child, axis=1)  # ties: lowest action index
        cont = child[np.arange(groups), best]
        V = np.maximum(p_i, cont)
        sol.payoffs.insert(0, p_i)
        sol.values.insert(0, V)
        sol.continuation.insert(0, cont > p_i)
        sol.actions.insert(0, best if actions is not None else None)
    return sol


def exact_tree_stop(phi: Callable, problem: SdeProblem, t: float, x: DiscretePath,
                    s: float) -> ValueEstimate:
    """Exact ``sup_tau E[phi(tau ^ s, X^{t,x})]`` under Bernoulli noise by
    backward induction over every noise history."""
    sol = _tree(phi, problem.model, problem.drift, problem.diffusion, t, x, s)
    return ValueEstimate(float(sol.values[0][0]), 0.0, exact=True,
                         meta={"tree": sol, "stop_now": not bool(sol.continuation[0][0])})


def mixed_stop_control(phi: Callable, cproblem: ControlledSdeProblem, t: float, x: DiscretePath,
                       s: float, noise: str = BERNOULLI) -> ValueEstimate:
    """``sup`` over stopping rules and controls of ``E[phi(tau, X^{t,x,a})]``
    by backward induction on the (action, noise) tree: at each node the
    larger of stopping now and continuing with the best action."""
    if cproblem.diffusion is not None and noise != BERNOULLI:
        raise ValueError("exact mixed stopping/control needs Bernoulli noise")
    sol = _tree(phi, cproblem.model, cproblem.drift, cproblem.diffusion, t, x, s,
                actions=cproblem.actions)
    first = None if sol.actions[0] is None else int(sol.actions[0][0])
    return ValueEstimate(float(sol.values[0][0]), 0.0, exact=True,
                         meta={"tree": sol, "stop_now": not bool(sol.continuation[0][0]),
                               "first_action": first})
