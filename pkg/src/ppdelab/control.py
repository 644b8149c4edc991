"""Stochastic control with a finite action set.

The gain of a policy ``a`` from ``(t, x)`` is

    J(t, x, a) = E[ xi(X^{t,x,a}) + sum_j l(t_j, X, a_j) dt ]

(left-point rule, matching piecewise-constant controls).  The value
function maximizes ``J`` over open-loop action lattices, exhaustively when
the lattice is small, and optionally over a regression feedback policy.
All candidate policies are evaluated on common random numbers; ties go to
the lowest action index (lexicographically smallest sequence).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .paths import DiscretePath, PathView, node_index
from .regression import Fit, check_features, feature_tensor, features_at, ridge_fit
from .rng import GAUSSIAN, NoiseStream, derive_seed, uniforms
from .sde import ControlledSdeProblem, advance
from .stopping import ValueEstimate
from .viscosity import critical_z

MAX_BATCH_PATHS = 1 << 19


@dataclass(frozen=True)
class RunningCost:
    """``l(t, view, a_payloads) -> (batch,)`` with growth constants ``N``, ``p``."""
    fn: Callable
    N: float = 1.0
    p: float = 0.0

    def __call__(self, t, view, a):
        return self.fn(t, view, a)


ZERO_COST = RunningCost(lambda t, view, a: np.zeros(view.batch), 0.0, 0.0)


@dataclass
class ControlPolicy:
    """Open-loop (``sequence[j]`` = action index at step ``j``) or feedback
    (``fits[j][a]`` regress the action-value on path features at node ``j``;
    the policy picks the first maximizer)."""
    kind: str
    sequence: Optional[np.ndarray] = None
    fits: Optional[list] = None
    features: tuple = ()

    @classmethod
    def open_loop(cls, sequence) -> "ControlPolicy":
        return cls("open_loop", sequence=np.asarray(sequence, dtype=np.int64))

    @classmethod
    def constant(cls, index: int, n_steps: int) -> "ControlPolicy":
        return cls.open_loop(np.full(n_steps, index))

    def indices(self, j: int, view: PathView) -> np.ndarray:
        if self.kind == "open_loop":
            return np.full(view.batch, self.sequence[j], dtype=np.int64)
        phi = features_at(view, self.features)
        q = np.stack([f.predict(phi) for f in self.fits[j]], axis=1)
        return np.argmax(q, axis=1)

    def to_json(self) -> dict:
        if self.kind == "open_loop":
            return {"kind": "open_loop", "sequence": self.sequence.tolist()}
        return {"kind": "feedback", "features": list(self.features),
                "nodes": [None if fs is None else
                          [{"intercept": float(f.intercept), "coef": np.asarray(f.coef).tolist()}
                           for f in fs] for fs in self.fits]}


@dataclass
class SearchConfig:
    n_paths: int = 4000
    seed: int = 0
    noise: str = GAUSSIAN
    exhaustive_cap: int = 4096
    n_restarts: int = 4
    max_sweeps: int = 10
    feedback: bool = False
    n_train_paths: int = 4000
    features: tuple = ("value",)
    inner_paths: int = 400


def _n_paths(cproblem: ControlledSdeProblem, n: int) -> int:
    # without noise every path is the same; one suffices and makes results exact
    return 1 if cproblem.diffusion is None else n


def _se(q: np.ndarray, axis=-1) -> np.ndarray:
    n = q.shape[axis]
    if n < 2:
        return np.zeros(np.delete(q.shape, axis if axis >= 0 else q.ndim + axis))
    return q.std(axis=axis, ddof=1) / math.sqrt(n)


def _gains(cproblem, ell, xi, values, grid, used, payloads, j0, j1, terminal=True, v_end=None):
    """Left-point running cost over steps ``j0..j1-1`` plus ``xi`` (or
    ``v_end``) at node ``j1``."""
    dt = float(grid[1] - grid[0])
    q = np.zeros(values.shape[0])
    if ell is not None:
        for j in range(j0, j1):
            view = PathView(float(grid[j]), j, dt, values[:, : j + 1])
            q += np.asarray(ell(float(grid[j]), view, payloads[used[:, j - j0]]), dtype=float) * dt
    if v_end is not None:
        q += v_end
    elif terminal:
        n = len(grid) - 1
        q += np.asarray(xi(float(grid[n]), PathView(float(grid[n]), n, dt, values)), dtype=float)
    return q


def evaluate_sequences(cproblem: ControlledSdeProblem, ell, xi, hists: np.ndarray, j0: int,
                       seqs: np.ndarray, n_steps: int, n_paths: int, seed: int,
                       noise: str = GAUSSIAN, id_base: Optional[np.ndarray] = None,
                       j_end: Optional[int] = None, v_end: Optional[Callable] = None) -> np.ndarray:
    """Pathwise gains of open-loop sequences ``seqs`` (S, j_end - j0) from
    each history in ``hists`` (B, j0+1, dim_h); shape (B, S, n_paths).

    Histories ``b`` use noise path ids ``id_base[b] * n_paths + i``, shared
    across sequences.  With ``v_end`` the terminal reward is replaced by
    ``v_end(values)`` evaluated at node ``j_end``.
    """
    grid = cproblem.grid(n_steps)
    j_end = n_steps if j_end is None else j_end
    B, S = hists.shape[0], seqs.shape[0]
    if id_base is None:
        id_base = np.arange(B)
    stream = NoiseStream(seed, cproblem.model.dim_k, noise)
    payloads = np.asarray(cproblem.actions)
    out = np.empty((B, S, n_paths))
    per = max(1, MAX_BATCH_PATHS // max(1, S * n_paths))
    for lo in range(0, B, per):
        hi = min(B, lo + per)
        nb = hi - lo
        rows = nb * S * n_paths
        values = np.empty((rows, n_steps + 1, cproblem.model.dim_h))
        values[:, : j0 + 1] = np.repeat(hists[lo:hi], S * n_paths, axis=0)
        seq_of_row = np.tile(np.repeat(np.arange(S), n_paths), nb)
        ids = (np.repeat(id_base[lo:hi], S * n_paths) * n_paths
               + np.tile(np.arange(n_paths), nb * S))
        action_fn = lambda j, view: seqs[seq_of_row, j - j0]
        used = advance(cproblem.model, values, grid, j0, j_end, stream, ids,
                       cproblem.drift, cproblem.diffusion, action_fn=action_fn, actions=payloads)
        end = None if v_end is None else v_end(values[:, : j_end + 1])
        q = _gains(cproblem, ell, xi, values, grid, used, payloads, j0, j_end, v_end=end)
        out[lo:hi] = q.reshape(nb, S, n_paths)
    return out


def _lattice(n_actions: int, m: int) -> np.ndarray:
    return np.array(list(itertools.product(range(n_actions), repeat=m)), dtype=np.int64).reshape(-1, m)


def _argmax_first(means: np.ndarray) -> int:
    return int(np.flatnonzero(means == means.max())[0])


def _coordinate_ascent(cproblem, ell, xi, hist, j0, n_steps, m, n_paths, cfg):
    """Multi-start coordinate ascent over open-loop sequences."""
    nA = len(cproblem.actions)
    starts = [np.full(m, a) for a in range(nA)]
    rs = derive_seed(cfg.seed, 31)
    for r in range(max(0, cfg.n_restarts - nA)):
        u = uniforms(rs, r, np.arange(m), 0)
        starts.append(np.minimum((u * nA).astype(np.int64), nA - 1))
    best_seq, best_q, evaluated, converged_all = None, None, 0, True

    def score(seqs):
        g = evaluate_sequences(cproblem, ell, xi, hist, j0, seqs, n_steps, n_paths, cfg.seed, cfg.noise)
        return g[0]

    for seq in starts:
        seq = seq.copy()
        q = score(seq[None])[0]
        evaluated += 1
        converged = False
        for _ in range(cfg.max_sweeps):
            changed = False
            for i in range(m):
                cands = np.repeat(seq[None], nA, axis=0)
                cands[:, i] = np.arange(nA)
                g = score(cands)
                evaluated += nA
                k = _argmax_first(g.mean(axis=1))
                if g[k].mean() > q.mean() and k != seq[i]:
                    seq, q, changed = cands[k], g[k], True
            if not changed:
                converged = True
                break
        converged_all &= converged
        if best_q is None or q.mean() > best_q.mean():
            best_seq, best_q = seq, q
    return best_seq, best_q, evaluated, converged_all


def train_feedback_policy(cproblem: ControlledSdeProblem, ell, xi, t: float, x: DiscretePath,
                          cfg: SearchConfig) -> ControlPolicy:
    """Regression dynamic programming on paths driven by uniformly random
    actions: ``Q_j(., a)`` regresses ``l(t_j, ., a) dt + G_{j+1}`` on the
    paths that took ``a`` at step ``j``, and ``G_j = max_a Q_j``."""
    check_features(cfg.features)
    grid, n = x.grid, x.n_steps
    j0 = node_index(grid, t)
    dt = x.dt
    N = _n_paths(cproblem, cfg.n_train_paths)
    nA = len(cproblem.actions)
    payloads = np.asarray(cproblem.actions)
    ids = np.arange(N)
    rs = derive_seed(cfg.seed, 41)
    values = np.empty((N, n + 1, cproblem.model.dim_h))
    values[:, : j0 + 1] = x.values[: j0 + 1]
    action_fn = lambda j, view: np.minimum((uniforms(rs, ids, j, 0) * nA).astype(np.int64), nA - 1)
    used = advance(cproblem.model, values, grid, j0, n,
                   NoiseStream(derive_seed(cfg.seed, 43), cproblem.model.dim_k, cfg.noise), ids,
                   cproblem.drift, cproblem.diffusion, action_fn=action_fn, actions=payloads)
    phi = feature_tensor(values, dt, cfg.features)
    G = np.asarray(xi(float(grid[n]), PathView(float(grid[n]), n, dt, values)), dtype=float)
    fits: list = [None] * n
    for j in range(n - 1, j0 - 1, -1):
        view = PathView(float(grid[j]), j, dt, values[:, : j + 1])
        per_action, q_all = [], []
        for a in range(nA):
            cost = np.zeros(N) if ell is None else \
                np.asarray(ell(float(grid[j]), view, np.full(N, payloads[a])), dtype=float) * dt
            mask = used[:, j - j0] == a
            if mask.sum() >= 2:
                fit = ridge_fit(phi[mask, j], (G + cost)[mask])
            else:
                fit = Fit(np.float64((G + cost).mean()), np.zeros(phi.shape[2]))
            per_action.append(fit)
            q_all.append(fit.predict(phi[:, j]))
        fits[j] = per_action
        G = np.max(np.stack(q_all, axis=1), axis=1)
    return ControlPolicy("feedback", fits=fits, features=tuple(cfg.features))


def policy_gain(cproblem: ControlledSdeProblem, ell, xi, policy, t: float, x: DiscretePath,
                n_paths: int, seed: int, noise: str = GAUSSIAN) -> np.ndarray:
    """Pathwise gain samples of one policy (common random numbers with the
    lattice evaluation under the same seed)."""
    grid, n = x.grid, x.n_steps
    j0 = node_index(grid, t)
    N = _n_paths(cproblem, n_paths)
    values = np.empty((N, n + 1, cproblem.model.dim_h))
    values[:, : j0 + 1] = x.values[: j0 + 1]
    payloads = np.asarray(cproblem.actions)
    used = advance(cproblem.model, values, grid, j0, n, NoiseStream(seed, cproblem.model.dim_k, noise),
                   np.arange(N), cproblem.drift, cproblem.diffusion,
                   action_fn=policy.indices, actions=payloads)
    return _gains(cproblem, ell, xi, values, grid, used, payloads, j0, n)


def value_function(cproblem: ControlledSdeProblem, ell, xi, t: float, x: DiscretePath,
                   cfg: SearchConfig | None = None) -> ValueEstimate:
    """Best estimated gain over the search class from ``(t, x)``."""
    cfg = cfg or SearchConfig()
    grid, n = x.grid, x.n_steps
    j0 = node_index(grid, t)
    m = n - j0
    if m == 0:
        v = float(np.asarray(xi(float(grid[n]), PathView.of(x, n))).reshape(-1)[0])
        return ValueEstimate(v, 0.0, exact=True, meta={"class": "terminal", "saturated": True})
    N = _n_paths(cproblem, cfg.n_paths)
    nA = len(cproblem.actions)
    hist = x.values[None, : j0 + 1]
    lattice_size = nA ** m
    if lattice_size <= cfg.exhaustive_cap:
        seqs = _lattice(nA, m)
        g = evaluate_sequences(cproblem, ell, xi, hist, j0, seqs, n, N, cfg.seed, cfg.noise)[0]
        k = _argmax_first(g.mean(axis=1))
        best_seq, best_q, evaluated, saturated, cls = seqs[k], g[k], len(seqs), True, "open-loop exhaustive"
    else:
        best_seq, best_q, evaluated, saturated = _coordinate_ascent(
            cproblem, ell, xi, hist, j0, n, m, N, cfg)
        cls = "open-loop coordinate ascent"
    full = np.zeros(n, dtype=np.int64)
    full[j0:] = best_seq
    policy = ControlPolicy.open_loop(full)
    if cfg.feedback:
        fb = train_feedback_policy(cproblem, ell, xi, t, x, cfg)
        q = policy_gain(cproblem, ell, xi, fb, t, x, N, cfg.seed, cfg.noise)
        evaluated += 1
        if q.mean() > best_q.mean():
            best_q, policy, cls = q, fb, "feedback"
    return ValueEstimate(float(best_q.mean()), float(_se(best_q)), policy=policy,
                         exact=cproblem.diffusion is None,
                         meta={"class": cls, "n_evaluated": evaluated, "saturated": bool(saturated),
                               "lattice_size": lattice_size})


class ControlValueEstimator:
    """``v(t, x)`` for single points and for batches of histories.

    The batch path is vectorized for exhaustive open-loop search; other
    search classes fall back to one :func:`value_function` call per history.
    Inner noise for batch calls is derived from the search seed and a salt so
    that it never coincides with the outer noise.
    """

    def __init__(self, cproblem: ControlledSdeProblem, ell, xi, cfg: SearchConfig, n_steps: int):
        self.cproblem, self.ell, self.xi, self.cfg, self.n_steps = cproblem, ell, xi, cfg, n_steps

    def __call__(self, t: float, x: DiscretePath) -> ValueEstimate:
        return value_function(self.cproblem, self.ell, self.xi, t, x, self.cfg)

    def batch(self, j: int, hists: np.ndarray, salt: int = 0) -> tuple[np.ndarray, np.ndarray, bool]:
        """Values, standard errors and a saturation flag at node ``j`` for
        histories ``hists`` (B, j+1, dim_h)."""
        n = self.n_steps
        grid = self.cproblem.grid(n)
        B = hists.shape[0]
        if j == n:
            vals = np.asarray(self.xi(float(grid[n]), PathView(float(grid[n]), n, grid[1] - grid[0],
                                                             hists)), dtype=float)
            return vals, np.zeros(B), True
        m, nA = n - j, len(self.cproblem.actions)
        seed = derive_seed(self.cfg.seed, 7, salt)
        N = _n_paths(self.cproblem, self.cfg.inner_paths)
        if nA ** m <= self.cfg.exhaustive_cap and not self.cfg.feedback:
            seqs = _lattice(nA, m)
            g = evaluate_sequences(self.cproblem, self.ell, self.xi, hists, j, seqs, n, N, seed,
                                   self.cfg.noise)
            means = g.mean(axis=2)
            k = np.argmax(means, axis=1)  # first maximizer
            best = g[np.arange(B), k]
            return best.mean(axis=1), _se(best), True
        vals, ses, sat = np.empty(B), np.empty(B), True
        for b in range(B):
            path_vals = np.zeros((n + 1, hists.shape[2]))
            path_vals[: j + 1] = hists[b]
            path_vals[j + 1:] = hists[b, -1]
            cfg = SearchConfig(**{**self.cfg.__dict__, "seed": derive_seed(seed, b), "n_paths": N})
            est = value_function(self.cproblem, self.ell, self.xi, float(grid[j]),
                                 DiscretePath(grid, path_vals), cfg)
            vals[b], ses[b] = est.value, est.stderr
            sat &= est.meta["saturated"]
        return vals, ses, sat


@dataclass
class DppResult:
    t: float
    tau: float
    lhs: float
    lhs_stderr: float
    rhs: float
    rhs_stderr: float
    drift: float
    stderr: float
    z: float
    saturated: bool
    passed: Optional[bool]  # None when the verdict is withheld


@dataclass
class MCPlan:
    n_paths: int = 1000
    seed: int = 101
    noise: str = GAUSSIAN


def _z(drift, se, scale):
    se = max(se, 1e-12 * (1.0 + abs(scale)))
    return drift / se


def dpp_check(est: ControlValueEstimator, t: float, x: DiscretePath, tau: float,
              mc: MCPlan, z_crit: float = 3.0) -> DppResult:
    """``sup_a E[int_t^tau l + v(tau, X^{t,x,a})] - v(t, x)`` with the
    outer supremum over open-loop actions on ``[t, tau)``."""
    cp = est.cproblem
    grid = x.grid
    j, jt = node_index(grid, t), node_index(grid, tau)
    if jt <= j:
        raise ValueError("tau must lie after t")
    lhs = est(grid[j], x)
    m, nA = jt - j, len(cp.actions)
    if nA ** m > est.cfg.exhaustive_cap:
        return DppResult(float(grid[j]), float(grid[jt]), lhs.value, lhs.stderr, math.nan, math.nan,
                         math.nan, math.nan, math.nan, False, None)
    seqs = _lattice(nA, m)
    N = _n_paths(cp, mc.n_paths)
    sat = [lhs.meta.get("saturated", True)]

    def v_end(values):
        vals, _, s = est.batch(jt, values[:, : jt + 1], salt=int(mc.seed) & 0xFFFF)
        sat.append(s)
        return vals

    g = evaluate_sequences(cp, est.ell, est.xi, x.values[None, : j + 1], j, seqs, est.n_steps, N,
                           mc.seed, mc.noise, j_end=jt, v_end=v_end)[0]
    k = _argmax_first(g.mean(axis=1))
    rhs, rhs_se = float(g[k].mean()), float(_se(g[k]))
    drift = rhs - lhs.value
    se = math.hypot(rhs_se, lhs.stderr)
    z = _z(drift, se, lhs.value)
    saturated = all(sat)
    return DppResult(float(grid[j]), float(grid[jt]), lhs.value, lhs.stderr, rhs, rhs_se, drift, se,
                     z, saturated, (abs(z) <= z_crit) if saturated else None)


@dataclass
class HjbRow:
    t: float
    value: float
    drifts: np.ndarray  # per constant action, over one step
    stderrs: np.ndarray
    super_ok: bool
    sub_ok: bool


@dataclass
class HjbReport:
    z_crit: float
    dt: float
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.super_ok and r.sub_ok for r in self.rows)


def hjb_viscosity_check(est: ControlValueEstimator, probes: Sequence, mc: MCPlan) -> HjbReport:
    """One-step drift of ``v(s, X^{t,x,a}) + int_t^s l`` for every constant
    action ``a`` (``s = t + dt``).

    Supersolution side: no action has significantly positive drift.
    Subsolution side: the best action's drift is not significantly negative.
    """
    cp = est.cproblem
    zc = critical_z(len(probes))
    report = None
    for p_idx, (t, x) in enumerate(probes):
        grid = x.grid
        j = node_index(grid, t)
        if j >= x.n_steps:
            raise ValueError("probes must be interior nodes")
        if report is None:
            report = HjbReport(zc, x.dt)
        v0 = est(grid[j], x)
        nA = len(cp.actions)
        seqs = np.arange(nA, dtype=np.int64)[:, None]
        N = _n_paths(cp, mc.n_paths)

        def v_end(values):
            vals, _, _ = est.batch(j + 1, values[:, : j + 2], salt=p_idx + 1)
            return vals

        g = evaluate_sequences(cp, est.ell, est.xi, x.values[None, : j + 1], j, seqs, est.n_steps, N,
                               derive_seed(mc.seed, p_idx), mc.noise, j_end=j + 1, v_end=v_end)[0]
        drifts = g.mean(axis=1) - v0.value
        ses = np.hypot(_se(g), v0.stderr)
        z = np.array([_z(d, s, v0.value) for d, s in zip(drifts, ses)])
        k = _argmax_first(drifts)
        report.rows.append(HjbRow(float(grid[j]), v0.value, drifts, ses,
                                  bool(np.all(z <= zc)), bool(z[k] >= -zc)))
    return report or HjbReport(zc, 0.0)


def structure_generator_check(cproblem: ControlledSdeProblem, alpha: float, beta, probes) -> float:
    """Largest discrepancy, over probes ``(t, x)`` and actions, between the
    generator of ``phi(s, y) = alpha s + <beta, y_s>`` computed from the drift
    and from the factorization ``drift = diffusion @ b0``."""
    if cproblem.structure_b0 is None:
        raise ValueError("problem declares no structure condition")
    beta = np.asarray(beta, dtype=float)
    lam = np.asarray(cproblem.model.eigenvalues)
    worst = 0.0
    for t, x in probes:
        j = node_index(x.grid, t)
        view = PathView.of(x, j)
        xt = x.values[j]
        for a in cproblem.actions:
            pa = np.array([a])
            b = np.asarray(cproblem.drift(float(x.grid[j]), view, pa), dtype=float).reshape(-1)
            sig = np.asarray(cproblem.diffusion(float(x.grid[j]), view, pa), dtype=float)
            sig = sig.reshape(cproblem.model.dim_h, cproblem.model.dim_k)
            b0 = np.asarray(cproblem.structure_b0(float(x.grid[j]), view, pa), dtype=float).reshape(-1)
            base = alpha + beta @ (lam * xt)
            worst = max(worst, abs((base + beta @ b) - (base + (sig.T @ beta) @ b0)))
    return worst
