"""Numerical certificates for the viscosity theory of the path-dependent
equation: martingale drift tests, semijet probes, comparison and stability.

All statistical verdicts share one rule: a z-score against a two-sided 3σ
band, Bonferroni-corrected over the probes of a single report.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import norm

from .paths import DiscretePath, PathView, node_index
from .rng import BERNOULLI
from .sde import SdeProblem
from .solver import (MCConfig, Nonlinearity, SolverConfig, ValueFunctional, drift_table,
                     picard_solve)

SUB, SUPER, EXACT = "sub", "super", "exact"
MODES = (SUB, SUPER, EXACT)


def critical_z(n_probes: int, sigmas: float = 3.0) -> float:
    """Two-sided ``sigmas`` band, Bonferroni-corrected over ``n_probes``."""
    n = max(1, int(n_probes))
    return float(norm.isf(norm.sf(sigmas) / n))


RESOLUTION = 1e-8


def _z(drift: float, se: float, scale: float, resolution: float = RESOLUTION) -> float:
    # for deterministic quantities the standard error is 0; the floor stands
    # for the solver's own resolution (Picard tolerance, round-off)
    se = max(se, resolution * (1.0 + abs(scale)))
    return drift / se


def verdict(mode: str, z: float, z_crit: float) -> bool:
    if mode == SUB:
        return z >= -z_crit
    if mode == SUPER:
        return z <= z_crit
    if mode == EXACT:
        return abs(z) <= z_crit
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class MartingaleRow:
    t: float
    s: float
    drift: float
    stderr: float
    z: float
    passed: bool


@dataclass
class MartingaleReport:
    mode: str
    z_crit: float
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def n_fail(self) -> int:
        return sum(not r.passed for r in self.rows)

    def in_mode(self, mode: str) -> "MartingaleReport":
        """Re-judge the same estimates under another mode."""
        rows = [MartingaleRow(r.t, r.s, r.drift, r.stderr, r.z, verdict(mode, r.z, self.z_crit))
                for r in self.rows]
        return MartingaleReport(mode, self.z_crit, rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "s", "drift", "stderr", "z", "verdict"])
        for r in self.rows:
            w.writerow([f"{r.t:.17g}", f"{r.s:.17g}", f"{r.drift:.17g}", f"{r.stderr:.17g}",
                        f"{r.z:.17g}", "pass" if r.passed else "fail"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"mode": self.mode, "z_crit": self.z_crit, "n_probes": len(self.rows),
                "n_pass": len(self.rows) - self.n_fail, "n_fail": self.n_fail,
                "passed": self.passed}


def martingale_test(u: ValueFunctional, problem: SdeProblem, F: Nonlinearity, probes: Sequence,
                    mode: str, mc: MCConfig, resolution: float = RESOLUTION) -> MartingaleReport:
    """Drift of ``u(s, X) + int_t^s F(r, X, u(r, X)) dr`` between ``t`` and
    ``s`` for probes ``(t, x, s)``.

    ``sub`` passes when the drift is not significantly negative, ``super``
    when it is not significantly positive, ``exact`` when neither.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    for t, x, s in probes:
        if not s > t:
            raise ValueError("martingale probes need s > t")
    zc = critical_z(len(probes))
    report = MartingaleReport(mode, zc)
    for row in drift_table(u, problem, F, probes, mc):
        z = _z(row.drift, row.stderr, row.u_t, resolution)
        report.rows.append(MartingaleRow(row.t, row.s, row.drift, row.stderr, z,
                                         verdict(mode, z, zc)))
    return report


@dataclass
class JetResult:
    side: str
    alpha: float
    member: bool
    gap: float  # best stopping value minus the stop-now value, >= 0 up to noise
    gap_stderr: float
    inequality: float  # -alpha - F(t, x, u(t, x))
    inequality_ok: Optional[bool]
    method: str


def jet_probe(u: ValueFunctional, problem: SdeProblem, F: Nonlinearity, t: float,
              x: DiscretePath, alpha: float, h: float, mc: MCConfig, side: str = SUB,
              atol: float = 1e-9) -> JetResult:
    """Decide whether ``phi(s, y) = alpha s`` belongs to the sub- (resp.
    super-) jet of ``u`` at ``(t, x)`` with deterministic horizon ``h``.

    Sub side: membership means stopping at once attains
    ``inf_tau E[(phi - u)(tau, X)]``, i.e. ``sup_tau E[u(tau, X) - alpha tau]``
    is attained at ``tau = t``; then ``-alpha - F(t, x, u) <= 0`` is checked.
    The super side swaps inf and sup and flips the inequality.

    Bernoulli problems with small trees use exact enumeration; otherwise the
    low-biased value of a regression stopping rule is compared with the
    stop-now payoff.
    """
    from .stopping import StopConfig, exact_tree_stop, lsm_stop, tree_fits

    if side not in (SUB, SUPER):
        raise ValueError("side must be 'sub' or 'super'")
    sign = 1.0 if side == SUB else -1.0
    j = node_index(x.grid, t)
    t = float(x.grid[j])

    def payoff(s, view):
        return sign * (u.evaluate_view(view) - alpha * s)

    now = float(payoff(t, PathView.of(x, j))[0])
    js = node_index(x.grid, h)
    if js <= j:
        raise ValueError("horizon must lie after t")
    if mc.noise == BERNOULLI and tree_fits(js - j, problem.model.dim_k):
        est = exact_tree_stop(payoff, problem, t, x, x.grid[js])
        gap, gse, method = est.value - now, 0.0, "exact-tree"
    else:
        est, _ = lsm_stop(payoff, problem, t, x, x.grid[js],
                          StopConfig(n_paths=mc.n_paths, seed=mc.seed, noise=mc.noise))
        gap, gse, method = est.value - now, est.stderr, "regression"
    member = gap <= 3.0 * gse + atol * (1.0 + abs(now))
    u_tx = u.evaluate_view(PathView.of(x, j))
    ineq = float(-alpha - np.asarray(F(t, PathView.of(x, j), u_tx)).reshape(-1)[0])
    ok = None
    if member:
        tol = atol * (1.0 + abs(alpha))
        ok = ineq <= tol if side == SUB else ineq >= -tol
    return JetResult(side, float(alpha), bool(member), float(gap), float(gse), ineq, ok, method)


PRECONDITION = "not a sub/supersolution pair"
VIOLATION = "comparison violated"
PASSED = "pass"


@dataclass
class ComparisonReport:
    status: str
    gaps: list = field(default_factory=list)  # u2 - u1 at each probe
    sub_report: Optional[MartingaleReport] = None
    super_report: Optional[MartingaleReport] = None
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status == PASSED


def comparison_test(u1: ValueFunctional, u2: ValueFunctional, problem: SdeProblem,
                    F: Nonlinearity, probes: Sequence, mart_probes: Sequence, mc: MCConfig,
                    atol: float = 1e-9) -> ComparisonReport:
    """Check ``u1 <= u2`` at ``probes`` (pairs ``(t, x)``) after certifying
    that ``u1`` is a subsolution and ``u2`` a supersolution on
    ``mart_probes`` and that the terminal values are ordered."""
    sub = martingale_test(u1, problem, F, mart_probes, SUB, mc)
    sup = martingale_test(u2, problem, F, mart_probes, SUPER, mc)
    if not sub.passed or not sup.passed:
        who = [n for n, r in (("u1 as subsolution", sub), ("u2 as supersolution", sup)) if not r.passed]
        return ComparisonReport(PRECONDITION, [], sub, sup, "failed: " + ", ".join(who))
    for t, x in probes:
        n = x.n_steps
        view = PathView.of(x, n)
        a = float(u1.terminal(x.grid[n], view)[0])
        b = float(u2.terminal(x.grid[n], view)[0])
        if a > b + atol * (1 + abs(b)):
            return ComparisonReport(PRECONDITION, [], sub, sup, "terminal values not ordered")
    gaps, worst = [], None
    for k, (t, x) in enumerate(probes):
        g = u2.value(t, x) - u1.value(t, x)
        gaps.append(g)
        if g < -atol * (1 + abs(u2.value(t, x))) and worst is None:
            worst = k
    if worst is not None:
        return ComparisonReport(VIOLATION, gaps, sub, sup, f"first violation at probe {worst}")
    return ComparisonReport(PASSED, gaps, sub, sup)


@dataclass
class StabilityCurve:
    deviations: np.ndarray  # max |u_n - u| over probes, per n
    differences: np.ndarray  # (n_problems, n_probes) signed u_n - u
    monotone: bool

    @property
    def final(self) -> float:
        return float(self.deviations[-1])


def solution_stability_test(problems: Sequence[SdeProblem], Fs: Sequence[Nonlinearity],
                            xis: Sequence[Callable], limit: tuple, probes: Sequence,
                            cfg: SolverConfig) -> StabilityCurve:
    """Solve every approximating equation with the same training seed and
    compare with the limit solution at ``probes`` ``(t, x)``."""
    lp, lF, lxi = limit
    u = picard_solve(lp, lF, lxi, cfg)
    ref = np.array([u.value(t, x) for t, x in probes])
    diffs = []
    for prob, F, xi in zip(problems, Fs, xis):
        un = picard_solve(prob, F, xi, cfg)
        diffs.append(np.array([un.value(t, x) for t, x in probes]) - ref)
    diffs = np.array(diffs)
    dev = np.max(np.abs(diffs), axis=1) if diffs.size else np.zeros(0)
    mono = bool(np.all(np.diff(dev) <= 1e-12 * (1 + np.abs(dev[:-1])))) if len(dev) > 1 else True
    return StabilityCurve(dev, diffs, mono)


def report_json(report: MartingaleReport) -> str:
    return json.dumps(report.summary(), indent=2, sort_keys=True)
