"""Scenario execution, artifacts and replay.

Exit codes: 0 all checks pass, 2 schema error, 3 numerical failure,
4 check failure (the report is still written) or replay mismatch.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import shutil
import tempfile
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .control import ControlValueEstimator, MCPlan, SearchConfig, dpp_check, hjb_viscosity_check, \
    structure_generator_check
from .errors import NumericalError
from .paths import DiscretePath, node_index
from .rng import BERNOULLI, NoiseStream, derive_seed
from .scenario import Built, Scenario, ScenarioError, digest, load, parse, stages_for
from .sde import ensemble_bytes, ensemble_simulate, flow_check, worker_count
from .solver import MCConfig, SolverConfig, bsde_solve, drift_table, fresh_paths, picard_solve
from .stopping import StopConfig, exact_tree_stop, lsm_stop, tree_fits
from .viscosity import EXACT, SUB, SUPER, comparison_test, martingale_test, solution_stability_test

EXIT_OK, EXIT_SCHEMA, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4
REPORT = "report.json"


def _g(v) -> str:
    return f"{float(v):.17g}"


def atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_g(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue().encode()


def _json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _check(name, passed, value=None, stderr=None, exact=False, **detail) -> dict:
    d = {"name": name, "passed": bool(passed)}
    if value is not None:
        d["value"] = float(value)
        if exact or stderr is None:
            d["exact"] = True
        else:
            d["stderr"] = float(stderr)
    d.update({k: v for k, v in detail.items() if v is not None})
    return d


class Run:
    def __init__(self, sc: Scenario, raw: dict, out: Path, seed: int, workers: Optional[int]):
        self.sc, self.raw, self.out, self.seed, self.workers = sc, raw, out, seed, workers
        self.b = Built(sc)
        self.artifacts: dict[str, str] = {}
        self.checks: list[dict] = []
        self.timings: dict[str, float] = {}
        self.u = None

    def emit(self, name: str, data: bytes) -> None:
        atomic_write(self.out / name, data)
        self.artifacts[name] = hashlib.sha256(data).hexdigest()

    # stages ------------------------------------------------------------------

    def simulate(self):
        blk, b = self.sc.simulate, self.b
        ens = ensemble_simulate(b.problem, blk.n_paths, b.n_steps, derive_seed(self.seed, 1),
                                blk.noise, self.workers, blk.p)
        self.emit("ensemble.bin", ensemble_bytes(ens))
        mean = ens.values.mean(axis=0)
        var = ens.values.var(axis=0, ddof=1) if ens.n_paths > 1 else np.zeros_like(mean)
        rows = [[j, b.grid[j], *mean[j], *var[j]] for j in range(len(b.grid))]
        dh = b.model.dim_h
        self.emit("moments.csv", _csv(["node", "t"] + [f"mean_{k}" for k in range(dh)]
                                      + [f"var_{k}" for k in range(dh)], rows))
        m, se = ens.meta["sup_moment"], ens.meta["sup_moment_se"]
        self.checks.append(_check(f"sup_moment_p{blk.p:g}_finite", math.isfinite(m), m, se))
        stream = NoiseStream(derive_seed(self.seed, 1), b.model.dim_k, blk.noise)
        for s in blk.flow_times:
            dev = flow_check(b.problem, s, b.n_steps, stream, blk.flow_paths)
            self.checks.append(_check(f"flow_exact_s={s:g}", dev == 0.0, dev, exact=True))
        if blk.oracle_mean is not None:
            target = np.asarray(blk.oracle_mean, dtype=float)
            end = ens.values[:, -1]
            se_T = end.std(axis=0, ddof=1) / math.sqrt(len(end))
            for k, (mu, s_k) in enumerate(zip(end.mean(axis=0), se_T)):
                self.checks.append(_check(f"terminal_mean_mode{k}", abs(mu - target[k]) <= 3 * s_k,
                                          mu, s_k, oracle=float(target[k])))

    def _solver_cfg(self, n_steps=None) -> SolverConfig:
        s = self.sc.solver
        return SolverConfig(n_steps=n_steps or self.b.n_steps, n_train_paths=s.n_train_paths,
                            window_safety=s.window_safety, tol=s.tol,
                            max_picard_iters=s.max_picard_iters, features=tuple(s.features),
                            ridge_scale=s.ridge_scale, seed=derive_seed(self.seed, 2),
                            init_spread=s.init_spread, noise=s.noise)

    def _mc(self, salt) -> MCConfig:
        v = self.sc.verification
        n = v.n_paths if v is not None else 4096
        return MCConfig(n, derive_seed(self.seed, salt), self.sc.solver.noise)

    def _u0(self, u, salt=9):
        """Fresh Monte Carlo of ``E[xi + int F(u)]`` from the initial point:
        the solver value with a standard error."""
        b = self.b
        row = drift_table(u, b.problem, b.F, [(b.t0, b.x0, b.grid[-1])], self._mc(salt))[0]
        return row.u_t, row.u_t + row.drift, row.stderr

    def solve(self):
        b = self.b
        u = picard_solve(b.problem, b.F, b.xi, self._solver_cfg())
        self.u = u
        self.emit("value_functional.json", _json(u.to_json()))
        rows, worst = [], True
        for k, w in enumerate(u.diagnostics["windows"]):
            rows.append([k, w["start"], w["end"], w["eps"], w["iterations"], w["max_ratio"], w["bound"]])
            worst &= w["max_ratio"] <= w["bound"] + 0.05
        self.emit("picard.csv", _csv(["window", "start", "end", "eps", "iterations", "max_ratio",
                                      "bound"], rows))
        max_ratio = max((w["max_ratio"] for w in u.diagnostics["windows"]), default=0.0)
        self.checks.append(_check("picard_contraction_rate", worst, max_ratio, exact=True))
        fitted, mc, se = self._u0(u)
        self.checks.append(_check("solution_at_initial_point", True, mc, se, fitted=fitted))
        if u.diagnostics["rank_deficient_nodes"]:
            self.checks.append(_check("regression_rank", True, exact=True,
                                      deficient_nodes=u.diagnostics["rank_deficient_nodes"]))

    def _probes(self):
        """Probe points: the initial path at ``t0`` and simulated paths at
        later probe times (a frozen history is not in the support of X)."""
        b, v = self.b, self.sc.verification
        vals, _ = fresh_paths(b.problem, b.t0, b.x0, v.n_probe_paths, derive_seed(self.seed, 3),
                              self.sc.solver.noise)
        paths = [DiscretePath(b.grid, vv) for vv in vals]
        out = []
        for t in v.probe_times:
            try:
                j = node_index(b.grid, t)
            except ValueError as exc:
                raise ScenarioError("verification.probe_times", str(exc)) from None
            if b.grid[j] < b.t0 - 1e-12 or j >= b.n_steps:
                raise ScenarioError("verification.probe_times", f"probe time {t} outside [t0, T)")
            if abs(b.grid[j] - b.t0) <= 1e-12:
                out.append((float(b.grid[j]), b.x0))
            else:
                out += [(float(b.grid[j]), x) for x in paths]
        return out

    def _mart_probes(self, probes):
        b, v = self.b, self.sc.verification
        T = float(b.grid[-1])
        out = []
        for t, x in probes:
            ss = sorted({min(T, t + o) for o in v.s_offsets if o > 0} | {T})
            out += [(t, x, float(b.grid[node_index(b.grid, s)])) for s in ss]
        return out

    def verify(self):
        b, v = self.b, self.sc.verification
        if self.u is None:
            self.u = picard_solve(b.problem, b.F, b.xi, self._solver_cfg())
        u = self.u
        probes = self._probes()
        mprobes = self._mart_probes(probes)
        mc = self._mc(4)
        rep = martingale_test(u, b.problem, b.F, mprobes, EXACT, mc)
        self.emit("martingale.csv", rep.to_csv().encode())
        worst = max(rep.rows, key=lambda r: abs(r.z))
        self.checks.append(_check("martingale_exact", rep.passed, worst.drift, worst.stderr,
                                  n_probes=len(rep.rows), z_crit=rep.z_crit))
        if v.shift_c is not None:
            self._shift_checks(u, probes, mprobes, mc, v.shift_c)
        if v.oracle is not None:
            self._oracle(u)
        if v.bsde:
            self._bsde(u)
        if v.stability_ns:
            self._stability(probes)

    def _shift_checks(self, u, probes, mprobes, mc, c):
        b = self.b
        lo, hi = u.shifted(-c), u.shifted(c)
        sub = martingale_test(lo, b.problem, b.F, mprobes, SUB, mc)
        sup = martingale_test(hi, b.problem, b.F, mprobes, SUPER, mc)
        self.emit("martingale_sub.csv", sub.to_csv().encode())
        self.emit("martingale_super.csv", sup.to_csv().encode())
        for name, rep in (("shift_sub", sub), ("shift_super", sup)):
            w = min(rep.rows, key=lambda r: abs(r.z))
            self.checks.append(_check(f"{name}_passes", rep.passed, w.drift, w.stderr))
            n_exact_fail = rep.in_mode(EXACT).n_fail
            self.checks.append(_check(f"{name}_fails_exact", n_exact_fail >= 1, n_exact_fail,
                                      exact=True))
        chain = [u.shifted(-2 * c), lo, u, hi]
        rows, ok = [], True
        for t, x in probes:
            vals = [w.value(t, x) for w in chain]
            gaps = np.diff(vals)
            expected = c * (float(b.grid[-1]) - t)
            ok &= bool(np.all(np.abs(gaps - expected) <= 1e-9 * (1 + abs(vals[2]))))
            rows.append([t, *vals, *gaps, expected])
        self.emit("comparison_chain.csv", _csv(["t", "u_m2c", "u_mc", "u", "u_pc", "gap1", "gap2",
                                                "gap3", "expected_gap"], rows))
        subs, sups = [chain[0], chain[1], chain[2]], [chain[2], chain[3]]
        pair_ok = True
        for i, a in enumerate(subs):
            for k, bb in enumerate(sups):
                r = comparison_test(a, bb, b.problem, b.F, probes, mprobes, mc)
                pair_ok &= r.passed
        self.checks.append(_check("comparison_chain", ok and pair_ok, c, exact=True))
        fault = comparison_test(hi, u, b.problem, b.F, probes, mprobes, mc)
        self.checks.append(_check("comparison_detects_mislabeled_pair",
                                  fault.status == "not a sub/supersolution pair", exact=True))

    def _oracle(self, u):
        b, o = self.b, self.sc.verification.oracle
        T, t0 = float(b.grid[-1]), b.t0
        if o.kind == "exp_linear":
            target = math.exp(o.lam * (T - t0))
        else:
            lam1 = float(b.model.eigenvalues[0])
            target = math.exp(lam1 * (T - t0)) * float(b.x0.values[0, 0]) + o.lam * (T - t0)
        fitted, mc, se = self._u0(u, salt=10)
        tol = max(3 * se, o.rel_tol * abs(target))
        self.checks.append(_check(f"oracle_{o.kind}", abs(fitted - target) <= tol, fitted, se,
                                  oracle=target, tolerance=tol))

    def _bsde(self, u):
        b = self.b
        cfg = self._solver_cfg()
        cfg2 = self._solver_cfg(2 * b.n_steps)
        y1, se1, _ = bsde_solve(b.problem, b.F, b.xi, b.t0, b.x0, cfg)
        x2 = DiscretePath.constant(b.problem.grid(2 * b.n_steps), b.x0.values[0])
        y2, se2, _ = bsde_solve(b.problem, b.F, b.xi, b.t0, x2, cfg2)
        u2 = picard_solve(b.problem, b.F, b.xi, cfg2)
        p1 = u.value(b.t0, b.x0)
        p2 = u2.value(b.t0, x2)
        _, _, sp = self._u0(u, salt=11)
        disc_b = 2 * abs(y1 - y2)  # first-order scheme
        disc_p = 4 / 3 * abs(p1 - p2)  # trapezoid in time
        sigma = math.sqrt(se1**2 + sp**2 + disc_b**2 + disc_p**2)
        self.checks.append(_check("bsde_vs_picard", abs(y1 - p1) <= 3 * sigma, y1 - p1, sigma,
                                  bsde=y1, picard=p1))

    def _stability(self, probes):
        b, v = self.b, self.sc.verification
        cfg = self._solver_cfg()
        ns = list(v.stability_ns)
        curve = solution_stability_test([b.problem] * len(ns), [b.F.shifted(1.0 / n) for n in ns],
                                        [b.xi] * len(ns), (b.problem, b.F, b.xi), probes, cfg)
        T = float(b.grid[-1])
        rows, match = [], True
        for n, diffs in zip(ns, curve.differences):
            for (t, _), d in zip(probes, diffs):
                expected = (T - t) / n
                match &= abs(d - expected) <= 1e-9 * (1 + expected) or b.F.reads_y
                rows.append([n, t, d, expected])
        self.emit("stability.csv", _csv(["n", "t", "deviation", "expected_if_y_free"], rows))
        self.checks.append(_check("stability_monotone", curve.monotone, curve.final, exact=True))
        if not b.F.reads_y:
            self.checks.append(_check("stability_matches_shift", match, curve.final, exact=True))

    def stop(self):
        b, blk = self.b, self.sc.stopping
        s = float(b.grid[-1]) if blk.s is None else blk.s
        cfg = StopConfig(n_paths=blk.n_paths, seed=derive_seed(self.seed, 6), noise=blk.noise)
        est, rule = lsm_stop(b.payoff, b.problem, blk.t, b.x0, s, cfg)
        self.emit("stopping_rule.json", _json(rule.to_json()))
        rows = [["low", est.value, est.stderr], ["high", est.high, est.high_stderr]]
        band = 3 * math.hypot(est.stderr, est.high_stderr)
        self.checks.append(_check("lsm_bracket_ordered", est.value <= est.high + band, est.value,
                                  est.stderr, high=est.high, high_stderr=est.high_stderr))
        m = node_index(b.grid, s) - node_index(b.grid, blk.t)
        if blk.noise == BERNOULLI and tree_fits(m, b.model.dim_k):
            ex = exact_tree_stop(b.payoff, b.problem, blk.t, b.x0, s)
            rows.append(["exact", ex.value, 0.0])
            inside = est.value - 3 * est.stderr <= ex.value <= est.high + 3 * est.high_stderr
            self.checks.append(_check("exact_tree_in_bracket", inside, ex.value, exact=True))
            gap = abs(est.high - est.value) / max(abs(ex.value), 1e-12)
            self.checks.append(_check("lsm_gap", gap < blk.gap_tol, gap, exact=True))
        self.emit("stopping.csv", _csv(["quantity", "value", "stderr"], rows))

    def control(self):
        b, blk = self.b, self.sc.control
        sb = blk.search
        cfg = SearchConfig(n_paths=sb.n_paths, seed=derive_seed(self.seed, 5), noise=sb.noise,
                           exhaustive_cap=sb.exhaustive_cap, n_restarts=sb.n_restarts,
                           max_sweeps=sb.max_sweeps, feedback=sb.feedback,
                           n_train_paths=sb.n_train_paths, features=tuple(sb.features),
                           inner_paths=sb.inner_paths)
        est = ControlValueEstimator(b.cproblem, b.cost, b.xi, cfg, b.n_steps)
        v = est(b.t0, b.x0)
        self.emit("policy.json", _json(v.policy.to_json() if v.policy is not None else None))
        if blk.oracle_value is not None:
            if v.exact:
                ok = abs(v.value - blk.oracle_value) <= 1e-12 * (1 + abs(blk.oracle_value))
                self.checks.append(_check("value_oracle", ok, v.value, exact=True,
                                          oracle=blk.oracle_value))
            else:
                ok = abs(v.value - blk.oracle_value) <= 3 * v.stderr
                self.checks.append(_check("value_oracle", ok, v.value, v.stderr,
                                          oracle=blk.oracle_value))
        else:
            self.checks.append(_check("value", v.meta["saturated"], v.value, None if v.exact else v.stderr,
                                      exact=v.exact, search=v.meta["class"]))
        plan = MCPlan(blk.mc_paths, derive_seed(self.seed, 8), sb.noise)
        rows = []
        for k, p in enumerate(blk.dpp_probes):
            r = dpp_check(est, p.t, b.x0, p.tau, MCPlan(plan.n_paths, derive_seed(plan.seed, k), plan.noise))
            rows.append([r.t, r.tau, r.lhs, r.rhs, r.drift, r.stderr, r.z,
                         "withheld" if r.passed is None else ("pass" if r.passed else "fail")])
            self.checks.append(_check(f"dpp_t={r.t:g}_tau={r.tau:g}", bool(r.passed), r.drift,
                                      r.stderr, exact=v.exact, z=r.z))
        if rows:
            self.emit("dpp.csv", _csv(["t", "tau", "lhs", "rhs", "drift", "stderr", "z", "verdict"], rows))
        if blk.hjb_times:
            rep = hjb_viscosity_check(est, [(t, b.x0) for t in blk.hjb_times], plan)
            hrows = []
            for r in rep.rows:
                for a, d, s in zip(b.cproblem.labels, r.drifts, r.stderrs):
                    hrows.append([r.t, a, d, s, "pass" if (r.super_ok and r.sub_ok) else "fail"])
            self.emit("hjb.csv", _csv(["t", "action", "drift", "stderr", "verdict"], hrows))
            best = max((float(np.max(r.drifts)) for r in rep.rows), default=0.0)
            self.checks.append(_check("hjb_viscosity", rep.passed, best, None if v.exact else
                                      float(max(np.max(r.stderrs) for r in rep.rows)), exact=v.exact,
                                      z_crit=rep.z_crit))
        if blk.structure_condition:
            err = structure_generator_check(b.cproblem, 1.0, np.ones(b.model.dim_h),
                                            [(t, b.x0) for t in (blk.hjb_times or [b.t0])])
            self.checks.append(_check("structure_condition_generator", err <= 1e-12, err, exact=True))


STAGE_METHODS = {"simulate": Run.simulate, "solve": Run.solve, "verify": Run.verify,
                 "stop": Run.stop, "control": Run.control}


def run_scenario(config: str, subcommand: str, out_dir: str, seed: Optional[int] = None,
                 workers: Optional[int] = None, raw: Optional[dict] = None) -> tuple[int, dict]:
    """Execute ``subcommand`` for the scenario at ``config`` (a path or a
    bundled name, or ``raw`` data) and write artifacts to ``out_dir``."""
    try:
        if raw is not None:
            sc = parse(raw)
        else:
            sc, raw = load(config)
        stages = stages_for(sc, subcommand)
        eff_seed = sc.seed if seed is None else int(seed)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(sc, raw, out, eff_seed, workers)
    except ScenarioError as exc:
        return EXIT_SCHEMA, {"error": "schema", "field": exc.field, "message": str(exc)}
    report = {"version": __version__, "scenario": raw, "digest": digest(raw),
              "subcommand": subcommand, "seed": eff_seed, "stages": stages,
              "environment": {"workers": worker_count(workers)}}
    code = EXIT_OK
    try:
        for st in stages:
            t0 = time.perf_counter()
            STAGE_METHODS[st](run)
            run.timings[st] = time.perf_counter() - t0
    except ScenarioError as exc:
        return EXIT_SCHEMA, {"error": "schema", "field": exc.field, "message": str(exc)}
    except NumericalError as exc:
        report["error"] = {"kind": type(exc).__name__, "message": str(exc),
                           "diagnostics": _plain(getattr(exc, "diagnostics", {}))}
        code = EXIT_NUMERICAL
    report.update(checks=run.checks, timings=run.timings, artifacts=run.artifacts)
    if code == EXIT_OK and not all(c["passed"] for c in run.checks):
        code = EXIT_CHECK
    report["exit_code"] = code
    report["passed"] = code == EXIT_OK
    atomic_write(out / REPORT, _json(_plain(report)))
    return code, report


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def replay(report_dir: str, workers: Optional[int] = None, seed: Optional[int] = None) -> tuple[int, list]:
    """Re-run the scenario embedded in a report and compare every artifact
    hash and every check.  Returns (exit code, list of divergences)."""
    rdir = Path(report_dir)
    try:
        old = json.loads((rdir / REPORT).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return EXIT_SCHEMA, [f"cannot read report: {exc}"]
    tmp = Path(tempfile.mkdtemp(prefix="ppde-replay-"))
    try:
        code, new = run_scenario("", old["subcommand"], str(tmp),
                                 seed=old["seed"] if seed is None else seed,
                                 workers=workers, raw=old["scenario"])
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    if code == EXIT_SCHEMA:
        return EXIT_SCHEMA, [new.get("message", "schema error")]
    diffs = []
    for name in sorted(set(old.get("artifacts", {})) | set(new.get("artifacts", {}))):
        a, b = old.get("artifacts", {}).get(name), new.get("artifacts", {}).get(name)
        if a != b:
            diffs.append(f"artifact {name} differs")
    if old.get("checks", []) != json.loads(_json(_plain(new.get("checks", [])))):
        diffs.append("summary values differ")
    if old.get("exit_code") != new.get("exit_code"):
        diffs.append("exit code differs")
    return (EXIT_CHECK if diffs else EXIT_OK), diffs
