import math

import numpy as np
import pytest

from conftest import const_path, ou_problem
from ppdelab import library
from ppdelab.paths import DiscretePath
from ppdelab.rng import BERNOULLI
from ppdelab.solver import MCConfig, SolverConfig, picard_solve
from ppdelab.viscosity import (EXACT, PRECONDITION, SUB, SUPER, VIOLATION, comparison_test,
                               critical_z, jet_probe, martingale_test, report_json,
                               solution_stability_test, verdict)

XT = library.terminal_linear(1, 1)
ZERO = library.nonlinearity_zero(1, 1)


@pytest.fixture(scope="module")
def solved():
    prob = ou_problem()
    F = library.nonlinearity_linear_y(1, 1, lam=0.5)
    cfg = SolverConfig(n_steps=16, n_train_paths=4096, init_spread=0.5, features=("value",))
    return prob, F, picard_solve(prob, F, XT, cfg)


def _probes(prob, n=3):
    grid = prob.grid(16)
    rng = np.random.default_rng(5)
    out = [(0.0, const_path(16, 1.0), 0.5), (0.0, const_path(16, 1.0), 1.0)]
    for _ in range(n):
        x = DiscretePath(grid, np.exp(-grid) + 0.2 * rng.normal(size=17).cumsum() / 4)
        out.append((0.5, x, 1.0))
    return out


def test_critical_z():
    assert critical_z(1) == pytest.approx(3.0, abs=1e-12)
    zs = [critical_z(n) for n in (1, 5, 20, 100)]
    assert all(a < b for a, b in zip(zs, zs[1:]))


def test_verdict_rules():
    assert verdict(SUB, 10.0, 3.0) and not verdict(SUB, -3.5, 3.0)
    assert verdict(SUPER, -10.0, 3.0) and not verdict(SUPER, 3.5, 3.0)
    assert verdict(EXACT, 2.9, 3.0) and not verdict(EXACT, -3.1, 3.0)
    with pytest.raises(ValueError):
        verdict("weird", 0.0, 3.0)


def test_solution_passes_every_mode(solved):
    prob, F, u = solved
    rep = martingale_test(u, prob, F, _probes(prob), EXACT, MCConfig(4096, 2))
    assert rep.passed
    for mode in (SUB, SUPER):
        assert rep.in_mode(mode).passed
    csv = rep.to_csv().splitlines()
    assert csv[0] == "t,s,drift,stderr,z,verdict" and len(csv) == 6
    assert '"n_fail": 0' in report_json(rep)


def test_shifted_solutions_are_strict_sub_and_super(solved):
    prob, F, u = solved
    probes, mc = _probes(prob), MCConfig(4096, 2)
    sub = martingale_test(u.shifted(-0.5), prob, F, probes, SUB, mc)
    sup = martingale_test(u.shifted(0.5), prob, F, probes, SUPER, mc)
    assert sub.passed and sup.passed
    assert sub.in_mode(EXACT).n_fail >= 1 and sup.in_mode(EXACT).n_fail >= 1
    assert not sub.in_mode(SUPER).passed and not sup.in_mode(SUB).passed


def test_sub_super_duality(solved):
    prob, F, u = solved
    probes, mc = _probes(prob), MCConfig(2048, 4)
    lo = u.shifted(-0.3)
    a = martingale_test(lo, prob, F, probes, SUB, mc)
    b = martingale_test(lo.negated(), prob, F.mirrored(), probes, SUPER, mc)
    assert [r.z for r in b.rows] == [-r.z for r in a.rows]
    assert [r.passed for r in a.rows] == [r.passed for r in b.rows]


def test_martingale_probe_validation(solved):
    prob, F, u = solved
    with pytest.raises(ValueError):
        martingale_test(u, prob, F, [(0.5, const_path(16, 1.0), 0.5)], EXACT, MCConfig(16, 1))
    with pytest.raises(ValueError):
        martingale_test(u, prob, F, [], "both", MCConfig(16, 1))


def _zero_solution():
    prob = ou_problem()
    zero = library.terminal_constant(1, 1, 0.0)
    return prob, picard_solve(prob, ZERO, zero, SolverConfig(n_steps=16, n_train_paths=64))


@pytest.mark.parametrize("noise", [BERNOULLI, "gaussian"])
def test_jets_of_zero_function(noise):
    # payoff -alpha s is maximized at once iff alpha >= 0 (sub), -(-alpha s) iff alpha <= 0 (super)
    prob, u = _zero_solution()
    x = const_path(16, 0.3)
    mc = MCConfig(2000, 1, noise)
    for alpha in (0.5, 2.0):
        r = jet_probe(u, prob, ZERO, 0.25, x, alpha, 1.0, mc, SUB)
        assert r.member and r.inequality_ok and r.inequality == -alpha
        assert not jet_probe(u, prob, ZERO, 0.25, x, -alpha, 1.0, mc, SUB).member
        s = jet_probe(u, prob, ZERO, 0.25, x, -alpha, 1.0, mc, SUPER)
        assert s.member and s.inequality_ok
        assert not jet_probe(u, prob, ZERO, 0.25, x, alpha, 1.0, mc, SUPER).member
    gap = jet_probe(u, prob, ZERO, 0.25, x, -1.0, 1.0, mc, SUB).gap
    assert gap == pytest.approx(0.75, abs=1e-12)


def test_jet_membership_monotone_in_alpha(solved):
    prob, F, u = solved
    x = const_path(16, 1.0)
    a_star = -0.5 * u.value(0.0, x)
    ladder = [a_star + d for d in (-2.0, -1.0, 0.0, 1.0, 2.0)]
    mc = MCConfig(4000, 3, BERNOULLI)
    sup = [jet_probe(u, prob, F, 0.0, x, a, 0.25, mc, SUPER).member for a in ladder]
    sub = [jet_probe(u, prob, F, 0.0, x, a, 0.25, mc, SUB).member for a in ladder]
    assert sup[0] and not sup[-1]
    assert sup == sorted(sup, reverse=True)
    assert sub[-1] and not sub[0]
    assert sub == sorted(sub)


@pytest.mark.parametrize("noise", [BERNOULLI, "gaussian"])
def test_boundary_slope_is_in_both_jets(solved, noise):
    prob, F, u = solved
    x = const_path(16, 1.0)
    a_star = -0.5 * u.value(0.0, x)
    mc = MCConfig(20000, 3, noise)
    for side in (SUB, SUPER):
        r = jet_probe(u, prob, F, 0.0, x, a_star, 1 / 16, mc, side, atol=0.01)
        assert r.member and r.inequality_ok
        assert abs(r.inequality) < 1e-12


def test_one_step_jet_matches_two_leaf_average(solved):
    prob, F, u = solved
    x = const_path(16, 1.0)
    dt = 1 / 16
    alpha = -0.4
    now = u.value(0.0, x)
    leaves = []
    for sgn in (-1.0, 1.0):
        vals = np.ones(17)
        vals[1:] = math.exp(-dt) * (1.0 + 0.5 * sgn * math.sqrt(dt))
        leaves.append(u.value(dt, DiscretePath(x.grid, vals)) - alpha * dt)
    cont = 0.5 * (leaves[0] + leaves[1])
    r = jet_probe(u, prob, F, 0.0, x, alpha, dt, MCConfig(1, 0, BERNOULLI), SUB)
    assert r.method == "exact-tree"
    assert r.gap == pytest.approx(max(now, cont) - now, abs=1e-12)


def test_comparison_examples(solved):
    prob, F, u = solved
    probes = _probes(prob)
    pts = [(t, x) for t, x, _ in probes]
    mc = MCConfig(4096, 6)
    ok = comparison_test(u.shifted(-0.5), u.shifted(0.5), prob, F, pts, probes, mc)
    assert ok.passed
    for (t, _), g in zip(pts, ok.gaps):
        assert g == pytest.approx(1.0 * (1 - t), abs=1e-12)
    same = comparison_test(u, u, prob, F, pts, probes, mc)
    assert same.passed and max(abs(g) for g in same.gaps) == 0.0
    wrong = comparison_test(u.shifted(0.5), u, prob, F, pts, probes, mc)
    assert wrong.status == PRECONDITION and "u1 as subsolution" in wrong.detail


def test_comparison_violation_reported(solved):
    # terminal values agree and both certificates hold, but interior values
    # are forced out of order by a tampered fit
    prob, F, u = solved
    probes = _probes(prob)
    pts = [(t, x) for t, x, _ in probes]
    lowered = u.shifted(-0.5)
    fits = list(lowered.fits)
    fits[0] = fits[0].shifted(5.0)
    from ppdelab.solver import ValueFunctional

    bad = ValueFunctional(u.grid, u.features, fits, u.terminal)
    rep = comparison_test(bad, u, prob, F, pts, [p for p in probes if p[0] > 0], MCConfig(4096, 6))
    assert rep.status == VIOLATION


def test_solution_stability_constant_family():
    prob = ou_problem()
    F = library.nonlinearity_constant(1, 1, 0.2)
    cfg = SolverConfig(n_steps=8, n_train_paths=512, init_spread=0.5, features=("value",))
    grid = prob.grid(8)
    probes = [(0.0, const_path(8, 1.0)), (0.5, DiscretePath(grid, np.linspace(1, 0.5, 9)))]
    flat = solution_stability_test([prob] * 3, [F] * 3, [XT] * 3, (prob, F, XT), probes, cfg)
    assert np.all(flat.deviations == 0.0)
    ns = [2, 4, 8, 16]
    curve = solution_stability_test([prob] * 4, [F.shifted(1 / n) for n in ns], [XT] * 4,
                                    (prob, F, XT), probes, cfg)
    expected = np.array([[(1 - t) / n for t, _ in probes] for n in ns])
    np.testing.assert_allclose(curve.differences, expected, atol=1e-10)
    assert curve.monotone


def test_solution_stability_under_mode_truncation():
    from ppdelab.sde import SdeProblem
    from ppdelab.spectral import SpectralModel

    full = SpectralModel.heat(4, gamma=0.25, lip_b=1.0, lip_sigma=1.0, horizon=1.0)
    xi = library.terminal_linear(4, 4, coef=[1.0, 1.0, 1.0, 1.0])
    F = library.nonlinearity_zero(4, 4)
    lim = SdeProblem(full, None, None, 0.0, np.ones(4))
    seq = [SdeProblem(full.truncated(n), None, None, 0.0, np.ones(4)) for n in (1, 2, 3)]
    cfg = SolverConfig(n_steps=8, n_train_paths=4, features=("value",))
    probes = [(0.0, DiscretePath.constant(lim.grid(8), np.ones(4)))]
    curve = solution_stability_test(seq, [F] * 3, [xi] * 3, (lim, F, xi), probes, cfg)
    k = np.arange(1, 5)
    expected = [np.sum(1 - np.exp(-k[n:] ** 2)) for n in (1, 2, 3)]
    np.testing.assert_allclose(curve.deviations, expected, rtol=1e-10)
    assert curve.monotone
