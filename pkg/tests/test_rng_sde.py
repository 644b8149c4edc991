import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2

from conftest import diag, ou_model, ou_problem
from ppdelab import library
from ppdelab.errors import SimulationError
from ppdelab.paths import DiscretePath
from ppdelab.rng import BERNOULLI, NoiseStream, derive_seed, normals, uniforms
from ppdelab.sde import (ControlledSdeProblem, SdeProblem, ensemble_bytes, ensemble_from_bytes,
                         ensemble_simulate, flow_check, sde_stability_check, simulate_batch,
                         simulate_controlled, simulate_mild, simulate_terminal)
from ppdelab.spectral import SpectralModel


def test_uniforms_open_interval_and_keyed():
    u = uniforms(5, np.arange(100000), 3, 0)
    assert u.min() > 0.0 and u.max() < 1.0
    np.testing.assert_array_equal(u, uniforms(5, np.arange(100000), 3, 0))
    assert not np.array_equal(u, uniforms(6, np.arange(100000), 3, 0))
    assert not np.array_equal(u, uniforms(5, np.arange(100000), 4, 0))


def test_normal_moments():
    z = normals(11, np.arange(200000), 0, 0)
    se = 1 / math.sqrt(len(z))
    assert abs(z.mean()) < 5 * se
    assert abs(z.var() - 1) < 5 * math.sqrt(2) * se


def test_increments_do_not_depend_on_batching():
    s = NoiseStream(3, 2)
    full = s.increments(np.arange(10), 4, 0.01)
    parts = np.vstack([s.increments(np.arange(0, 4), 4, 0.01), s.increments(np.arange(4, 10), 4, 0.01)])
    np.testing.assert_array_equal(full, parts)
    np.testing.assert_array_equal(full[7], s.increments([7], 4, 0.01)[0])


def test_derive_seed_distinct():
    seeds = {derive_seed(1, k) for k in range(1000)} | {derive_seed(2, k) for k in range(1000)}
    assert len(seeds) == 2000
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)


def test_bernoulli_values_and_frequencies():
    dt = 0.04
    s = NoiseStream(9, 2, BERNOULLI)
    inc = s.increments(np.arange(40000), 0, dt)
    assert set(np.unique(inc)) == {-0.2, 0.2}
    # joint sign pattern over the two modes: four equally likely cells
    cells = (inc[:, 0] > 0).astype(int) * 2 + (inc[:, 1] > 0)
    counts = np.bincount(cells, minlength=4)
    stat = np.sum((counts - 10000) ** 2 / 10000)
    assert stat < chi2.isf(0.01, 3)


def test_bernoulli_paths_match_enumeration():
    # m steps, one mode: at most 2^m distinct paths, each with probability 2^-m
    m = 3
    prob = SdeProblem(ou_model(), None, diag(0.5), 0.0, 0.3)
    ens = ensemble_simulate(prob, 16000, m, seed=4, noise=BERNOULLI)
    keys = [tuple(np.round(v[:, 0], 12)) for v in ens.values]
    uniq, counts = np.unique(np.array(keys), axis=0, return_counts=True)
    assert len(uniq) <= 2**m
    grid = prob.grid(m)
    dt = grid[1]
    leaves = set()
    for signs in itertools.product((-1.0, 1.0), repeat=m):
        x = [0.3]
        for sgn in signs:
            x.append(math.exp(-dt) * (x[-1] + 0.5 * sgn * math.sqrt(dt)))
        leaves.add(tuple(np.round(x, 12)))
    assert {tuple(u) for u in uniq} == leaves
    stat = np.sum((counts - 2000) ** 2 / 2000)
    assert stat < chi2.isf(0.01, 2**m - 1)


def test_constant_path_without_dynamics():
    prob = SdeProblem(SpectralModel(2, 2, np.zeros(2), 0.0, 1.0, 1.0, 1.0), None, None, 0.0, [1.5, -2.0])
    x = simulate_mild(prob, 10, NoiseStream(0, 2))
    np.testing.assert_array_equal(x.values, np.tile([1.5, -2.0], (11, 1)))


def test_pure_semigroup_flow_is_exact():
    prob = ou_problem(sigma=0.0)
    x = simulate_mild(prob, 16, NoiseStream(0, 1))
    np.testing.assert_allclose(x.values[:, 0], np.exp(-x.grid), rtol=1e-14)
    assert round(float(x.values[-1, 0]), 5) == 0.36788


def test_constant_drift_is_exact():
    prob = SdeProblem(SpectralModel(1, 1, np.zeros(1), 0.0, 1.0, 1.0, 2.0),
                      lambda t, v: np.array([0.75]), None, 0.0, 1.0)
    x = simulate_mild(prob, 8, NoiseStream(0, 1))
    np.testing.assert_allclose(x.values[:, 0], 1.0 + 0.75 * x.grid, rtol=1e-14)


def _bang_bang():
    m = SpectralModel(1, 1, np.zeros(1), 0.0, 1.0, 1.0, 1.0)
    drift = library.cdrift_action_direction(1, 1)
    return ControlledSdeProblem(m, (-1.0, 1.0), drift, None, 0.0, 0.5)


def test_controlled_constant_and_switching_policies():
    from ppdelab.control import ControlPolicy

    cp = _bang_bang()
    up = simulate_controlled(cp, ControlPolicy.constant(1, 4), 4, NoiseStream(0, 1))
    assert up.values[-1, 0] == 1.5
    switch = simulate_controlled(cp, ControlPolicy.open_loop([1, 1, 0, 0]), 4, NoiseStream(0, 1))
    assert switch.values[-1, 0] == 0.5


def test_single_action_matches_uncontrolled():
    from ppdelab.control import ControlPolicy

    m = ou_model()
    sig = np.array([[0.5]])
    cp = ControlledSdeProblem(m, (0.0,), lambda t, v, a: -0.3 * v.current,
                              lambda t, v, a: sig, 0.0, 1.0)
    stream = NoiseStream(12, 1)
    a = simulate_controlled(cp, ControlPolicy.constant(0, 16), 16, stream, path_index=3)
    b = simulate_mild(cp.fixed(0), 16, stream, path_index=3)
    np.testing.assert_array_equal(a.values, b.values)


def test_workers_do_not_change_the_ensemble():
    from ppdelab.sde import CHUNK

    prob = ou_problem(drift=library.drift_running_sup(1, 1, k=0.2))
    n = CHUNK + 37
    one = ensemble_simulate(prob, n, 8, seed=5, workers=1)
    four = ensemble_simulate(prob, n, 8, seed=5, workers=4)
    assert ensemble_bytes(one) == ensemble_bytes(four)
    np.testing.assert_array_equal(simulate_terminal(prob, n, 8, 5, workers=4), one.values[:, -1])


def test_member_regenerates_from_its_key():
    prob = ou_problem()
    ens = ensemble_simulate(prob, 50, 16, seed=8)
    alone = simulate_mild(prob, 16, NoiseStream(8, 1), path_index=42)
    np.testing.assert_array_equal(alone.values, ens.values[42])


def test_ensemble_roundtrip():
    prob = SdeProblem(SpectralModel.heat(3, 2, gamma=0.25, lip_b=1.0, lip_sigma=1.0, horizon=0.5),
                      None, diag(0.3, 3, 2), 0.0, [1.0, 0.0, -1.0])
    ens = ensemble_simulate(prob, 7, 5, seed=2)
    data = ensemble_bytes(ens)
    assert data[:4] == b"PPDE"
    back = ensemble_from_bytes(data)
    np.testing.assert_array_equal(back.values, ens.values)
    np.testing.assert_array_equal(back.grid, ens.grid)
    assert back.seed == 2
    with pytest.raises(ValueError):
        ensemble_from_bytes(b"XXXX" + data[4:])


def test_deterministic_ensemble_paths_identical():
    ens = ensemble_simulate(ou_problem(sigma=0.0), 5, 8, seed=1)
    assert np.all(ens.values == ens.values[0])


def test_sup_moment_consistent_with_larger_run():
    prob = ou_problem()
    small = ensemble_simulate(prob, 2000, 32, seed=1)
    big = ensemble_simulate(prob, 20000, 32, seed=2)
    (m1, s1), (m2, s2) = small.sup_moment(2.0), big.sup_moment(2.0)
    assert abs(m1 - m2) <= 3 * math.hypot(s1, s2)


def test_sup_moment_affine_in_initial_condition():
    base = ensemble_simulate(ou_problem(z=1.0), 4000, 32, seed=1).sup_moment(1.0)[0]
    double = ensemble_simulate(ou_problem(z=2.0), 4000, 32, seed=1).sup_moment(1.0)[0]
    # common noise: E sup|X^{2z}| <= 2 E sup|X^z| + E sup|noise part|, and grows
    assert base < double <= 2 * base + 1e-12


def test_lipschitz_in_initial_condition():
    # common noise and additive dynamics: the deviation is deterministic
    ratios = []
    for n in (16, 64):
        a = ensemble_simulate(ou_problem(z=1.0), 200, n, seed=3).values
        b = ensemble_simulate(ou_problem(z=1.3), 200, n, seed=3).values
        ratios.append(np.mean(np.max(np.abs(a - b)[..., 0], axis=1)) / 0.3)
    assert all(r <= 1.0 + 1e-12 for r in ratios)
    assert abs(ratios[0] - ratios[1]) < 1e-12


def test_nonfinite_state_raises():
    prob = SdeProblem(ou_model(), lambda t, v: np.full((v.batch, 1), np.inf), None, 0.0, 1.0)
    with pytest.raises(SimulationError, match="non-finite"):
        simulate_batch(prob, 4, NoiseStream(0, 1), [0, 1])


def test_bad_coefficient_shape_raises():
    prob = SdeProblem(ou_model(), lambda t, v: np.zeros((3, 3)), None, 0.0, 1.0)
    with pytest.raises(SimulationError, match="shape"):
        simulate_batch(prob, 4, NoiseStream(0, 1), [0, 1])


def _random_problem(k):
    rng = np.random.default_rng(k)
    dim = int(rng.integers(1, 4))
    model = SpectralModel.heat(dim, gamma=0.25, lip_b=1.0, lip_sigma=1.0, horizon=1.0,
                               scale=float(rng.uniform(0, 2)))
    kinds = [library.drift_zero(dim, dim), library.drift_constant(dim, dim, float(rng.normal())),
             library.drift_affine_endpoint(dim, dim, a=float(rng.normal()), c=0.1),
             library.drift_running_integral(dim, dim, k=float(rng.normal())),
             library.drift_running_sup(dim, dim, k=float(rng.normal()))]
    drift = kinds[k % len(kinds)]
    return SdeProblem(model, drift, diag(float(rng.uniform(0.1, 1)), dim, dim), 0.0,
                      rng.normal(size=dim))


@settings(max_examples=30, deadline=None)
@given(k=st.integers(0, 9), j=st.integers(0, 16))
def test_flow_identity_property(k, j):
    prob = _random_problem(k)
    s = float(prob.grid(16)[j])
    assert flow_check(prob, s, 16, NoiseStream(k, prob.model.dim_k), 4) == 0.0


def test_flow_identity_bernoulli():
    prob = ou_problem(drift=library.drift_running_sup(1, 1))
    assert flow_check(prob, 0.5, 8, NoiseStream(1, 1, BERNOULLI)) == 0.0


def test_sde_stability_examples():
    m = SpectralModel(1, 1, np.zeros(1), 0.0, 1.0, 1.0, 1.0)
    lim = SdeProblem(m, lambda t, v: np.array([0.2]), None, 0.0, 0.0)
    assert np.all(sde_stability_check([lim, lim], lim, 8, seed=0, n_paths=4) == 0.0)
    seq = [SdeProblem(m, lambda t, v, n=n: np.array([0.2 + 1.0 / n]), None, 0.0, 0.0)
           for n in (1, 2, 4, 8)]
    errs = sde_stability_check(seq, lim, 8, seed=0, n_paths=4)
    np.testing.assert_allclose(errs, [1.0, 0.5, 0.25, 0.125], rtol=1e-12)


def test_sde_stability_under_mode_truncation():
    full = SpectralModel.heat(6, gamma=0.25, lip_b=1.0, lip_sigma=1.0, horizon=1.0)
    init = np.ones(6)
    sig = diag(0.3, 6, 6)
    lim = SdeProblem(full, None, sig, 0.0, init)
    seq = [SdeProblem(full.truncated(n), None, sig, 0.0, init) for n in (1, 2, 4)]
    errs = sde_stability_check(seq, lim, 32, seed=1, n_paths=64)
    assert np.all(np.diff(errs) < 0)


def test_initial_path_segment_is_kept():
    grid = ou_problem().grid(8)
    hist = DiscretePath(grid, np.linspace(0, 1, 9))
    prob = ou_problem().with_init(0.5, hist)
    vals = simulate_batch(prob, 8, NoiseStream(0, 1), [0, 1])
    np.testing.assert_array_equal(vals[:, :5, 0], np.tile(hist.values[:5, 0], (2, 1)))


def test_library_coefficients_are_non_anticipative():
    from ppdelab.paths import assert_non_anticipative, make_grid

    grid = make_grid(1.0, 8)
    rng = np.random.default_rng(3)
    probes = []
    for j in (0, 4, 7):
        d = np.zeros((9, 2))
        d[j + 1:] = rng.normal(size=(8 - j, 2))
        probes.append((float(grid[j]), DiscretePath(grid, rng.normal(size=(9, 2))), d))
    for fn in (library.drift_affine_endpoint(2, 2, a=0.5), library.drift_running_integral(2, 2),
               library.drift_running_sup(2, 2), library.terminal_integral(2, 2),
               library.terminal_sup(2, 2), library.terminal_linear(2, 2)):
        assert assert_non_anticipative(fn, probes).ok
