import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from helpers import prior_arrays, random_coupled_instance, vb_init
from tensorvb import Factor, PriorSpec, SolverConfig, SparseTensor, Termination, cp_model, fit, predict
from tensorvb.errors import InvalidConfig, InvalidPrior, NonFiniteUpdate, ShapeMismatch
from tensorvb.solvers import (elbo, em_step, gamma_kl, init_factors, init_vb_factor, kl_objective, map_em_step,
                              plugin_loglik, pltf_em_step, sweep, vb_step)
from tensorvb.synth import SynthSpec, generate_cp_data


def _planted(dims, R, seed, frac=1.0):
    """Noiseless CP data generated from the returned factors."""
    spec = cp_model(dict(zip("ijk", dims)), R)
    f = init_factors(spec, seed)
    dense = np.einsum("ir,jr,kr->ijk", *(f[n].values for n in spec.factor_names))
    M = np.random.default_rng(seed).random(dims) < frac
    M.flat[0] = True
    return spec, f, SparseTensor(("i", "j", "k"), dims, np.argwhere(M), dense[M])


def _empty(spec, obs="X"):
    o = spec.observation(obs)
    return SparseTensor(o.indices, spec.observation_shape(obs), np.zeros((0, len(o.indices)), int), [])


@pytest.mark.parametrize("kw", [dict(max_iters=0), dict(rel_tol=0.0), dict(epsilon_guard=-1.0),
                                dict(algorithm="gibbs"), dict(max_iters=2.5)])
def test_config_validation(kw):
    with pytest.raises(InvalidConfig):
        SolverConfig(**kw)


def test_config_algorithm_case_insensitive():
    assert SolverConfig(algorithm="VB").algorithm == "vb"


def test_em_fixed_point():
    spec, f, X = _planted((5, 4, 3), 2, 0)
    for a in spec.factor_names:
        np.testing.assert_allclose(em_step(spec, f, {"X": X}, a).values, f[a].values, rtol=1e-12)


def test_em_single_observation_matches_single_tensor_path():
    spec, _, X = _planted((5, 4, 3), 2, 1, frac=0.6)
    X = X.with_values(np.round(X.values * 3))
    f = init_factors(spec, 3)
    for a in spec.factor_names:
        assert np.array_equal(em_step(spec, f, {"X": X}, a).values, pltf_em_step(spec, f, X, a).values)


def test_em_trajectory_matches_reference():
    spec = cp_model(dict(i=5, j=4, k=3), 2)
    rng = np.random.default_rng(7)
    dense = rng.poisson(3.0, (5, 4, 3)).astype(float)
    M = rng.random((5, 4, 3)) >= 0.3
    X = SparseTensor(("i", "j", "k"), (5, 4, 3), np.argwhere(M), dense[M])
    f = init_factors(spec, 7)
    Z = {n: f[n].values for n in f}
    for _ in range(25):
        f = sweep(spec, f, {"X": X}, "em")
        Z = oracles.em_sweep(spec, Z, {"X": dense * M}, {"X": M})
    for n in Z:
        np.testing.assert_allclose(f[n].values, Z[n], rtol=1e-10)


def test_map_em_flat_prior_is_em():
    spec, obs, _, _ = random_coupled_instance(11)
    f = init_factors(spec, 11)
    flat = {n: PriorSpec(1.0, np.inf) for n in spec.factor_names}
    for a in spec.factor_names:
        assert np.array_equal(map_em_step(spec, f, obs, flat, a).values, em_step(spec, f, obs, a).values)


def test_map_em_empty_mask_gives_prior_mode():
    spec = cp_model(dict(i=3, j=2, k=2), 2)
    f = init_factors(spec, 0)
    out = map_em_step(spec, f, {"X": _empty(spec)}, {"Z1": PriorSpec(2.0, 3.0)}, "Z1")
    np.testing.assert_allclose(out.values, 1.5, rtol=1e-15)


def test_map_em_matches_reference():
    spec, obs, X, M = random_coupled_instance(12)
    priors = {n: PriorSpec(1.5, 4.0) for n in spec.factor_names}
    f = init_factors(spec, 12)
    Z = {n: f[n].values for n in f}
    arrays = {n: p.arrays(spec.factor_shape(n)) for n, p in priors.items()}
    for _ in range(15):
        f = sweep(spec, f, obs, "map-em", priors)
        Z = oracles.map_em_sweep(spec, Z, X, M, arrays)
    for n in Z:
        np.testing.assert_allclose(f[n].values, Z[n], rtol=1e-10)


def test_map_em_small_shape_warns_and_clamps():
    spec = cp_model(dict(i=3, j=2, k=2), 1)
    f = init_factors(spec, 0)
    with pytest.warns(RuntimeWarning, match="clamped"):
        out = map_em_step(spec, f, {"X": _empty(spec)}, {"Z1": PriorSpec(0.5, 3.0)}, "Z1")
    assert np.all(out.values == 0)


def test_vb_empty_mask_returns_prior():
    spec = cp_model(dict(i=3, j=2, k=2), 2, PriorSpec(0.5, 10.0))
    f = {n: init_vb_factor(v, PriorSpec(0.5, 10.0)) for n, v in init_factors(spec, 0).items()}
    out = vb_step(spec, f, {"X": _empty(spec)}, None, "Z2")
    np.testing.assert_allclose(out.C, 0.5)
    np.testing.assert_allclose(out.D, 20.0)
    np.testing.assert_allclose(out.E, 10.0)
    out.check()


def test_vb_coupled_matches_reference():
    spec, obs, X, M = random_coupled_instance(13)
    q = vb_init(spec, 13)
    Q = {n: {k: getattr(q[n], k) for k in "CDEL"} for n in q}
    for _ in range(25):
        q = sweep(spec, q, obs, "vb")
        Q = oracles.vb_sweep(spec, Q, X, M, prior_arrays(spec))
    for n in Q:
        for k in "CDEL":
            np.testing.assert_allclose(getattr(q[n], k), Q[n][k], rtol=1e-10)


def test_vb_needs_finite_prior_mean():
    spec, obs, _, _ = random_coupled_instance(14)
    q = vb_init(spec, 14)
    with pytest.raises(InvalidPrior):
        vb_step(spec, q, obs, {"A": PriorSpec(1.0, np.inf)}, "A")
    with pytest.raises(InvalidPrior):
        vb_step(spec, init_factors(spec, 0), obs, None, "A")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["em", "map-em", "vb"]))
def test_factors_stay_nonnegative(seed, algo):
    spec, obs, _, _ = random_coupled_instance(seed)
    priors = {n: PriorSpec(1.2, 5.0) for n in spec.factor_names} if algo == "map-em" else None
    r = fit(spec, obs, SolverConfig(algo, max_iters=10, seed=seed), priors)
    for f in r.factors.values():
        assert np.all(f.values >= 0)
        if algo == "vb":
            assert np.all(f.E > 0) and np.all(f.L > 0)
            f.check(rtol=1e-10)


def test_unobserved_fibre_is_frozen():
    spec = cp_model(dict(i=4, j=3, k=2), 2)
    rng = np.random.default_rng(0)
    dense = rng.poisson(4.0, (4, 3, 2)).astype(float)
    M = np.ones((4, 3, 2), bool)
    M[2] = False  # slice i=2 entirely missing
    X = SparseTensor(("i", "j", "k"), (4, 3, 2), np.argwhere(M), dense[M])
    f = init_factors(spec, 0)
    out = em_step(spec, f, {"X": X}, "Z1")
    assert np.array_equal(out.values[2], f["Z1"].values[2])
    assert np.all(np.isfinite(out.values))


def test_non_finite_update():
    # two huge counts in one fibre overflow the numerator sum
    spec = cp_model(dict(i=1, j=2, k=1), 1)
    X = SparseTensor(("i", "j", "k"), (1, 2, 1), [[0, 0, 0], [0, 1, 0]], [1e308, 1e308])
    f = {n: v.replace(values=np.ones(v.shape)) for n, v in init_factors(spec, 0).items()}
    with np.errstate(over="ignore"), pytest.raises(NonFiniteUpdate):
        em_step(spec, f, {"X": X}, "Z1")


def test_fit_deterministic_and_trace_length():
    spec, obs, _, _ = random_coupled_instance(20)
    for algo in ("em", "map-em", "vb"):
        cfg = SolverConfig(algo, max_iters=15, rel_tol=1e-300, seed=4)
        pri = {n: PriorSpec(2.0, 5.0) for n in spec.factor_names} if algo == "map-em" else None
        a, b = fit(spec, obs, cfg, pri), fit(spec, obs, cfg, pri)
        assert a.objective_trace == b.objective_trace
        assert len(a.objective_trace) == a.iterations_run == len(a.wall_time) == 15
        assert a.termination is Termination.MAX_ITERS
        for n in spec.factor_names:
            assert np.array_equal(a.factors[n].values, b.factors[n].values)


def test_fit_converges_and_reports():
    spec, obs, _, _ = random_coupled_instance(21)
    r = fit(spec, obs, SolverConfig("em", max_iters=500, rel_tol=1e-4))
    assert r.termination is Termination.CONVERGED and r.iterations_run < 500
    r = fit(spec, obs, SolverConfig("em", max_iters=5, trace_objective=False))
    assert r.objective_trace == [] and r.iterations_run == 5


def test_fit_callback():
    spec, obs, _, _ = random_coupled_instance(22)
    seen = []
    fit(spec, obs, SolverConfig("vb", max_iters=4, rel_tol=1e-300), callback=lambda it, f: seen.append(it))
    assert seen == [1, 2, 3, 4]


def test_fit_rejects_wrong_data():
    spec, obs, _, _ = random_coupled_instance(23)
    with pytest.raises(ShapeMismatch):
        fit(spec, {"X1": obs["X1"]}, SolverConfig())
    with pytest.raises(ShapeMismatch):
        fit(spec, {"X1": obs["X2"], "X2": obs["X2"]}, SolverConfig())


@pytest.mark.parametrize("seed", range(5))
def test_em_noiseless_objective_collapses(seed):
    # rank-1 planted data; higher ranks converge too slowly to hit 1e-8 within 200 sweeps
    s = SynthSpec((6, 5, 4), 1, seed=seed)
    X, _ = generate_cp_data(s)
    spec = cp_model(dict(i=6, j=5, k=4), 1)
    r = fit(spec, {"X": X}, SolverConfig("em", max_iters=200, rel_tol=1e-300, seed=seed))
    assert r.objective_trace[-1] < 1e-8 * r.initial_objective


def test_kl_examples():
    spec = cp_model(dict(i=1, j=1, k=1), 1)
    one = {n: Factor(n, ("i" if n == "Z1" else "j" if n == "Z2" else "k", "r"), [[1.0]]) for n in spec.factor_names}
    X = SparseTensor(("i", "j", "k"), (1, 1, 1), [[0, 0, 0]], [2.0])
    assert kl_objective(spec, one, {"X": X}) == pytest.approx(2 * np.log(2) - 1, abs=1e-15)
    assert kl_objective(spec, one, {"X": X.with_values([1.0])}) == 0.0
    zero = X.with_values([0.0])
    assert kl_objective(spec, one, {"X": zero}) == pytest.approx(1.0)


def test_kl_zero_at_exact_fit_and_additive():
    spec, f, X = _planted((4, 3, 2), 2, 5, frac=0.7)
    assert kl_objective(spec, f, {"X": X}) < 1e-12
    cspec, obs, _, _ = random_coupled_instance(24)
    g = init_factors(cspec, 0)
    total = kl_objective(cspec, g, obs)
    parts = 0.0
    for o in cspec.observations:
        names = [n for n in o.factors]
        sub = type(cspec)(cspec.space, tuple(cspec.factor(n) for n in names), (o,))
        parts += kl_objective(sub, {n: g[n] for n in names}, {o.name: obs[o.name]})
    assert total == pytest.approx(parts, rel=1e-13)


def test_elbo_zero_at_prior_with_empty_mask():
    spec = cp_model(dict(i=3, j=2, k=2), 2, PriorSpec(0.5, 10.0))
    q = {}
    for n in spec.factor_names:
        shape = spec.factor_shape(n)
        C, D = np.full(shape, 0.5), np.full(shape, 20.0)
        from tensorvb.special import digamma
        q[n] = Factor(n, spec.factor(n).indices, C * D, C=C, D=D, E=C * D, L=np.exp(digamma(C)) * D)
    assert elbo(spec, q, {"X": _empty(spec)}) == 0.0


def test_gamma_kl_properties():
    rng = np.random.default_rng(0)
    C, D, A, T = (rng.gamma(2.0, 1.0, 50) for _ in range(4))
    assert np.all(gamma_kl(C, D, A, T) >= -1e-12)
    np.testing.assert_allclose(gamma_kl(A, T, A, T), 0.0, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_one_vb_sweep_does_not_lower_elbo(seed):
    spec, obs, _, _ = random_coupled_instance(seed, size="medium")
    q = vb_init(spec, seed)
    before = elbo(spec, q, obs)
    after = elbo(spec, sweep(spec, q, obs, "vb"), obs)
    assert after >= before - 1e-9 * abs(before)


def test_elbo_below_plugin_loglik_on_exact_fit():
    for seed in range(5):
        spec, f, X = _planted((5, 4, 3), 2, seed)
        q = {n: init_vb_factor(v, PriorSpec(0.5, 10.0)) for n, v in f.items()}
        for _ in range(30):
            q = sweep(spec, q, {"X": X}, "vb")
        assert elbo(spec, q, {"X": X}) <= plugin_loglik(spec, q, {"X": X}, "E")


def test_vb_prunes_surplus_components():
    for seed in range(3):
        s = SynthSpec((20, 20, 20), 1, observed_fraction=0.5, seed=seed)
        X, _ = generate_cp_data(s)
        spec = cp_model(dict(i=20, j=20, k=20), 5, PriorSpec(0.5, 10.0))
        r = fit(spec, {"X": X}, SolverConfig("vb", max_iters=300, rel_tol=1e-9, seed=seed))
        norms = np.ones(5)
        for n in spec.factor_names:
            norms *= np.linalg.norm(r.factors[n].E, axis=0)
        assert np.sum(norms < 0.05 * norms.max()) >= 3


def test_predict_uses_posterior_mean_for_vb():
    spec, obs, _, _ = random_coupled_instance(25)
    r = fit(spec, obs, SolverConfig("vb", max_iters=5))
    p = predict(spec, r, "X1", obs["X1"])
    q = predict(spec, r.factors, "X1", obs["X1"], view="E")
    assert np.array_equal(p.values, q.values)
