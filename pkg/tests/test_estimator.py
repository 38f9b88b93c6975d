import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, cvx_batch_objective, penalty_direct, random_symmetric, small_scene
from stgraph.estimator import (
    ConfigError,
    EstimatorConfig,
    EstimatorState,
    NumericalError,
    _Clamp,
    _objective_sym,
    _run,
    batch_solve,
    effective_step,
    grad_p,
    grad_s,
    initial_state,
    l1_norm,
    l21_norm,
    objective,
    online_step,
    penalty_g,
    prox_p,
    prox_s,
    read_checkpoint,
    residual,
    step_size,
    write_checkpoint,
)
from stgraph.graph import KnownEdgeSet, generate_er
from stgraph.signals import StreamingCovariance, polynomial_covariance, random_filter, warm_start

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def square(n):
    return arrays(np.float64, (n, n), elements=finite)


# --- penalty and gradients -------------------------------------------------

def test_penalty_identity_covariance():
    rng = np.random.default_rng(0)
    s = random_symmetric(rng, 4)
    assert penalty_g(np.eye(4), s, np.zeros((4, 4)), 3.0) == 0.0


def test_penalty_symmetric_p_commuting_s():
    rng = np.random.default_rng(1)
    c = np.diag([1.0, 2.0, 3.0])
    s = np.diag([0.0, 0.0, 0.0]) + 0.0
    p = random_symmetric(rng, 3)
    assert penalty_g(c, s, p, 1.0) == 0.0


def test_penalty_hand_example():
    c = np.diag([1.0, 2.0])
    s = np.array([[0.0, 1.0], [1.0, 0.0]])
    r = residual(c, s, np.zeros((2, 2)))
    assert np.array_equal(r, [[0.0, -1.0], [1.0, 0.0]])
    assert penalty_g(c, s, np.zeros((2, 2)), 2.0) == 2.0


def test_grad_p_hand_example():
    c = np.diag([1.0, 2.0])
    s = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(grad_p(c, s, np.zeros((2, 2)), 1.0), 2 * np.array([[0.0, -1.0], [1.0, 0.0]]))


def test_gradients_vanish_with_zero_residual():
    c = np.eye(3)
    s = random_symmetric(np.random.default_rng(2), 3)
    p = np.zeros((3, 3))
    assert not grad_s(c, s, p, 1.0).any()
    assert not grad_p(c, s, p, 1.0).any()


def test_grad_s_linear_in_mu():
    rng = np.random.default_rng(3)
    c, s, p = random_symmetric(rng, 5, True), random_symmetric(rng, 5), rng.standard_normal((5, 5))
    assert np.array_equal(grad_s(c, s, p, 2.0), 2.0 * grad_s(c, s, p, 1.0))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        penalty_g(np.eye(3), np.eye(2), np.eye(3), 1.0)


def test_penalty_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for n in (3, 5, 8):
        c, s, p = random_symmetric(rng, n, True), rng.standard_normal((n, n)), rng.standard_normal((n, n))
        assert math.isclose(penalty_g(c, s, p, 0.7), penalty_direct(c, s, p, 0.7), rel_tol=1e-12)


@pytest.mark.parametrize("n", [3, 5, 8])
def test_gradients_match_finite_differences(n):
    rng = np.random.default_rng(n)
    for _ in range(20):
        c = random_symmetric(rng, n, psd=True)
        s = random_symmetric(rng, n)
        p = rng.standard_normal((n, n))
        mu = float(rng.uniform(0.1, 3.0))
        fd_s = central_difference(lambda x: penalty_direct(c, x, p, mu), s)
        fd_p = central_difference(lambda x: penalty_direct(c, s, x, mu), p)
        gs, gp = grad_s(c, s, p, mu), grad_p(c, s, p, mu)
        assert np.linalg.norm(gs - fd_s) <= 1e-5 * np.linalg.norm(fd_s)
        assert np.linalg.norm(gp - fd_p) <= 1e-5 * np.linalg.norm(fd_p)


def test_grad_p_needs_symmetric_s():
    # the 2 mu R form is the exact derivative only for symmetric S
    rng = np.random.default_rng(9)
    c, s, p = random_symmetric(rng, 4, True), rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    r = residual(c, s, p)
    fd = central_difference(lambda x: penalty_g(c, s, x, 1.0), p)
    assert np.allclose(fd, r - r.T, atol=1e-6)
    assert not np.allclose(grad_p(c, s, p, 1.0), fd, atol=1e-3)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 7), seed=st.integers(0, 10**6))
def test_grad_s_symmetric_for_symmetric_inputs(n, seed):
    rng = np.random.default_rng(seed)
    c, s = random_symmetric(rng, n, True), random_symmetric(rng, n)
    p = rng.standard_normal((n, n))
    g = grad_s(c, s, p, 1.3)
    assert np.abs(g - g.T).max() <= 1e-12 * max(1.0, np.abs(g).max())


# --- proximal maps ---------------------------------------------------------

def test_prox_s_examples():
    assert not prox_s(np.zeros((3, 3)), 0.2).any()
    q = np.zeros((3, 3))
    q[0, 1] = q[1, 0] = 0.5
    q[1, 2] = q[2, 1] = 0.1
    out = prox_s(q, 0.2)
    assert math.isclose(out[0, 1], 0.3) and out[1, 2] == 0.0
    clamp = KnownEdgeSet.from_pairs({(0, 1): 1.0})
    out = prox_s(np.random.default_rng(0).standard_normal((3, 3)), 0.2, clamp)
    assert out[0, 1] == out[1, 0] == 1.0


def test_prox_s_errors():
    with pytest.raises(ValueError):
        prox_s(np.zeros((2, 2)), 0.0)
    with pytest.raises(ConfigError):
        prox_s(np.zeros((2, 2)), 0.1, KnownEdgeSet.from_pairs({(0, 5): 1.0}))


@settings(max_examples=500, deadline=None)
@given(n=st.integers(2, 8), data=st.data(), gamma=st.floats(1e-6, 5.0))
def test_prox_s_feasibility_closure(n, data, gamma):
    q = data.draw(square(n))
    pairs = data.draw(st.dictionaries(
        st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)).filter(lambda ij: ij[0] < ij[1]),
        st.floats(0, 3), max_size=4))
    known = KnownEdgeSet.from_pairs(pairs)
    out = prox_s(q, gamma, known)
    assert np.array_equal(out, out.T)
    assert (out >= 0).all()
    assert not np.diag(out).any()
    for (i, j), v in pairs.items():
        assert out[i, j] == v


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 7), data=st.data(), gamma=st.floats(1e-3, 2.0))
def test_prox_s_nonexpansive(n, data, gamma):
    a, b = data.draw(square(n)), data.draw(square(n))
    a, b = (a + a.T) / 2, (b + b.T) / 2
    d = np.linalg.norm(prox_s(a, gamma) - prox_s(b, gamma))
    assert d <= np.linalg.norm(a - b) * (1 + 1e-12) + 1e-12


def test_prox_p_examples():
    q = np.zeros((2, 2))
    q[:, 0] = [0.0, 2.0]
    q[:, 1] = [0.3, 0.0]
    out = prox_p(q, 0.5)
    assert np.allclose(out[:, 0], [0.0, 1.5])
    assert not out[:, 1].any()
    assert not prox_p(np.zeros((3, 3)), 0.5).any()


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 7), data=st.data(), tau=st.floats(0.0, 5.0))
def test_prox_p_column_shrinkage_exact(n, data, tau):
    q = data.draw(square(n))
    out = prox_p(q, tau)
    for j in range(n):
        nrm = math.sqrt(sum(float(x) ** 2 for x in q[:, j]))
        want = q[:, j] * max(0.0, 1 - tau / nrm) if nrm > 0 else np.zeros(n)
        assert np.allclose(out[:, j], want, rtol=1e-12, atol=1e-300)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 6), data=st.data(), tau=st.floats(1e-3, 3.0))
def test_prox_p_nonexpansive(n, data, tau):
    a, b = data.draw(square(n)), data.draw(square(n))
    assert np.linalg.norm(prox_p(a, tau) - prox_p(b, tau)) <= np.linalg.norm(a - b) * (1 + 1e-12) + 1e-12


# --- step size and configuration -------------------------------------------

def test_step_size_examples():
    assert math.isclose(step_size(1.0, 0.5, 0.95), 0.95)
    assert math.isfinite(step_size(0.0, 0.5))


@settings(max_examples=200, deadline=None)
@given(sigma=st.floats(0, 1e6), mu=st.floats(1e-6, 1e6), kappa=st.floats(0.01, 0.99))
def test_step_validity(sigma, mu, kappa):
    cfg = EstimatorConfig(mu=mu, step_safety=kappa)
    for g in (step_size(sigma, mu, kappa), effective_step(sigma, cfg)):
        assert g * 2 * mu * sigma ** 2 < 1
        assert effective_step(sigma, cfg) <= step_size(sigma, mu, kappa)


@pytest.mark.parametrize("kw", [dict(mu=0), dict(rho=-1), dict(step_safety=1.0), dict(inner_iters=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        EstimatorConfig(**kw)


# --- objective ---------------------------------------------------------------

def test_objective_examples():
    c = np.random.default_rng(0).standard_normal((4, 4))
    assert objective(np.zeros((4, 4)), np.zeros((4, 4)), c @ c.T, 1.0, 1.0) == 0.0
    s = np.zeros((3, 3))
    s[0, 1] = s[1, 0] = 0.5
    assert objective(s, np.zeros((3, 3)), np.eye(3), 1.0, 1.0) == 1.0


def test_objective_termwise():
    rng = np.random.default_rng(7)
    c, s, p = random_symmetric(rng, 5, True), np.abs(random_symmetric(rng, 5)), rng.standard_normal((5, 5))
    l1 = sum(abs(float(x)) for x in s.ravel())
    l21 = sum(math.sqrt(sum(float(x) ** 2 for x in p[:, j])) for j in range(5))
    want = l1 + 0.3 * l21 + penalty_direct(c, s, p, 2.0)
    assert math.isclose(objective(s, p, c, 2.0, 0.3), want, rel_tol=1e-12)
    assert math.isclose(l1_norm(s), l1) and math.isclose(l21_norm(p), l21)
    s = (s + s.T) / 2
    assert math.isclose(_objective_sym(c, s, p, 2.0, 0.3), objective(s, p, c, 2.0, 0.3), rel_tol=1e-12)


# --- online step -------------------------------------------------------------

def _composed_pass(c, s, p, gamma, cfg):
    """One pass assembled from the public operators."""
    s1 = prox_s(s - gamma * grad_s(c, s, p, cfg.mu), gamma, cfg.known_edges)
    if not cfg.hidden_aware:
        return s1, p
    p1 = prox_p(p - gamma * grad_p(c, s1, p, cfg.mu), gamma * cfg.rho)
    return s1, p1


@pytest.mark.parametrize("hidden_aware", [True, False])
def test_fused_kernel_matches_public_operators(hidden_aware):
    rng = np.random.default_rng(11)
    for seed in range(10):
        c, _, known = small_scene(seed)
        cfg = EstimatorConfig(mu=50.0, rho=2.0, known_edges=known, hidden_aware=hidden_aware)
        o = c.shape[0]
        s = prox_s(np.abs(random_symmetric(rng, o)), 1e-9, known)
        p = rng.standard_normal((o, o)) * 0.1 if hidden_aware else np.zeros((o, o))
        gamma = effective_step(np.linalg.norm(c, 2), cfg)
        want_s, want_p = s, p
        for _ in range(3):
            want_s, want_p = _composed_pass(c, want_s, want_p, gamma, cfg)
        got_s, got_p = _run(c, s, p, gamma, cfg, _Clamp(known, o), 3)
        assert np.allclose(got_s, want_s, rtol=1e-10, atol=1e-12)
        assert np.allclose(got_p, want_p, rtol=1e-10, atol=1e-12)


def _stream(c, t, seed):
    x = np.linalg.cholesky(c + 1e-12 * np.eye(len(c))) @ np.random.default_rng(seed).standard_normal((len(c), t))
    sc = StreamingCovariance(len(c))
    for k in range(t):
        yield sc.update(x[:, k])


def test_inner_iters_equal_repeated_frozen_steps():
    c, _, known = small_scene(3)
    cfg3 = EstimatorConfig(mu=20.0, rho=1.0, known_edges=known, inner_iters=3)
    cfg1 = cfg3.with_(inner_iters=1)
    sc = warm_start(c, 10)
    st3 = online_step(initial_state(len(c), cfg3), sc, cfg3)
    st1 = initial_state(len(c), cfg1)
    for _ in range(3):
        st1 = online_step(st1, sc, cfg1)
    assert np.array_equal(st3.s_hat, st1.s_hat) and np.array_equal(st3.p_hat, st1.p_hat)


def test_online_step_descends():
    for seed in range(10):
        c, _, known = small_scene(seed)
        cfg = EstimatorConfig(mu=100.0, rho=5.0, known_edges=known)
        state = initial_state(len(c), cfg)
        for sc in _stream(c, 30, seed):
            before = objective(state.s_hat, state.p_hat, sc.c_hat, cfg.mu, cfg.rho)
            new = online_step(state, sc, cfg)
            after = objective(new.s_hat, new.p_hat, sc.c_hat, cfg.mu, cfg.rho)
            assert after <= before + 1e-12 * max(1.0, before)
            state = new
        # the last step moved and strictly decreased
        new = online_step(state, sc, cfg)
        if not (np.array_equal(new.s_hat, state.s_hat) and np.array_equal(new.p_hat, state.p_hat)):
            assert (objective(new.s_hat, new.p_hat, sc.c_hat, cfg.mu, cfg.rho)
                    < objective(state.s_hat, state.p_hat, sc.c_hat, cfg.mu, cfg.rho))


@pytest.mark.parametrize("hidden_aware", [True, False])
def test_online_invariants_along_stream(hidden_aware):
    c, _, known = small_scene(5)
    cfg = EstimatorConfig(mu=100.0, rho=5.0, known_edges=known, inner_iters=2, hidden_aware=hidden_aware)
    state = initial_state(len(c), cfg)
    for sc in _stream(c, 200, 1):
        state = online_step(state, sc, cfg)
        s = state.s_hat
        assert np.array_equal(s, s.T) and (s >= 0).all() and not np.diag(s).any()
        assert np.array_equal(s[known.rows, known.cols], known.values)
        assert state.gamma * 2 * cfg.mu * sc.sigma ** 2 < 1
        assert state.t == sc.t
        if not hidden_aware:
            assert not state.p_hat.any()


def test_fixed_point_under_full_clamp():
    g = generate_er(6, 0.5, 2)
    c = polynomial_covariance(g, random_filter(2, 3, s=g)).c
    iu = np.triu_indices(6, 1)
    known = KnownEdgeSet(iu[0], iu[1], g.entries[iu])
    cfg = EstimatorConfig(known_edges=known, hidden_aware=False)
    state = EstimatorState(g.entries.copy(), np.zeros((6, 6)))
    out = online_step(state, warm_start(c, 1), cfg)
    assert np.array_equal(out.s_hat, g.entries)


def test_online_dimension_mismatch():
    cfg = EstimatorConfig()
    with pytest.raises(ValueError):
        online_step(initial_state(3, cfg), StreamingCovariance(4), cfg)


# --- batch solver ------------------------------------------------------------

def test_batch_identity_covariance():
    known = KnownEdgeSet.from_pairs({(0, 1): 1.0, (1, 2): 0.0})
    res = batch_solve(np.eye(4), EstimatorConfig(known_edges=known), tol=1e-12)
    assert res.converged
    assert np.array_equal(res.s, known.dense(4))
    assert not res.p.any()


def test_batch_infinite_tolerance():
    c, _, known = small_scene(0)
    res = batch_solve(c, EstimatorConfig(known_edges=known), tol=math.inf)
    assert res.iterations == 1 and res.converged


def test_batch_iteration_cap_flags_nonconvergence():
    c, _, known = small_scene(2)
    res = batch_solve(c, EstimatorConfig(mu=1000.0, rho=50.0, known_edges=known), max_iters=3, tol=0.0)
    assert res.iterations == 3 and not res.converged
    s, p, it = res
    assert it == 3


def test_batch_rejects_non_psd():
    with pytest.raises(ValueError):
        batch_solve(np.diag([1.0, -1.0]), EstimatorConfig())


def test_batch_descent_and_oracle():
    for seed in range(4):
        c, _, known = small_scene(seed)
        for mu, rho in [(10.0, 1.0), (1000.0, 50.0)]:
            cfg = EstimatorConfig(mu=mu, rho=rho, known_edges=known)
            res = batch_solve(c, cfg, max_iters=1_000_000, tol=1e-12)
            h = np.array(res.objective_history)
            assert np.all(np.diff(h) <= 1e-12 * np.maximum(1.0, np.abs(h[:-1])))
            ref = cvx_batch_objective(c, mu, rho, known)
            assert abs(h[-1] - ref) <= 1e-3 * abs(ref)


def test_batch_descent_guard_raises():
    # a step far beyond the stability limit makes the objective climb
    c, _, known = small_scene(1)
    cfg = EstimatorConfig(mu=1000.0, rho=50.0, known_edges=known)
    import stgraph.estimator as est

    orig = est.effective_step
    est.effective_step = lambda sigma, cfg: 50 * orig(sigma, cfg)
    try:
        with pytest.raises(NumericalError):
            batch_solve(c, cfg, max_iters=1000, tol=0.0)
    finally:
        est.effective_step = orig


# --- checkpoints ---------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(o=st.integers(1, 6), seed=st.integers(0, 10**6), t=st.integers(0, 10**9))
def test_checkpoint_round_trip(tmp_path_factory, o, seed, t):
    rng = np.random.default_rng(seed)
    state = EstimatorState(rng.standard_normal((o, o)) * 10.0 ** rng.integers(-30, 30),
                           rng.standard_normal((o, o)), float(rng.random()) * 1e-7, t)
    path = tmp_path_factory.mktemp("ck") / "state.txt"
    write_checkpoint(state, path)
    back = read_checkpoint(path)
    assert back.t == state.t and back.gamma == state.gamma
    assert np.array_equal(back.s_hat, state.s_hat) and np.array_equal(back.p_hat, state.p_hat)
