"""Independent reference computations used by the tests."""

import numpy as np

from stgraph.graph import KnownEdgeSet, extract_blocks, generate_er, partition_uniform, sample_known_edges
from stgraph.signals import polynomial_covariance, random_filter


def penalty_direct(c, s, p, mu):
    """mu/2 ||C S + P - S C - P^T||^2 written out with explicit loops."""
    n = c.shape[0]
    tot = 0.0
    for i in range(n):
        for j in range(n):
            r = p[i, j] - p[j, i]
            for k in range(n):
                r += c[i, k] * s[k, j] - s[i, k] * c[k, j]
            tot += r * r
    return 0.5 * mu * tot


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def random_symmetric(rng, n, psd=False):
    a = rng.standard_normal((n, n))
    return a @ a.T / n if psd else (a + a.T) / 2


def small_scene(seed, n=7, h=1, p=0.4, fraction=0.2, normalize=True):
    """Observed covariance block, true S_O and a clamped edge set."""
    g = generate_er(n, p, seed)
    part = partition_uniform(n, h, seed + 1000)
    blocks = extract_blocks(g, part)
    c = polynomial_covariance(g, random_filter(seed + 2000, 3, s=g)).c
    if normalize:
        c = c / np.linalg.norm(c, 2)
    o = list(part.observed)
    known = sample_known_edges(blocks.s_o, fraction, seed + 3000)
    if not known.values.any():
        i, j = known.rows[0], known.cols[0]
        known = KnownEdgeSet([i], [j], [1.0])
    return c[np.ix_(o, o)], blocks, known


def cvx_batch_objective(c, mu, rho, known: KnownEdgeSet, hidden_aware=True):
    """Optimal value of the penalized problem from a generic conic solver."""
    import cvxpy as cp

    o = c.shape[0]
    s = cp.Variable((o, o), symmetric=True)
    p = cp.Variable((o, o)) if hidden_aware else np.zeros((o, o))
    r = c @ s + p - s @ c - (p.T if hidden_aware else 0)
    obj = cp.sum(cp.abs(s)) + 0.5 * mu * cp.sum_squares(r)
    if hidden_aware:
        obj = obj + rho * cp.sum(cp.norm(p, 2, axis=0))
    cons = [s >= 0, cp.diag(s) == 0]
    for i, j, v in zip(known.rows, known.cols, known.values):
        cons.append(s[int(i), int(j)] == float(v))
    prob = cp.Problem(cp.Minimize(obj), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10, max_iter=500)
    return float(prob.value)
