"""Proximal-gradient estimation of the observed-node GSO under hidden nodes.

The smooth part is the commutativity penalty

    g(S, P) = mu/2 * ||C S + P - S C - P^T||_F^2

and the nonsmooth part is ``||S||_1 + rho * ||P||_{2,1}`` plus the
indicator of valid adjacency blocks (symmetric, hollow, nonnegative, with the
known entries clamped).  ``online_step`` runs a few block proximal-gradient
passes per incoming sample, ``batch_solve`` iterates the same pass on a fixed
covariance until the iterates stop moving.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .graph import KnownEdgeSet
from .signals import StreamingCovariance

SIGMA_FLOOR = 1e-8


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    mu: float = 0.5
    rho: float = 0.1
    known_edges: KnownEdgeSet = field(default_factory=KnownEdgeSet.empty)
    inner_iters: int = 1
    step_safety: float = 0.95
    hidden_aware: bool = True

    def __post_init__(self):
        problems = []
        if not self.mu > 0:
            problems.append(f"mu must be > 0 (got {self.mu})")
        if not self.rho > 0:
            problems.append(f"rho must be > 0 (got {self.rho})")
        if not 0 < self.step_safety < 1:
            problems.append(f"step_safety must lie in (0, 1) (got {self.step_safety})")
        if self.inner_iters < 1:
            problems.append(f"inner_iters must be >= 1 (got {self.inner_iters})")
        if problems:
            raise ConfigError("; ".join(problems))

    def with_(self, **kw) -> "EstimatorConfig":
        return replace(self, **kw)


@dataclass
class EstimatorState:
    s_hat: np.ndarray
    p_hat: np.ndarray
    gamma: float = 0.0
    t: int = 0

    def copy(self) -> "EstimatorState":
        return EstimatorState(self.s_hat.copy(), self.p_hat.copy(), self.gamma, self.t)


def _check_square(*mats):
    n = mats[0].shape[0]
    for m in mats:
        if m.ndim != 2 or m.shape != (n, n):
            raise ValueError(f"expected conformal {n}x{n} matrices, got shape {m.shape}")


def residual(c, s, p) -> np.ndarray:
    """C S + P - S C - P^T."""
    c, s, p = (np.asarray(a, dtype=float) for a in (c, s, p))
    _check_square(c, s, p)
    return c @ s + p - s @ c - p.T


def penalty_g(c, s, p, mu: float) -> float:
    r = residual(c, s, p)
    return 0.5 * mu * float(np.vdot(r, r))


def grad_s(c, s, p, mu: float) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    r = residual(c, s, p)
    return mu * (c @ r - r @ c)


def grad_p(c, s, p, mu: float) -> np.ndarray:
    """2 mu R.

    Equals the exact derivative mu (R - R^T) whenever S and C are symmetric,
    because R is then antisymmetric.
    """
    return 2.0 * mu * residual(c, s, p)


def l1_norm(s) -> float:
    return float(np.abs(s).sum())


def l21_norm(p) -> float:
    return float(np.sqrt((np.asarray(p) ** 2).sum(axis=0)).sum())


def objective(s, p, c, mu: float, rho: float) -> float:
    return l1_norm(s) + rho * l21_norm(p) + penalty_g(c, s, p, mu)


class _Clamp:
    """Precomputed masks for the S-proximal map on an O x O block."""

    __slots__ = ("free", "fixed")

    def __init__(self, known: KnownEdgeSet, o: int):
        mask = known.mask(o)
        free = ~mask
        np.fill_diagonal(free, False)
        self.free = free.astype(float)
        self.fixed = known.dense(o)

    def __call__(self, q: np.ndarray, gamma: float) -> np.ndarray:
        q = 0.5 * (q + q.T)
        return np.maximum(q - gamma, 0.0) * self.free + self.fixed


def prox_s(q, gamma: float, known_edges: KnownEdgeSet | None = None) -> np.ndarray:
    """Soft-threshold at ``gamma`` and project onto valid adjacency blocks.

    The input is symmetrized first; the diagonal is zeroed and known entries
    are overwritten with their clamped values.
    """
    q = np.asarray(q, dtype=float)
    _check_square(q)
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    known = known_edges if known_edges is not None else KnownEdgeSet.empty()
    try:
        clamp = _Clamp(known, q.shape[0])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return clamp(q, gamma)


def prox_p(q, tau: float) -> np.ndarray:
    """Column-wise group soft-thresholding (prox of tau * ||.||_{2,1})."""
    q = np.asarray(q, dtype=float)
    norms = np.sqrt((q * q).sum(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > tau, 1.0 - tau / norms, 0.0)
    return q * scale


def step_size(sigma: float, mu: float, step_safety: float = 0.95) -> float:
    """kappa / (2 mu sigma^2), with sigma floored to keep the step finite."""
    sig2 = max(sigma * sigma, SIGMA_FLOOR * SIGMA_FLOOR)
    return step_safety / (2.0 * mu * sig2)


def effective_step(sigma: float, cfg: EstimatorConfig) -> float:
    """Step used by the solvers.

    The P block has gradient Lipschitz constant 4 mu regardless of the
    covariance, and a proximal step decreases the objective only below twice
    the inverse Lipschitz constant, so the step is also capped at
    kappa / (2 mu). The cap binds only when sigma < 1.
    """
    return min(step_size(sigma, cfg.mu, cfg.step_safety), cfg.step_safety / (2.0 * cfg.mu))


def initial_state(o: int, cfg: EstimatorConfig) -> EstimatorState:
    """Feasible zero point: known entries clamped, everything else 0."""
    clamp = _Clamp(cfg.known_edges, o)
    return EstimatorState(clamp.fixed.copy(), np.zeros((o, o)), 0.0, 0)


@njit(cache=True)
def _passes(c, s, p, gamma, mu, tau, free, fixed, hidden_aware, n):
    """``n`` block proximal-gradient passes with a frozen step, fused.

    Relies on S and C being exactly symmetric: then S C = (C S)^T, R is
    antisymmetric and C R - R C = C R + (C R)^T. Returns fresh arrays.
    """
    o = c.shape[0]
    s = s.copy()
    p = p.copy()
    r = np.empty((o, o))
    gm = gamma * mu
    gp = 2.0 * gamma * mu
    m = c @ s
    for _ in range(n):
        for i in range(o):
            for j in range(o):
                r[i, j] = m[i, j] - m[j, i]
        if hidden_aware:
            for i in range(o):
                for j in range(o):
                    r[i, j] += p[i, j] - p[j, i]
        cr = c @ r
        for i in range(o):
            s[i, i] = fixed[i, i]
            for j in range(i + 1, o):
                q = 0.5 * (s[i, j] + s[j, i]) - gm * (cr[i, j] + cr[j, i])
                v = q - gamma
                if v < 0.0:
                    v = 0.0
                v = v * free[i, j] + fixed[i, j]
                s[i, j] = v
                s[j, i] = v
        m = c @ s
        if hidden_aware:
            # full gradient step first (it reads P^T), then column shrinkage
            for i in range(o):
                for j in range(o):
                    r[i, j] = p[i, j] - gp * (m[i, j] - m[j, i] + p[i, j] - p[j, i])
            for j in range(o):
                nrm = 0.0
                for i in range(o):
                    nrm += r[i, j] * r[i, j]
                nrm = np.sqrt(nrm)
                scale = 1.0 - tau / nrm if nrm > tau else 0.0
                for i in range(o):
                    p[i, j] = r[i, j] * scale
    return s, p


@njit(cache=True)
def _objective_sym(c, s, p, mu, rho):
    """Objective for exactly symmetric S and C (same shortcut as ``_passes``)."""
    o = c.shape[0]
    m = c @ s
    l1 = 0.0
    quad = 0.0
    l21 = 0.0
    for j in range(o):
        col = 0.0
        for i in range(o):
            l1 += abs(s[i, j])
            r = m[i, j] - m[j, i] + p[i, j] - p[j, i]
            quad += r * r
            col += p[i, j] * p[i, j]
        l21 += np.sqrt(col)
    return l1 + rho * l21 + 0.5 * mu * quad


@njit(cache=True)
def _batch_loop(c, s, p, gamma, mu, rho, free, fixed, hidden_aware, max_iters, tol, slack):
    """Single passes until the iterate moves less than ``tol``.

    Returns (s, p, iterations, converged, objective history, index of the
    first objective increase beyond ``slack`` or -1).
    """
    hist = np.empty(max_iters + 1)
    hist[0] = _objective_sym(c, s, p, mu, rho)
    it = 0
    while it < max_iters:
        s_new, p_new = _passes(c, s, p, gamma, mu, gamma * rho, free, fixed, hidden_aware, 1)
        it += 1
        val = _objective_sym(c, s_new, p_new, mu, rho)
        hist[it] = val
        if val > hist[it - 1] + slack * max(1.0, abs(hist[it - 1])):
            return s_new, p_new, it, False, hist[:it + 1], it
        move = np.sqrt(np.sum((s_new - s) ** 2)) + np.sqrt(np.sum((p_new - p) ** 2))
        s, p = s_new, p_new
        if move < tol:
            return s, p, it, True, hist[:it + 1], -1
    return s, p, it, False, hist[:it + 1], -1


def _run(c, s, p, gamma, cfg: EstimatorConfig, clamp: _Clamp, n: int):
    return _passes(np.ascontiguousarray(c), np.ascontiguousarray(s), np.ascontiguousarray(p),
                   float(gamma), float(cfg.mu), float(gamma * cfg.rho), clamp.free, clamp.fixed,
                   bool(cfg.hidden_aware), int(n))


def online_step(state: EstimatorState, sc: StreamingCovariance, cfg: EstimatorConfig,
                clamp: _Clamp | None = None) -> EstimatorState:
    """Advance the estimate after ``sc`` has absorbed a new sample.

    Runs ``cfg.inner_iters`` passes of {gradient step + prox on S, gradient
    step + group prox on P}. With ``hidden_aware`` off, P stays zero.
    """
    o = sc.dim
    if state.s_hat.shape != (o, o) or state.p_hat.shape != (o, o):
        raise ValueError(f"state is {state.s_hat.shape}, covariance is {o}x{o}")
    if clamp is None:
        clamp = _Clamp(cfg.known_edges, o)
    gamma = effective_step(sc.sigma, cfg)
    s, p = _run(sc.c_hat, state.s_hat, state.p_hat, gamma, cfg, clamp, cfg.inner_iters)
    return EstimatorState(s, p, gamma, sc.t)


@dataclass
class BatchResult:
    s: np.ndarray
    p: np.ndarray
    iterations: int
    converged: bool
    objective_history: list[float]

    def __iter__(self):
        yield from (self.s, self.p, self.iterations)


def _symmetric_psd(c, tol: float = 1e-9) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    _check_square(c)
    scale = max(float(np.abs(c).max(initial=0.0)), 1.0)
    if np.abs(c - c.T).max(initial=0.0) > tol * scale:
        raise ValueError("covariance is not symmetric")
    c = 0.5 * (c + c.T)
    if c.size and np.linalg.eigvalsh(c).min() < -tol * scale:
        raise ValueError("covariance is not positive semidefinite")
    return c


def batch_solve(c, cfg: EstimatorConfig, max_iters: int = 10_000, tol: float = 1e-8,
                s0=None, p0=None, slack: float = 1e-12) -> BatchResult:
    """Minimize the penalized problem for a fixed covariance.

    Stops once ||dS||_F + ||dP||_F < tol. The objective is checked to be
    non-increasing after every pass (relative ``slack``); a violation raises
    ``NumericalError``.
    """
    c = _symmetric_psd(c)
    o = c.shape[0]
    clamp = _Clamp(cfg.known_edges, o)
    s = clamp.fixed.copy() if s0 is None else np.maximum(0.5 * (s0 + s0.T), 0.0) * clamp.free + clamp.fixed
    p = np.zeros((o, o)) if (p0 is None or not cfg.hidden_aware) else np.array(p0, dtype=float)
    gamma = effective_step(float(np.abs(np.linalg.eigvalsh(c)).max(initial=0.0)), cfg)

    s, p, it, converged, hist, bad = _batch_loop(
        np.ascontiguousarray(c), np.ascontiguousarray(s), np.ascontiguousarray(p), float(gamma),
        float(cfg.mu), float(cfg.rho), clamp.free, clamp.fixed, bool(cfg.hidden_aware),
        int(max_iters), float(tol), float(slack))
    if bad >= 0:
        raise NumericalError(f"objective increased at iteration {bad}: {hist[bad - 1]!r} -> {hist[bad]!r}")
    return BatchResult(s, p, int(it), bool(converged), hist.tolist())


def write_checkpoint(state: EstimatorState, path) -> None:
    def rows(m):
        return "\n".join(",".join(repr(float(v)) for v in row) for row in m)

    o = state.s_hat.shape[0]
    text = (
        f"t={state.t}\ngamma={float(state.gamma)!r}\nO={o}\n"
        f"[s_hat]\n{rows(state.s_hat)}\n[p_hat]\n{rows(state.p_hat)}\n"
    )
    with open(path, "w") as fh:
        fh.write(text)


def read_checkpoint(path) -> EstimatorState:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = dict(ln.split("=", 1) for ln in lines[:3])
    o = int(head["O"])
    i_s = lines.index("[s_hat]")
    i_p = lines.index("[p_hat]")

    def parse(block):
        m = np.array([[float(v) for v in ln.split(",")] for ln in block], dtype=float)
        return m.reshape(o, o)

    return EstimatorState(
        s_hat=parse(lines[i_s + 1:i_p]),
        p_hat=parse(lines[i_p + 1:i_p + 1 + o]),
        gamma=float(head["gamma"]),
        t=int(head["t"]),
    )

