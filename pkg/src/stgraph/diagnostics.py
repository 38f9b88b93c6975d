"""Tracking-bound bookkeeping: online iterates versus per-time batch optima.

For each diagnostic time t we record

* ``lhs``  ||S_t - S*_t||_F + ||P_t - P*_t||_F (online vs. batch optimum),
* ``v``    ||S*_{t+1} - S*_t||_F + ||P*_{t+1} - P*_t||_F,
* ``L``    prod_{i<=t} 5 gamma_i (sigma_i + 1)^2,
* ``rhs``  L_{t-1} (lhs_0 + sum_{i<t} v_i / L_i).

``L`` overflows double precision after a few hundred steps whenever the
per-step factor exceeds one, so log-domain copies are kept alongside.
"""

from __future__ import annotations

import math
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np

from .estimator import (
    EstimatorConfig,
    _Clamp,
    batch_solve,
    effective_step,
    initial_state,
    online_step,
)
from .signals import StreamingCovariance, spectral_norm


@dataclass
class TrackingDiagnostics:
    t_seq: list[int] = field(default_factory=list)
    l_seq: list[float] = field(default_factory=list)
    log_l_seq: list[float] = field(default_factory=list)
    v_seq: list[float] = field(default_factory=list)
    lhs_seq: list[float] = field(default_factory=list)
    rhs_seq: list[float] = field(default_factory=list)
    log_rhs_seq: list[float] = field(default_factory=list)
    reliable: list[bool] = field(default_factory=list)
    # per-sample factors 5 gamma_t (sigma_t + 1)^2 for t = 0..T
    factors: list[float] = field(default_factory=list)
    rhs_exact: bool = True

    @property
    def satisfied(self) -> list[bool]:
        return [lhs <= 0.0 or math.log(lhs) <= lr + 1e-12 * max(1.0, abs(lr))
                for lhs, lr in zip(self.lhs_seq, self.log_rhs_seq)]

    @property
    def satisfaction_rate(self) -> float:
        sat = self.satisfied
        return sum(sat) / len(sat) if sat else float("nan")


def running_product(factors: Iterable[float]) -> list[float]:
    out, acc = [], 1.0
    for f in factors:
        acc *= f
        out.append(acc)
    return out


def _logsumexp(terms: list[float]) -> float:
    finite = [x for x in terms if x != -math.inf]
    if not finite:
        return -math.inf
    m = max(finite)
    return m + math.log(math.fsum(math.exp(x - m) for x in finite))


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def _dist(a, b) -> float:
    return float(np.linalg.norm(a[0] - b[0]) + np.linalg.norm(a[1] - b[1]))


def tracking_diagnostics(covariances: Iterable[np.ndarray], cfg: EstimatorConfig, stride: int = 1,
                         batch_tol: float = 1e-10, batch_max_iters: int = 200_000) -> TrackingDiagnostics:
    """Run the online estimator along ``covariances`` = (C_0, C_1, ..., C_T).

    C_0 is the prior (zero for a cold start). The online state after
    absorbing C_t is compared with the batch optimum for C_t at every
    ``stride``-th t. With ``stride > 1`` the path variability between
    diagnostic points is held piecewise constant inside the right-hand side
    and ``rhs_exact`` is False.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    covs = iter(covariances)
    c = np.asarray(next(covs), dtype=float)
    o = c.shape[0]
    clamp = _Clamp(cfg.known_edges, o)
    sc = StreamingCovariance(o)
    state = initial_state(o, cfg)

    factors: list[float] = []
    online: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    optimum: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    converged: dict[int, bool] = {}
    warm = (None, None)
    t = 0
    while True:
        sc.c_hat, sc.sigma, sc.t = c, spectral_norm(c), t
        if t > 0:
            state = online_step(state, sc, cfg, clamp)
        factors.append(5.0 * effective_step(sc.sigma, cfg) * (sc.sigma + 1.0) ** 2)
        if t % stride == 0 or (t - 1) % stride == 0:
            res = batch_solve(c, cfg, max_iters=batch_max_iters, tol=batch_tol, s0=warm[0], p0=warm[1])
            warm = (res.s, res.p)
            optimum[t] = (res.s, res.p)
            converged[t] = res.converged
        if t % stride == 0:
            online[t] = (state.s_hat, state.p_hat)
        nxt = next(covs, None)
        if nxt is None:
            break
        c = np.asarray(nxt, dtype=float)
        t += 1
    horizon = t

    out = TrackingDiagnostics(factors=factors, rhs_exact=(stride == 1))
    l_all = running_product(factors)
    log_l_all = np.cumsum([math.log(f) for f in factors]).tolist()
    diag_times = sorted(online)
    v_at = {k: (_dist(optimum[k + 1], optimum[k]) if k + 1 in optimum else math.nan) for k in diag_times}
    lhs0 = _dist(online[0], optimum[0])

    # log(v_i / L_i) for each i, v piecewise constant between diagnostic times
    terms: list[float] = []
    for i in range(horizon):
        anchor = i - i % stride
        terms.append(_log(v_at[anchor]) - log_l_all[i])

    for k in diag_times:
        lhs = _dist(online[k], optimum[k])
        log_l_prev = log_l_all[k - 1] if k > 0 else 0.0
        log_rhs = log_l_prev + _logsumexp([_log(lhs0), *terms[:k]])
        out.t_seq.append(k)
        out.l_seq.append(l_all[k])
        out.log_l_seq.append(log_l_all[k])
        out.v_seq.append(v_at[k])
        out.lhs_seq.append(lhs)
        out.log_rhs_seq.append(log_rhs)
        out.rhs_seq.append(math.exp(log_rhs) if log_rhs < 709.0 else math.inf)
        out.reliable.append(converged[k] and converged.get(k + 1, True))
    return out
