"""Experiment orchestration: scenes, seeded trials, trace aggregation and output."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimator import (
    ConfigError,
    EstimatorConfig,
    _Clamp,
    _objective_sym,
    batch_solve,
    initial_state,
    online_step,
)
from .graph import (
    KnownEdgeSet,
    NodePartition,
    extract_blocks,
    generate_er,
    partition_uniform,
    sample_known_edges,
)
from .metrics import TrialTrace, UndefinedMetricError, normalized_error, residual_norm, write_traces_csv
from .signals import (
    IngestionError,
    PolynomialFilter,
    StreamingCovariance,
    psd_sqrt,
    random_filter,
    read_signals_csv,
    spectral_norm,
)

log = logging.getLogger(__name__)

KINDS = ("synthetic-iters", "hidden-sweep", "external-stream", "diagnose-bound")
METHODS = ("onst", "onst-h", "offst-h")


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything an experiment run depends on besides the input stream.

    ``normalize_covariance`` rescales the signal so that the population (or,
    for external streams, full-sample) covariance has spectral norm
    ``covariance_scale``, which keeps one (mu, rho) pair meaningful across
    random scenes. Only mu * scale^2 and rho * scale matter.
    """

    kind: str = "synthetic-iters"
    n_nodes: int = 30
    edge_prob: float = 0.1
    hidden: tuple[int, ...] = (2,)
    filter_order: int = 3
    samples: int = 20_000
    inner_iters: tuple[int, ...] = (1, 10, 100)
    methods: tuple[str, ...] = METHODS
    trials: int = 20
    seed: int = 0
    mu: float = 1e5
    rho: float = 1000.0
    step_safety: float = 0.95
    known_fraction: float = 0.1
    normalize_covariance: bool = True
    covariance_scale: float = 1.0
    grid_points: int = 30
    stride: int = 1
    change_point: int | None = None
    require_observed_edges: bool = True
    require_hidden_edges: bool = False
    offline_tol: float = 1e-6
    offline_max_iters: int = 100_000
    workers: int = 1
    # external streams only
    standardize: bool = True
    hidden_nodes: tuple[int, ...] = ()
    history: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.kind not in KINDS:
            out.append(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.samples < 1:
            out.append("samples (T) must be >= 1")
        if self.trials < 1:
            out.append("trials must be >= 1")
        if self.workers < 1:
            out.append("workers must be >= 1")
        if self.n_nodes < 2:
            out.append("n_nodes must be >= 2")
        if not 0.0 <= self.edge_prob <= 1.0:
            out.append("edge_prob must lie in [0, 1]")
        if not self.hidden:
            out.append("hidden must list at least one H")
        for h in self.hidden:
            if h < 0 or 2 * h >= self.n_nodes:
                out.append(f"H={h} violates 0 <= H < N/2 with N={self.n_nodes}")
        for m in self.methods:
            if m not in METHODS:
                out.append(f"unknown method {m!r}; allowed: {METHODS}")
        if not self.methods:
            out.append("methods must be nonempty")
        if not self.inner_iters or any(k < 1 for k in self.inner_iters):
            out.append("inner_iters must be a nonempty list of positive integers")
        if self.filter_order < 1:
            out.append("filter_order must be >= 1")
        if not 0.0 < self.known_fraction <= 1.0:
            out.append("known_fraction must lie in (0, 1]")
        if self.grid_points < 1:
            out.append("grid_points must be >= 1")
        if self.stride < 1:
            out.append("stride must be >= 1")
        if self.change_point is not None and not 1 <= self.change_point < self.samples:
            out.append("change_point must satisfy 1 <= change_point < samples")
        if not (self.mu > 0 and self.rho > 0):
            out.append("mu and rho must be positive")
        if not self.covariance_scale > 0:
            out.append("covariance_scale must be positive")
        if not 0.0 < self.step_safety < 1.0:
            out.append("step_safety must lie in (0, 1)")
        if len(set(self.hidden_nodes)) != len(self.hidden_nodes):
            out.append("hidden_nodes contains duplicates")
        return out

    def validate(self) -> "ExperimentSpec":
        bad = self.violations()
        if bad:
            raise ConfigError("invalid experiment spec:\n  " + "\n  ".join(bad))
        return self

    def with_(self, **kw) -> "ExperimentSpec":
        return dataclasses.replace(self, **kw)

    def estimator_config(self, known: KnownEdgeSet, hidden_aware: bool, inner_iters: int = 1) -> EstimatorConfig:
        return EstimatorConfig(mu=self.mu, rho=self.rho, known_edges=known, inner_iters=inner_iters,
                               step_safety=self.step_safety, hidden_aware=hidden_aware)

    def to_meta(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = ""
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_meta().encode()).hexdigest()[:12]


# Per-subcommand defaults; anything else falls back to the dataclass defaults.
PRESETS: dict[str, dict] = {
    "synthetic-iters": {},
    "hidden-sweep": dict(n_nodes=20, hidden=(2, 5), samples=10_000, inner_iters=(10,)),
    "external-stream": dict(n_nodes=15, methods=("onst", "onst-h"), inner_iters=(10,), trials=1),
    # mu = 0.01 only leaves a nontrivial optimum when mu * scale^2 is large enough
    "diagnose-bound": dict(n_nodes=9, hidden=(1,), samples=2000, mu=0.01, rho=1.0, methods=("onst-h",),
                           inner_iters=(1,), trials=1, covariance_scale=100.0, offline_tol=1e-9,
                           offline_max_iters=200_000),
}


def preset(kind: str, **overrides) -> ExperimentSpec:
    if kind not in PRESETS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    return ExperimentSpec(kind=kind, **{**PRESETS[kind], **overrides})


# --- configuration files ---------------------------------------------------

_BOOL = {"true": True, "1": True, "yes": True, "on": True, "false": False, "0": False, "no": False, "off": False}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key.replace("-", "_")] = val
    return out


def read_config_file(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_config_text(fh.read(), str(path))


def coerce_overrides(raw: dict[str, object]) -> dict[str, object]:
    """Convert string values to the types of the matching ExperimentSpec fields."""
    types = {f.name: f for f in dataclasses.fields(ExperimentSpec)}
    defaults = ExperimentSpec()
    out = {}
    for key, val in raw.items():
        if key not in types:
            raise ConfigError(f"unknown configuration key {key!r}")
        if not isinstance(val, str):
            out[key] = val
            continue
        template = getattr(defaults, key)
        try:
            if key == "change_point":
                out[key] = int(val) if val else None
            elif isinstance(template, bool):
                out[key] = _BOOL[val.lower()]
            elif isinstance(template, tuple):
                items = [x.strip() for x in val.split(",") if x.strip()]
                out[key] = tuple(items) if key == "methods" else tuple(int(x) for x in items)
            elif isinstance(template, int):
                out[key] = int(float(val)) if "e" in val.lower() else int(val)
            elif isinstance(template, float):
                out[key] = float(val)
            else:
                out[key] = val
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {val!r}") from exc
    return out


# --- scenes -----------------------------------------------------------------

def log_grid(samples: int, points: int = 30) -> list[int]:
    """Roughly log-spaced integer sample counts in [1, samples], always ending at ``samples``."""
    g = np.unique(np.round(np.logspace(0.0, np.log10(samples), max(points, 1))).astype(int))
    g = g[(g >= 1) & (g <= samples)]
    out = sorted(set(g.tolist()) | {samples})
    return out


@dataclass
class SyntheticScene:
    s_o: np.ndarray
    c_full: np.ndarray
    observed: list[int]
    hidden: list[int]
    known: KnownEdgeSet
    filt: PolynomialFilter


def _draw_graph(spec: ExperimentSpec, h: int, rng: np.random.Generator, part=None, max_tries: int = 1000):
    for _ in range(max_tries):
        g = generate_er(spec.n_nodes, spec.edge_prob, rng)
        if part is None:
            cand = partition_uniform(spec.n_nodes, h, rng)
        else:
            cand = part
        blocks = extract_blocks(g, cand)
        if spec.require_observed_edges and not np.any(blocks.s_o):
            continue
        if spec.require_hidden_edges and h > 0 and not np.all(blocks.s_oh.any(axis=0)):
            continue
        return g, cand, blocks
    raise ConfigError(f"no admissible graph after {max_tries} draws (N={spec.n_nodes}, p={spec.edge_prob}, H={h})")


def _covariance(g, filt: PolynomialFilter, normalize: bool, scale: float = 1.0) -> np.ndarray:
    hm = filt.apply(g.entries)
    c = hm @ hm
    c = 0.5 * (c + c.T)
    if normalize:
        c = c * (scale / spectral_norm(c))
    return c


def make_scene(spec: ExperimentSpec, h: int, rng: np.random.Generator, part=None,
               filt: PolynomialFilter | None = None) -> SyntheticScene:
    g, part, blocks = _draw_graph(spec, h, rng, part)
    if filt is None:
        filt = random_filter(rng, spec.filter_order, s=g)
    c = _covariance(g, filt, spec.normalize_covariance, spec.covariance_scale)
    known = sample_known_edges(blocks.s_o, spec.known_fraction, rng)
    return SyntheticScene(blocks.s_o, c, list(part.observed), list(part.hidden), known, filt)


def _trial_rng(spec: ExperimentSpec, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, *key]))


# --- the shared online/offline loop ----------------------------------------

@dataclass
class _Runner:
    label: str
    hidden_aware: bool
    inner_iters: int | None  # None for the batch method

    def config(self, spec: ExperimentSpec, known: KnownEdgeSet) -> EstimatorConfig:
        return spec.estimator_config(known, self.hidden_aware, self.inner_iters or 1)


def _runners(spec: ExperimentSpec) -> list[_Runner]:
    out = []
    for m in spec.methods:
        if m == "offst-h":
            out.append(_Runner("offst-h", True, None))
            continue
        for k in spec.inner_iters:
            out.append(_Runner(f"{m}-{k}", m == "onst-h", k))
    return out


def _safe_err(s_true, s_hat) -> float:
    try:
        return normalized_error(s_true, s_hat)
    except UndefinedMetricError:
        return float("nan")


def stream_trial(x_o: np.ndarray, truth_at, known_at, spec: ExperimentSpec, grid: list[int],
                 suffix: str = "") -> dict[str, TrialTrace]:
    """Run every configured method on the same observed stream ``x_o`` (O x T).

    ``truth_at(t)`` returns the reference S_O after t samples; ``known_at(t)``
    returns the clamped edge set in force when sample t arrives.
    """
    o, horizon = x_o.shape
    runners = _runners(spec)
    online = [r for r in runners if r.inner_iters is not None]
    batch = [r for r in runners if r.inner_iters is None]
    known = known_at(1)
    cfgs = {r.label: r.config(spec, known) for r in runners}
    clamps = {r.label: _Clamp(known, o) for r in online}
    states = {r.label: initial_state(o, cfgs[r.label]) for r in online}
    warm = {r.label: (None, None) for r in batch}
    traces = {r.label + suffix: TrialTrace(r.label + suffix, config_digest=spec.digest()) for r in runners}
    sc = StreamingCovariance(o)
    grid_set = set(grid)
    xt = np.ascontiguousarray(x_o.T)
    for t in range(1, horizon + 1):
        k_now = known_at(t)
        if k_now is not known:
            known = k_now
            cfgs = {r.label: r.config(spec, known) for r in runners}
            clamps = {r.label: _Clamp(known, o) for r in online}
        sc.update(xt[t - 1])
        for r in online:
            states[r.label] = online_step(states[r.label], sc, cfgs[r.label], clamps[r.label])
        if t not in grid_set:
            continue
        s_true = truth_at(t)
        c = sc.c_hat
        for r in online:
            st = states[r.label]
            traces[r.label + suffix].record(t, _safe_err(s_true, st.s_hat),
                                            _objective_sym(c, st.s_hat, st.p_hat, spec.mu, spec.rho),
                                            residual_norm(c, st.s_hat, st.p_hat))
        for r in batch:
            res = batch_solve(c, cfgs[r.label], max_iters=spec.offline_max_iters, tol=spec.offline_tol,
                              s0=warm[r.label][0], p0=warm[r.label][1])
            if not res.converged:
                log.debug("%s: batch solve at t=%d stopped after %d iterations", r.label, t, res.iterations)
            warm[r.label] = (res.s, res.p)
            traces[r.label + suffix].record(t, _safe_err(s_true, res.s), res.objective_history[-1],
                                            residual_norm(c, res.s, res.p))
    return traces


# --- experiment kinds --------------------------------------------------------

def _synthetic_trial(spec: ExperimentSpec, h: int, trial: int, suffix: str) -> dict[str, TrialTrace]:
    rng = _trial_rng(spec, h, trial)
    scene = make_scene(spec, h, rng)
    o = np.asarray(scene.observed)
    x = psd_sqrt(scene.c_full) @ rng.standard_normal((spec.n_nodes, spec.samples))
    truth, known = scene.s_o, scene.known
    if spec.change_point is None:
        return stream_trial(x[o], lambda t: truth, lambda t: known, spec, log_grid(spec.samples, spec.grid_points),
                            suffix)
    # regenerate the graph on the same partition and filter; later samples come from the new scene
    after = make_scene(spec, h, rng, part=NodePartition(scene.observed, scene.hidden), filt=scene.filt)
    after_known = KnownEdgeSet(known.rows, known.cols, after.s_o[known.rows, known.cols])
    cp = spec.change_point
    x[:, cp:] = psd_sqrt(after.c_full) @ rng.standard_normal((spec.n_nodes, spec.samples - cp))
    grid = sorted(set(log_grid(spec.samples, spec.grid_points)) | {cp, cp + 1})
    return stream_trial(x[o], lambda t: truth if t <= cp else after.s_o,
                        lambda t: known if t <= cp else after_known, spec, grid, suffix)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    grid: list[int]
    trials: list[dict[str, TrialTrace]] = field(default_factory=list)

    @property
    def labels(self) -> list[str]:
        return sorted(self.trials[0]) if self.trials else []

    def matrix(self, label: str, metric: str = "err") -> np.ndarray:
        """trials x grid array of one metric for one label."""
        return np.array([getattr(tr[label], metric) for tr in self.trials], dtype=float)

    def median(self, metric: str = "err") -> dict[str, list[float]]:
        return {lab: np.nanmedian(self.matrix(lab, metric), axis=0).tolist() for lab in self.labels}

    def mean(self, metric: str = "err") -> dict[str, list[float]]:
        return {lab: np.nanmean(self.matrix(lab, metric), axis=0).tolist() for lab in self.labels}

    def final_median(self, label: str) -> float:
        return float(np.nanmedian(self.matrix(label)[:, -1]))


def _map_trials(fn, jobs: list[tuple], workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *j) for j in jobs]
        return [f.result() for f in futures]


def _merge(per_job: list[dict], trials: int) -> list[dict[str, TrialTrace]]:
    merged: list[dict[str, TrialTrace]] = [{} for _ in range(trials)]
    for (trial, traces) in per_job:
        merged[trial].update(traces)
    return merged


def _synthetic_job(spec: ExperimentSpec, h: int, trial: int, suffix: str):
    return trial, _synthetic_trial(spec, h, trial, suffix)


def _grid_of(result_trials) -> list[int]:
    first = next(iter(result_trials[0].values()))
    return list(first.sample_index)


def run_synthetic_iters(spec: ExperimentSpec) -> ExperimentResult:
    spec.validate()
    if spec.kind != "synthetic-iters":
        raise ConfigError(f"run_synthetic_iters needs kind 'synthetic-iters', got {spec.kind!r}")
    if len(spec.hidden) != 1:
        raise ConfigError("synthetic-iters takes a single H; use hidden-sweep for several")
    h = spec.hidden[0]
    jobs = [(spec, h, i, "") for i in range(spec.trials)]
    trials = _merge(_map_trials(_synthetic_job, jobs, spec.workers), spec.trials)
    return ExperimentResult(spec, _grid_of(trials), trials)


def run_hidden_sweep(spec: ExperimentSpec) -> ExperimentResult:
    spec.validate()
    if spec.kind != "hidden-sweep":
        raise ConfigError(f"run_hidden_sweep needs kind 'hidden-sweep', got {spec.kind!r}")
    jobs = [(spec, h, i, f" H={h}") for h in spec.hidden for i in range(spec.trials)]
    trials = _merge(_map_trials(_synthetic_job, jobs, spec.workers), spec.trials)
    return ExperimentResult(spec, _grid_of(trials), trials)


def standardize_columns(names: list[str], x: np.ndarray, tol: float = 1e-12):
    """Z-score each column of a T x N array; constant columns are dropped with a warning."""
    sd = x.std(axis=0)
    keep = sd > tol * np.maximum(1.0, np.abs(x).max(axis=0))
    dropped = [n for n, k in zip(names, keep) if not k]
    if dropped:
        msg = f"dropping zero-variance columns: {', '.join(dropped)}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        log.warning(msg)
    x = x[:, keep]
    x = (x - x.mean(axis=0)) / sd[keep]
    return [n for n, k in zip(names, keep) if k], x, np.flatnonzero(keep)


def historical_known_edges(x_hist: np.ndarray, observed: list[int], fraction: float, density: float,
                           rng: np.random.Generator) -> KnownEdgeSet:
    """Clamp a random ``fraction`` of observed pairs using a prior data window.

    A pair is clamped to 1 when its absolute correlation over ``x_hist`` is in
    the top ``density`` share of all pairs, and to 0 otherwise. Indices refer
    to positions within ``observed``.
    """
    o = len(observed)
    corr = np.corrcoef(x_hist[:, observed], rowvar=False) if x_hist.shape[0] > 1 else np.zeros((o, o))
    corr = np.nan_to_num(corr)
    iu = np.triu_indices(o, 1)
    a = np.abs(corr[iu])
    cut = np.quantile(a, 1.0 - density) if a.size else 0.0
    m = max(1, int(round(fraction * a.size)))
    pick = np.sort(rng.choice(a.size, size=m, replace=False))
    vals = (a[pick] >= cut).astype(float)
    if not vals.any():
        vals[int(np.argmax(a[pick]))] = 1.0
    return KnownEdgeSet(iu[0][pick], iu[1][pick], vals)


def _external_trial(spec: ExperimentSpec, x: np.ndarray, trial: int):
    t_len, n = x.shape
    rng = _trial_rng(spec, trial)
    h = spec.hidden[0]
    if spec.hidden_nodes:
        hidden = sorted(spec.hidden_nodes)
    else:
        hidden = sorted(rng.choice(n, size=h, replace=False).tolist())
    observed = [i for i in range(n) if i not in set(hidden)]
    hist = spec.history or max(2, t_len // 10)
    full_known = historical_known_edges(x[:hist], list(range(n)), spec.known_fraction, spec.edge_prob, rng)
    obs_pos = {v: i for i, v in enumerate(observed)}
    keep = [k for k, (i, j) in enumerate(zip(full_known.rows, full_known.cols)) if i in obs_pos and j in obs_pos]
    if not keep:
        raise ConfigError("no clamped pair falls among the observed nodes; raise known_fraction")
    known = KnownEdgeSet([obs_pos[full_known.rows[k]] for k in keep], [obs_pos[full_known.cols[k]] for k in keep],
                         [full_known.values[k] for k in keep])

    grid = log_grid(t_len, spec.grid_points)
    if spec.change_point is not None:
        grid = sorted(set(grid) | {spec.change_point, spec.change_point + 1})
    if spec.stride > 1:
        grid = sorted(set(grid) | set(range(spec.stride, t_len + 1, spec.stride)))
    # full-node ground truth at each grid point
    truth_cfg = spec.estimator_config(full_known, hidden_aware=False)
    sc = StreamingCovariance(n)
    truths, warm = {}, None
    grid_set = set(grid)
    for t in range(1, t_len + 1):
        sc.update(x[t - 1])
        if t in grid_set:
            res = batch_solve(sc.c_hat, truth_cfg, max_iters=spec.offline_max_iters, tol=spec.offline_tol,
                              s0=warm)
            warm = res.s
            truths[t] = res.s[np.ix_(observed, observed)]
    traces = stream_trial(x[:, observed].T, truths.__getitem__, lambda t: known, spec, grid)
    return trial, traces


def load_stream(spec: ExperimentSpec, path) -> np.ndarray:
    names, x = read_signals_csv(path)
    if spec.standardize:
        names, x, kept = standardize_columns(names, x)
        if spec.hidden_nodes:
            remap = {int(old): new for new, old in enumerate(kept)}
            lost = [i for i in spec.hidden_nodes if i not in remap]
            if lost:
                warnings.warn(f"designated hidden columns {lost} were dropped", RuntimeWarning, stacklevel=2)
            spec = spec.with_(hidden_nodes=tuple(remap[i] for i in spec.hidden_nodes if i in remap))
    if spec.normalize_covariance and x.shape[0] > 0:
        c = x.T @ x / x.shape[0]
        sn = spectral_norm(c)
        if sn > 0:
            x = x * np.sqrt(spec.covariance_scale / sn)
    return spec, x


def surrogate_stream(spec: ExperimentSpec, seed: int) -> np.ndarray:
    """T x N Gaussian stationary stream on a random graph, for exercising the stream pipeline.

    With ``change_point`` set, samples after it come from a second,
    independently drawn graph with the same filter.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    g = generate_er(spec.n_nodes, spec.edge_prob, rng)
    filt = random_filter(rng, spec.filter_order, s=g)
    c = _covariance(g, filt, spec.normalize_covariance, spec.covariance_scale)
    x = psd_sqrt(c) @ rng.standard_normal((spec.n_nodes, spec.samples))
    if spec.change_point is not None:
        g2 = generate_er(spec.n_nodes, spec.edge_prob, rng)
        c2 = _covariance(g2, filt, spec.normalize_covariance, spec.covariance_scale)
        cp = spec.change_point
        x[:, cp:] = psd_sqrt(c2) @ rng.standard_normal((spec.n_nodes, spec.samples - cp))
    return x.T


def run_external_stream(spec: ExperimentSpec, signals_csv_path) -> ExperimentResult:
    spec.validate()
    if spec.kind != "external-stream":
        raise ConfigError(f"run_external_stream needs kind 'external-stream', got {spec.kind!r}")
    spec, x = load_stream(spec, signals_csv_path)
    t_len, n = x.shape
    h = len(spec.hidden_nodes) if spec.hidden_nodes else spec.hidden[0]
    if n <= h or n - h < 2:
        raise ConfigError(f"stream has {n} usable columns, too few for H={h}")
    if any(not 0 <= i < n for i in spec.hidden_nodes):
        raise ConfigError(f"hidden_nodes out of range for {n} columns")
    if t_len < 2:
        raise IngestionError(f"{signals_csv_path}: need at least two samples")
    spec = spec.with_(hidden=(h,), samples=t_len, n_nodes=n)
    if spec.hidden_nodes and spec.trials > 1:
        log.info("hidden_nodes fixed: all trials share hidden nodes and differ only in clamped pairs")
    jobs = [(spec, x, i) for i in range(spec.trials)]
    trials = _merge(_map_trials(_external_trial, jobs, spec.workers), spec.trials)
    return ExperimentResult(spec, _grid_of(trials), trials)


# --- output -----------------------------------------------------------------

def emit_csv(traces: dict[str, TrialTrace] | list[TrialTrace], path) -> None:
    """One column per trace, keyed and sorted by label; all traces must share a grid."""
    items = list(traces.values()) if isinstance(traces, dict) else list(traces)
    if not items:
        raise ValueError("no traces to write")
    grid = items[0].sample_index
    for tr in items[1:]:
        if tr.sample_index != grid:
            raise ValueError(f"trace {tr.method_label!r} has a different sample grid")
    write_traces_csv({tr.method_label: tr.err for tr in items}, grid, path)


def _aggregate(result: ExperimentResult, how: str) -> dict[str, TrialTrace]:
    cols = result.median() if how == "median" else result.mean()
    out = {}
    for lab, vals in cols.items():
        tr = TrialTrace(lab, list(result.grid), list(vals), config_digest=result.spec.digest())
        out[lab] = tr
    return out


def write_result(result: ExperimentResult, out_path) -> list[str]:
    """Median traces to ``out_path``, means next to it, resolved config to ``<out>.meta``."""
    out_path = str(out_path)
    stem = out_path[:-4] if out_path.endswith(".csv") else out_path
    mean_path = f"{stem}.mean.csv"
    meta_path = f"{out_path}.meta"
    emit_csv(_aggregate(result, "median"), out_path)
    emit_csv(_aggregate(result, "mean"), mean_path)
    with open(meta_path, "w") as fh:
        fh.write(result.spec.to_meta())
        fh.write(f"# median in {os.path.basename(out_path)}, mean in {os.path.basename(mean_path)}\n")
    return [out_path, mean_path, meta_path]


# --- tracking-bound diagnostics ----------------------------------------------

def run_diagnose_bound(spec: ExperimentSpec):
    """Online iterates versus per-sample batch optima on one static scene."""
    from .diagnostics import tracking_diagnostics

    spec.validate()
    h = spec.hidden[0]
    rng = _trial_rng(spec, h, 0)
    scene = make_scene(spec, h, rng)
    o = np.asarray(scene.observed)
    x = (psd_sqrt(scene.c_full) @ rng.standard_normal((spec.n_nodes, spec.samples)))[o]
    cfg = spec.estimator_config(scene.known, hidden_aware=("onst-h" in spec.methods or "offst-h" in spec.methods),
                                inner_iters=spec.inner_iters[0])

    def covariances():
        sc = StreamingCovariance(len(o))
        yield sc.c_hat.copy()
        for t in range(spec.samples):
            sc.update(x[:, t])
            yield sc.c_hat.copy()

    return tracking_diagnostics(covariances(), cfg, stride=spec.stride, batch_tol=spec.offline_tol,
                                batch_max_iters=spec.offline_max_iters)


def write_diagnostics(diag, spec: ExperimentSpec, out_path) -> list[str]:
    cols = {
        "lhs": diag.lhs_seq,
        "rhs": diag.rhs_seq,
        "log_rhs": diag.log_rhs_seq,
        "L": diag.l_seq,
        "log_L": diag.log_l_seq,
        "v": diag.v_seq,
        "satisfied": [float(b) for b in diag.satisfied],
        "reliable": [float(b) for b in diag.reliable],
    }
    out_path = str(out_path)
    write_traces_csv(cols, diag.t_seq, out_path)
    meta_path = f"{out_path}.meta"
    with open(meta_path, "w") as fh:
        fh.write(spec.to_meta())
        fh.write(f"satisfaction_rate = {diag.satisfaction_rate!r}\n")
        fh.write(f"rhs_exact = {diag.rhs_exact}\n")
    return [out_path, meta_path]
