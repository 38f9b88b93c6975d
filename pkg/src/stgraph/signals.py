"""Stationary graph signals and the streaming sample covariance."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Gso


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class PolynomialFilter:
    coeffs: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(x) for x in self.coeffs)
        if not c or not any(c):
            raise ValueError("filter needs at least one nonzero coefficient")
        object.__setattr__(self, "coeffs", c)

    def __len__(self):
        return len(self.coeffs)

    def apply(self, s: np.ndarray) -> np.ndarray:
        """Evaluate sum_l h_l S^l by Horner's rule."""
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        eye = np.eye(s.shape[0])
        for h in reversed(self.coeffs):
            out = out @ s + h * eye
        return out


def random_filter(seed, order: int = 3, max_tries: int = 100, s: Gso | None = None,
                  rank_tol: float = 1e-8) -> PolynomialFilter:
    """Standard-normal coefficients; redrawn while (sum h_l S^l)^2 is numerically singular on ``s``."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        filt = PolynomialFilter(rng.standard_normal(order))
        if s is None:
            return filt
        ev = np.abs(np.linalg.eigvalsh(filt.apply(s.entries))) ** 2
        if ev.min() >= rank_tol * ev.max():
            return filt
    raise ModelError(f"no well-conditioned filter after {max_tries} draws")


@dataclass(frozen=True)
class CovarianceModel:
    c: np.ndarray
    source_gso: Gso

    @property
    def n(self) -> int:
        return self.c.shape[0]


def polynomial_covariance(s: Gso, filt: PolynomialFilter) -> CovarianceModel:
    """C = (sum_l h_l S^l)^2, symmetric PSD and commuting with S."""
    h = filt.apply(s.entries)
    h = (h + h.T) / 2
    c = h @ h
    c = (c + c.T) / 2
    c.setflags(write=False)
    return CovarianceModel(c, s)


def psd_sqrt(c: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    w, v = np.linalg.eigh((c + c.T) / 2)
    scale = max(np.abs(w).max(initial=0.0), 1.0)
    if w.size and w.min() < -tol * scale:
        raise ModelError(f"covariance is not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def sample_signals(model: CovarianceModel | np.ndarray, count: int, seed) -> np.ndarray:
    """Zero-mean Gaussian signals, one column per realization (N x count)."""
    c = model.c if isinstance(model, CovarianceModel) else np.asarray(model, dtype=float)
    root = psd_sqrt(c)
    rng = np.random.default_rng(seed)
    return root @ rng.standard_normal((c.shape[0], count))


def spectral_norm(m: np.ndarray) -> float:
    """Largest singular value of a symmetric matrix."""
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return 0.0
    return float(np.abs(np.linalg.eigvalsh(m)).max())


class StreamingCovariance:
    """Running estimate C_t = ((t-1) C_{t-1} + x x^T) / t over observed nodes.

    One owner, one stream. ``update`` mutates in place and returns ``self``.
    """

    __slots__ = ("c_hat", "t", "sigma")

    def __init__(self, dim: int):
        self.c_hat = np.zeros((dim, dim))
        self.t = 0
        self.sigma = 0.0

    @property
    def dim(self) -> int:
        return self.c_hat.shape[0]

    def update(self, x) -> "StreamingCovariance":
        x = np.asarray(x, dtype=float).ravel()
        if x.shape[0] != self.dim:
            raise ValueError(f"sample has length {x.shape[0]}, expected {self.dim}")
        self.t += 1
        t = self.t
        self.c_hat = ((t - 1) * self.c_hat + np.outer(x, x)) / t
        self.sigma = spectral_norm(self.c_hat)
        return self

    def copy(self) -> "StreamingCovariance":
        out = StreamingCovariance(self.dim)
        out.c_hat, out.t, out.sigma = self.c_hat.copy(), self.t, self.sigma
        return out


def warm_start(c0, t0: int, tol: float = 1e-9) -> StreamingCovariance:
    """Start the stream from a prior covariance worth ``t0`` samples."""
    c0 = np.array(c0, dtype=float)
    if c0.ndim != 2 or c0.shape[0] != c0.shape[1]:
        raise ValueError(f"prior covariance must be square, got {c0.shape}")
    scale = max(spectral_norm(c0), 1.0)
    if np.abs(c0 - c0.T).max(initial=0.0) > tol * scale:
        raise ModelError("prior covariance is not symmetric")
    if c0.size and np.linalg.eigvalsh((c0 + c0.T) / 2).min() < -tol * scale:
        raise ModelError("prior covariance is indefinite")
    if t0 < 0:
        raise ValueError("prior sample count must be nonnegative")
    sc = StreamingCovariance(c0.shape[0])
    sc.c_hat, sc.t, sc.sigma = (c0 + c0.T) / 2, int(t0), spectral_norm(c0)
    return sc


def cov_update(sc: StreamingCovariance, x) -> StreamingCovariance:
    return sc.update(x)


def write_signals_csv(x: np.ndarray, path, names=None) -> None:
    """Write a (nodes x time) signal matrix as one CSV row per time index."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    names = names or [f"node_{i}" for i in range(x.shape[0])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in x.T:
            w.writerow([repr(float(v)) for v in row])


class IngestionError(ValueError):
    pass


def read_signals_csv(path) -> tuple[list[str], np.ndarray]:
    """Parse a signal CSV into (column names, time x nodes array)."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        for row in reader:
            lineno = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(f) for f in row]
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: non-numeric field") from None
            if not all(np.isfinite(vals)):
                raise IngestionError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return [h.strip() for h in header], data
