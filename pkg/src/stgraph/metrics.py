"""Estimation-quality metrics and per-trial metric traces."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .estimator import residual


class UndefinedMetricError(ValueError):
    pass


def normalized_error(s_true, s_hat) -> float:
    """||S_true - S_hat||_F^2 / ||S_true||_F^2."""
    s_true = np.asarray(s_true, dtype=float)
    s_hat = np.asarray(s_hat, dtype=float)
    if s_true.shape != s_hat.shape:
        raise ValueError(f"shape mismatch {s_true.shape} vs {s_hat.shape}")
    den = float(np.vdot(s_true, s_true))
    if den == 0.0:
        raise UndefinedMetricError("normalized error is undefined for an all-zero target")
    d = s_true - s_hat
    return float(np.vdot(d, d)) / den


def edge_classification(s_true, s_hat, threshold: float | None = None) -> tuple[float, float, float]:
    """Precision, recall and F1 of the upper-triangular edge support.

    An edge is predicted where ``s_hat`` exceeds ``threshold``; the default is
    30% of the largest estimated weight.
    """
    s_true = np.asarray(s_true, dtype=float)
    s_hat = np.asarray(s_hat, dtype=float)
    iu = np.triu_indices(s_true.shape[0], 1)
    if threshold is None:
        threshold = 0.3 * float(s_hat.max(initial=0.0))
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    truth = s_true[iu] != 0
    pred = s_hat[iu] > threshold
    tp = int(np.sum(truth & pred))
    fp = int(np.sum(~truth & pred))
    fn = int(np.sum(truth & ~pred))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def residual_norm(c, s, p) -> float:
    """||C S + P - S C - P^T||_F."""
    return float(np.linalg.norm(residual(c, s, p)))


@dataclass
class TrialTrace:
    method_label: str
    sample_index: list[int] = field(default_factory=list)
    err: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    residual: list[float] = field(default_factory=list)
    config_digest: str = ""

    def record(self, t: int, err: float, objective: float, resid: float) -> None:
        if err < 0:
            raise ValueError("normalized error cannot be negative")
        self.sample_index.append(int(t))
        self.err.append(float(err))
        self.objective.append(float(objective))
        self.residual.append(float(resid))

    def __len__(self):
        return len(self.sample_index)


def write_traces_csv(columns: dict[str, list[float]], samples: list[int], path) -> None:
    """``samples`` column followed by one column per label, sorted by label."""
    labels = sorted(columns)
    for lab in labels:
        if len(columns[lab]) != len(samples):
            raise ValueError(f"column {lab!r} has {len(columns[lab])} rows, grid has {len(samples)}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["samples", *labels])
        for k, t in enumerate(samples):
            w.writerow([int(t), *(f"{columns[lab][k]:.17g}" for lab in labels)])


def read_traces_csv(path) -> tuple[list[int], dict[str, list[float]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "samples":
            raise ValueError(f"{path}: first column must be 'samples'")
        samples, cols = [], {lab: [] for lab in header[1:]}
        for row in reader:
            samples.append(int(row[0]))
            for lab, v in zip(header[1:], row[1:]):
                cols[lab].append(float(v))
    return samples, cols
