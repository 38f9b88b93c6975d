"""Graph shift operators, Erdos-Renyi generation and observed/hidden partitions."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class InvalidDimensionError(ValueError):
    pass


class InvalidPartitionError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Gso:
    """Symmetric, nonnegative, hollow adjacency matrix."""

    entries: np.ndarray

    def __post_init__(self):
        m = _frozen(self.entries)
        issues = validate_gso(m)
        if issues:
            raise ValueError(f"invalid GSO: {issues[0]}")
        object.__setattr__(self, "entries", m)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def edge_count(self) -> int:
        return int(np.count_nonzero(np.triu(self.entries, 1)))


@dataclass(frozen=True)
class Violation:
    kind: str  # "asymmetry" | "negative" | "diagonal"
    i: int
    j: int

    def __str__(self):
        return f"{self.kind} at ({self.i},{self.j})"


def validate_gso(m, atol: float = 0.0) -> list[Violation]:
    """List every violated GSO invariant; an empty list means ``m`` is valid.

    Asymmetric pairs are reported once, with ``i < j``.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidDimensionError(f"expected a square matrix, got shape {m.shape}")
    out = []
    for i in np.flatnonzero(np.abs(np.diag(m)) > atol):
        out.append(Violation("diagonal", int(i), int(i)))
    iu, ju = np.nonzero(np.triu(np.abs(m - m.T) > atol, 1))
    out.extend(Violation("asymmetry", int(i), int(j)) for i, j in zip(iu, ju))
    ineg, jneg = np.nonzero(m < -atol)
    out.extend(Violation("negative", int(i), int(j)) for i, j in zip(ineg, jneg))
    return out


def generate_er(n: int, p: float, seed) -> Gso:
    """Unweighted Erdos-Renyi graph: each unordered pair is an edge w.p. ``p``."""
    if n < 2:
        raise InvalidDimensionError(f"need at least 2 nodes, got {n}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"edge probability must lie in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < p, 1).astype(float)
    return Gso(upper + upper.T)


@dataclass(frozen=True)
class NodePartition:
    observed: tuple[int, ...]
    hidden: tuple[int, ...]

    def __post_init__(self):
        obs, hid = tuple(int(i) for i in self.observed), tuple(int(i) for i in self.hidden)
        if set(obs) & set(hid):
            raise InvalidPartitionError("observed and hidden sets overlap")
        if len(set(obs)) != len(obs) or len(set(hid)) != len(hid):
            raise InvalidPartitionError("duplicate node index in partition")
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "hidden", hid)

    @property
    def n(self) -> int:
        return len(self.observed) + len(self.hidden)

    @property
    def order(self) -> np.ndarray:
        return np.array(self.observed + self.hidden, dtype=int)


def partition_uniform(n: int, h: int, seed, strict: bool = True) -> NodePartition:
    """Hide ``h`` nodes drawn uniformly without replacement.

    Both index lists come back in ascending order. With ``strict`` the
    partition must keep fewer hidden than observed nodes (``h < n/2``).
    """
    if h < 0 or h > n:
        raise InvalidPartitionError(f"cannot hide {h} of {n} nodes")
    if strict and 2 * h >= n:
        raise InvalidPartitionError(f"H={h} must be smaller than O={n - h}")
    rng = np.random.default_rng(seed)
    hidden = np.sort(rng.choice(n, size=h, replace=False)) if h else np.array([], dtype=int)
    observed = np.setdiff1d(np.arange(n), hidden)
    return NodePartition(tuple(observed.tolist()), tuple(hidden.tolist()))


@dataclass(frozen=True)
class GroundTruthScene:
    full_gso: Gso
    partition: NodePartition
    s_o: np.ndarray = field(repr=False)
    s_oh: np.ndarray = field(repr=False)
    s_ho: np.ndarray = field(repr=False)
    s_h: np.ndarray = field(repr=False)

    def reassemble(self) -> np.ndarray:
        """Blocks stitched back together in (observed, hidden) order."""
        return np.block([[self.s_o, self.s_oh], [self.s_ho, self.s_h]])


def extract_blocks(full: Gso, part: NodePartition) -> GroundTruthScene:
    if part.n != full.n or (part.n and (min(part.order) < 0 or max(part.order) >= full.n)):
        raise InvalidPartitionError(f"partition over {part.n} nodes does not cover a {full.n}-node graph")
    o = np.array(part.observed, dtype=int)
    h = np.array(part.hidden, dtype=int)
    s = full.entries
    return GroundTruthScene(
        full_gso=full,
        partition=part,
        s_o=_frozen(s[np.ix_(o, o)]),
        s_oh=_frozen(s[np.ix_(o, h)]),
        s_ho=_frozen(s[np.ix_(h, o)]),
        s_h=_frozen(s[np.ix_(h, h)]),
    )


@dataclass(frozen=True)
class KnownEdgeSet:
    """Entries of the observed block known a priori (upper-triangular pairs).

    ``rows``/``cols`` hold ``i < j`` pairs; ``values`` the clamped weights.
    """

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=int).ravel()
        c = np.asarray(self.cols, dtype=int).ravel()
        v = np.asarray(self.values, dtype=float).ravel()
        if not (r.shape == c.shape == v.shape):
            raise ValueError("rows, cols and values must have equal length")
        lo, hi = np.minimum(r, c), np.maximum(r, c)
        if np.any(lo == hi):
            raise ValueError("known edges cannot sit on the diagonal")
        if np.any(lo < 0):
            raise ValueError("negative node index in known edges")
        for a in (lo, hi, v):
            a.setflags(write=False)
        object.__setattr__(self, "rows", lo)
        object.__setattr__(self, "cols", hi)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_pairs(cls, pairs: dict[tuple[int, int], float]) -> "KnownEdgeSet":
        items = sorted(pairs.items())
        return cls([i for (i, _), _ in items], [j for (_, j), _ in items], [v for _, v in items])

    @classmethod
    def empty(cls) -> "KnownEdgeSet":
        return cls([], [], [])

    def __len__(self) -> int:
        return len(self.values)

    def check(self, o: int) -> None:
        if len(self) and self.cols.max() >= o:
            raise ValueError(f"known edge index {int(self.cols.max())} out of range for O={o}")

    def mask(self, o: int) -> np.ndarray:
        """Boolean O x O mask, symmetric, of the known entries."""
        self.check(o)
        m = np.zeros((o, o), dtype=bool)
        m[self.rows, self.cols] = True
        m[self.cols, self.rows] = True
        return m

    def dense(self, o: int) -> np.ndarray:
        self.check(o)
        m = np.zeros((o, o))
        m[self.rows, self.cols] = self.values
        m[self.cols, self.rows] = self.values
        return m


def sample_known_edges(s_o, fraction: float, seed, require_edge: bool = True) -> KnownEdgeSet:
    """Reveal a uniformly sampled ``fraction`` of observed pairs with their true values.

    At least one pair is always revealed. With ``require_edge`` and a nonempty
    ``s_o``, one revealed pair is guaranteed to be an edge: clamping only
    zeros would leave the all-zero estimate optimal.
    """
    s_o = np.asarray(s_o, dtype=float)
    o = s_o.shape[0]
    iu, ju = np.triu_indices(o, 1)
    if iu.size == 0:
        return KnownEdgeSet.empty()
    k = min(iu.size, max(1, int(round(fraction * iu.size))))
    rng = np.random.default_rng(seed)
    pick = rng.choice(iu.size, size=k, replace=False)
    edges = np.flatnonzero(s_o[iu, ju] != 0)
    if require_edge and edges.size and not np.isin(pick, edges).any():
        pick[rng.integers(k)] = rng.choice(edges)
    pick = np.sort(pick)
    return KnownEdgeSet(iu[pick], ju[pick], s_o[iu[pick], ju[pick]])


def save_edgelist(g: Gso, path) -> None:
    iu, ju = np.nonzero(np.triu(g.entries, 1))
    lines = [f"n={g.n}"]
    lines += [f"{i} {j} {float(g.entries[i, j])!r}" for i, j in zip(iu, ju)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_edgelist(path) -> Gso:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("n="):
        raise ValueError(f"{path}: missing 'n=<N>' header")
    n = int(lines[0][2:])
    m = np.zeros((n, n))
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'i j w'")
        i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
        m[i, j] = m[j, i] = w
    return Gso(m)
