"""Proximity graph in CSR form and the canonical best-first search over it."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .dataset_io import FlatVectorSet, GroundTruth, recall_at_k

__all__ = [
    "CsrGraph",
    "CandidateQueue",
    "SearchStats",
    "build_graph",
    "csr_from_lists",
    "greedy_search",
    "batch_greedy_search",
    "default_entries",
    "save_graph",
    "load_graph",
    "UnreachableTarget",
    "computations_at_recall",
    "seeded_curve",
    "measure_acceleration_threshold",
    "tau_grid",
]


@dataclass(frozen=True)
class CsrGraph:
    offsets: np.ndarray    # int64, node_count + 1
    neighbors: np.ndarray  # int32
    max_degree: int

    @property
    def node_count(self) -> int:
        return self.offsets.shape[0] - 1

    def degree(self, u: int) -> int:
        return int(self.offsets[u + 1] - self.offsets[u])

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors_of(self, u: int) -> np.ndarray:
        return self.neighbors[self.offsets[u]:self.offsets[u + 1]]

    def nbytes(self) -> int:
        return self.offsets.nbytes + self.neighbors.nbytes

    def validate(self) -> None:
        """Raise ``ValueError`` on any CSR invariant violation."""
        off, nb, n = self.offsets, self.neighbors, self.node_count
        if off[0] != 0 or off[-1] != nb.shape[0]:
            raise ValueError("offsets must start at 0 and end at len(neighbors)")
        if np.any(np.diff(off) < 0):
            raise ValueError("offsets must be non-decreasing")
        if np.any(np.diff(off) > self.max_degree):
            raise ValueError(f"a node exceeds max degree {self.max_degree}")
        if nb.size and (nb.min() < 0 or nb.max() >= n):
            raise ValueError("neighbor id out of range")
        for u in range(n):
            row = nb[off[u]:off[u + 1]]
            if np.any(row == u):
                raise ValueError(f"self-loop at node {u}")
            if np.unique(row).size != row.size:
                raise ValueError(f"duplicate neighbors at node {u}")


def csr_from_lists(lists, max_degree: int | None = None) -> CsrGraph:
    lists = [np.asarray(x, np.int32) for x in lists]
    deg = np.array([len(x) for x in lists], np.int64)
    off = np.zeros(len(lists) + 1, np.int64)
    np.cumsum(deg, out=off[1:])
    nb = np.concatenate(lists).astype(np.int32) if lists and off[-1] else np.zeros(0, np.int32)
    return CsrGraph(off, nb, int(max_degree if max_degree is not None else (deg.max() if deg.size else 0)))


def _csr_from_adj(adj: np.ndarray, deg: np.ndarray, M: int) -> CsrGraph:
    off = np.zeros(adj.shape[0] + 1, np.int64)
    np.cumsum(deg, out=off[1:])
    mask = np.arange(adj.shape[1])[None, :] < deg[:, None]
    return CsrGraph(off, adj[mask].astype(np.int32), M)


def build_graph(vectors: FlatVectorSet, M: int = 32, ef_construction: int = 200,
                seed: int = 0) -> CsrGraph:
    """Single-layer navigable graph by incremental insertion.

    Nodes are inserted in a seeded random order.  Each new node searches the
    graph built so far (from the first inserted node, queue size
    ``ef_construction``) and keeps up to M candidates that survive occlusion
    pruning; links are made in both directions, and a neighbor that overflows
    M is re-pruned with the same rule.
    """
    if vectors.count < 1:
        raise ValueError("cannot build a graph over zero vectors")
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(vectors.count).astype(np.int32)
    adj, deg = K.build_core(vectors.data, order, M, max(ef_construction, 1))
    return _csr_from_adj(adj, deg, M)


# --------------------------------------------------------------------- search


@dataclass
class SearchStats:
    distance_computations: int = 0
    hops: int = 0

    def add(self, ndist: int, hops: int) -> None:
        self.distance_computations += int(ndist)
        self.hops += int(hops)


@dataclass
class CandidateQueue:
    """Bounded best-first queue ordered by (distance, id)."""

    capacity: int
    ids: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    checked: list = field(default_factory=list)

    def insert(self, v: int, d: float) -> None:
        if v in self.ids:
            return
        # bisect on (distance, id)
        lo, hi = 0, len(self.ids)
        while lo < hi:
            mid = (lo + hi) // 2
            if (self.distances[mid], self.ids[mid]) < (d, v):
                lo = mid + 1
            else:
                hi = mid
        self.ids.insert(lo, v)
        self.distances.insert(lo, d)
        self.checked.insert(lo, False)

    def resize(self, ef: int | None = None) -> None:
        ef = self.capacity if ef is None else ef
        del self.ids[ef:], self.distances[ef:], self.checked[ef:]

    def first_unchecked(self) -> int:
        for j, c in enumerate(self.checked):
            if not c:
                return j
        return -1

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_arrays(cls, ids, distances, capacity) -> "CandidateQueue":
        q = cls(capacity)
        q.ids = [int(x) for x in ids]
        q.distances = [float(x) for x in distances]
        q.checked = [True] * len(q.ids)
        return q


def default_entries(node_count: int, count: int = 16, seed: int = 0,
                    pool: np.ndarray | None = None) -> np.ndarray:
    """Node 0 (or the first pool member) plus ``count - 1`` fixed pseudo-random others."""
    pool = np.arange(node_count) if pool is None else np.asarray(pool)
    if pool.size == 0:
        raise ValueError("empty entry pool")
    rng = np.random.default_rng(seed)
    rest = pool[1:]
    extra = rng.choice(rest, size=min(count - 1, rest.size), replace=False) if rest.size else rest
    return np.concatenate([pool[:1], extra]).astype(np.int32)


def _empty_cols(n: int) -> np.ndarray:
    return np.zeros((n, 0), np.float32)


def _is_flat(x) -> bool:
    if isinstance(x, np.ndarray):
        return x.ndim == 1
    return len(x) > 0 and np.isscalar(x[0])


def _pad(rows, width=None, dtype=np.int32, fill=0):
    lens = np.array([len(r) for r in rows], np.int64)
    w = int(width if width is not None else max(1, lens.max() if lens.size else 1))
    out = np.full((len(rows), max(w, 1)), fill, dtype)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out, lens


def batch_greedy_search(graph: CsrGraph, vectors, queries, entries, ef: int,
                        residual=None, query_residual=None, entry_distances=None,
                        visited=None, max_expansions: int = -1,
                        visit_mode: int = K.VISIT_EXACT, bloom_bits: int = 0,
                        bloom_hashes: int = 4, bloom_preload=None, log_visited: int = 0):
    """Run Algorithm-1 search for every query row; the kernel-facing entry point.

    ``entries`` is one id array shared by all queries or one per query.
    ``entry_distances`` (same raggedness, NaN = unknown) supplies seed
    distances that are already known and therefore not recomputed or counted.
    ``residual``/``query_residual`` add a second sub-space to the distance.

    Returns (ids, distances, lengths, ndist, hops) with ids/distances padded
    to ``ef`` columns.  With ``log_visited > 0`` a sixth element, a list of
    the ids evaluated during expansion per query (up to that many), is added.
    """
    V = vectors.data if isinstance(vectors, FlatVectorSet) else vectors
    Qm = queries.data if isinstance(queries, FlatVectorSet) else np.asarray(queries, np.float32)
    if Qm.ndim == 1:
        Qm = Qm[None, :]
    m = Qm.shape[0]
    if ef < 1:
        raise ValueError("ef must be >= 1")
    if Qm.shape[1] != V.shape[1]:
        raise ValueError(f"query dim {Qm.shape[1]} != vector dim {V.shape[1]}")
    R = _empty_cols(V.shape[0]) if residual is None else residual
    QR = _empty_cols(m) if query_residual is None else np.asarray(query_residual, np.float32)
    n = graph.node_count

    if _is_flat(entries):
        entries = [np.asarray(entries, np.int32)] * m
    seeds, seed_len = _pad(entries)
    if seeds.size and (seeds.min() < 0 or seeds.max() >= n):
        raise ValueError("entry id out of range")
    if np.any(seed_len == 0):
        raise ValueError("every query needs at least one entry point")
    if entry_distances is None:
        seed_d = np.full(seeds.shape, np.nan, np.float32)
    else:
        if _is_flat(entry_distances):
            entry_distances = [entry_distances] * m
        seed_d, _ = _pad(entry_distances, seeds.shape[1], np.float32, np.nan)
    if visited is None:
        pre, pre_len = np.zeros((m, 1), np.int32), np.zeros(m, np.int64)
    else:
        pre, pre_len = _pad(visited)
    if bloom_preload is None:
        pl, pl_len = np.zeros((m, 1), np.int32), np.zeros(m, np.int64)
    else:
        pl, pl_len = _pad(bloom_preload)

    out_d = np.full((m, ef), np.inf, np.float32)
    out_i = np.full((m, ef), -1, np.int32)
    out_len = np.zeros(m, np.int64)
    ndist = np.zeros(m, np.int64)
    hops = np.zeros(m, np.int64)
    vis = np.zeros((m, max(log_visited, 0)), np.int32)
    vis_len = np.zeros(m, np.int64)
    K.batch_search(graph.offsets, graph.neighbors, V, R, Qm, QR,
                   seeds, seed_d, seed_len, ef, max_expansions,
                   visit_mode, pre, pre_len, max(bloom_bits, 64), bloom_hashes, pl, pl_len,
                   out_d, out_i, out_len, ndist, hops, vis, vis_len)
    if log_visited > 0:
        return out_i, out_d, out_len, ndist, hops, [vis[i, :vis_len[i]] for i in range(m)]
    return out_i, out_d, out_len, ndist, hops


def greedy_search(graph: CsrGraph, vectors, q, entries, ef: int, visited=None,
                  stats: SearchStats | None = None) -> CandidateQueue:
    """Algorithm-1 greedy search for a single query.

    Seeds the queue with ``entries``, then expands the first unchecked entry
    until every queued node is checked.  ``visited`` (ids) are skipped during
    expansion.  Every distance evaluation, seeds included, is added to
    ``stats``.
    """
    ids, d, ln, nd, hp = batch_greedy_search(
        graph, vectors, np.asarray(q, np.float32)[None, :], np.asarray(entries, np.int32), ef,
        visited=None if visited is None else [np.fromiter(visited, np.int32)])
    if stats is not None:
        stats.add(nd[0], hp[0])
    return CandidateQueue.from_arrays(ids[0, :ln[0]], d[0, :ln[0]], ef)


# ------------------------------------------------------------- persistence

_GRAPH_MAGIC = b"PCSR"
_GRAPH_VERSION = 1
_GHDR = struct.Struct("<4sIqI")


def save_graph(graph: CsrGraph, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        write_graph(graph, f)


def load_graph(path: str | os.PathLike) -> CsrGraph:
    with open(path, "rb") as f:
        return read_graph(f, path)


def read_graph(f, path="<stream>") -> CsrGraph:
    magic, version, n, M = _GHDR.unpack(f.read(_GHDR.size))
    if magic != _GRAPH_MAGIC:
        raise ValueError(f"{path}: not a graph file")
    if version != _GRAPH_VERSION:
        raise ValueError(f"{path}: unsupported graph version {version}")
    off = np.frombuffer(f.read(8 * (n + 1)), "<i8").astype(np.int64)
    nb = np.frombuffer(f.read(4 * int(off[-1])), "<i4").astype(np.int32)
    return CsrGraph(off, nb, int(M))


def write_graph(graph: CsrGraph, f) -> None:
    f.write(_GHDR.pack(_GRAPH_MAGIC, _GRAPH_VERSION, graph.node_count, graph.max_degree))
    f.write(np.ascontiguousarray(graph.offsets, "<i8").tobytes())
    f.write(np.ascontiguousarray(graph.neighbors, "<i4").tobytes())


# ------------------------------------------------- complexity measurements


class UnreachableTarget(RuntimeError):
    """The recall target is not reached anywhere on a measured curve."""


def computations_at_recall(recalls, computations, target: float) -> float:
    """Computations needed for ``target`` recall, linearly interpolated.

    Points are taken in sweep order; the first bracketing pair is used.
    """
    r = np.asarray(recalls, float)
    c = np.asarray(computations, float)
    if r.size == 0 or r.max() < target:
        raise UnreachableTarget(f"max recall {r.max() if r.size else float('nan'):.4f} < {target}")
    j = int(np.argmax(r >= target))
    if j == 0:
        return float(c[0])
    r0, r1, c0, c1 = r[j - 1], r[j], c[j - 1], c[j]
    if r1 == r0:
        return float(c1)
    return float(c0 + (target - r0) * (c1 - c0) / (r1 - r0))


def tau_grid(step: float = 1 / 16, upper: float = 1.0):
    return [i * step for i in range(int(round(upper / step)) + 1)]


def _seeded_entries(truth_ids: np.ndarray, n: int, ef: int, tau: int, rng) -> list:
    """Per query: tau ids drawn from its true top-ef plus ef - tau random other nodes."""
    rows = []
    for t in truth_ids:
        known = rng.choice(t[:ef], size=tau, replace=False) if tau else np.zeros(0, np.int64)
        others = set(known.tolist())
        rand = []
        while len(rand) < ef - tau:
            for v in rng.integers(0, n, size=2 * (ef - tau - len(rand)) + 4).tolist():
                if v not in others:
                    others.add(v)
                    rand.append(v)
                    if len(rand) == ef - tau:
                        break
        rows.append(np.array(known.tolist() + rand, np.int32))
    return rows


def seeded_curve(graph: CsrGraph, vectors, queries, truth: GroundTruth, tau_frac: float,
                 ef_values, k: int = 10, seed: int = 0):
    """Recall and mean distance computations per ef, seeding the queue with tau
    known true neighbors and ef - tau random nodes (tau = round(tau_frac * ef))."""
    Qm = queries.data if isinstance(queries, FlatVectorSet) else queries
    recalls, comps = [], []
    for ef in ef_values:
        if truth.k < ef:
            raise ValueError(f"ground truth depth {truth.k} < ef {ef}")
        tau = int(round(tau_frac * ef))
        rng = np.random.default_rng([seed, ef, int(round(tau_frac * 1e6))])
        entries = _seeded_entries(truth.ids, graph.node_count, ef, tau, rng)
        ids, _, _, nd, _ = batch_greedy_search(graph, vectors, Qm, entries, ef)
        recalls.append(recall_at_k(ids[:, :k], truth, k))
        comps.append(float(nd.mean()))
    return np.array(recalls), np.array(comps)


def measure_acceleration_threshold(graph: CsrGraph, vectors, queries, truth: GroundTruth,
                                   ef_values, speedup_target: float = 2.0,
                                   target_recall: float = 0.90, k: int = 10,
                                   grid=None, seed: int = 0):
    """Smallest tau/ef on ``grid`` whose computations-to-target-recall fall to
    baseline / speedup_target, where the baseline is the tau = 0 curve.

    Returns (threshold, table) with table rows (tau_frac, computations or None).
    Raises ``UnreachableTarget`` if no grid point achieves the saving.
    """
    grid = tau_grid() if grid is None else list(grid)
    if grid[0] != 0:
        grid = [0.0] + grid
    table = []
    base = None
    for frac in grid:
        r, c = seeded_curve(graph, vectors, queries, truth, frac, ef_values, k, seed)
        try:
            comp = computations_at_recall(r, c, target_recall)
        except UnreachableTarget:
            if frac == 0:
                raise
            comp = None
        if frac == 0:
            base = comp
        table.append((frac, comp))
        if comp is not None and comp <= base / speedup_target:
            return frac, table
    raise UnreachableTarget(
        f"no tau/ef on the grid reaches {speedup_target}x savings at recall {target_recall}")
