"""Fast entry selection: coarse cells over candidate entry vectors.

Entry vectors are clustered into ``r`` cells.  A query is routed to its
nearest centroid and only the entries of that cell are scored, in a
cell-major tiled pass that skips queries routed elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K

__all__ = [
    "EntryIndex",
    "EntryResult",
    "kmeans",
    "train_entry_index",
    "route_queries",
    "tiled_entry_distances",
    "count_fes_work",
]


@dataclass(frozen=True)
class EntryIndex:
    centroids: np.ndarray      # r x d'
    cell_offsets: np.ndarray   # r + 1, into entry_ids / entry_vectors
    entry_ids: np.ndarray      # member ids grouped by cell, ascending within a cell
    entry_vectors: np.ndarray  # matching rows, float32

    @property
    def r(self) -> int:
        return self.centroids.shape[0]

    def cell(self, c: int) -> np.ndarray:
        return self.entry_ids[self.cell_offsets[c]:self.cell_offsets[c + 1]]

    def cell_sizes(self) -> np.ndarray:
        return np.diff(self.cell_offsets)

    @property
    def cell_members(self) -> list:
        return [self.cell(c) for c in range(self.r)]


@dataclass
class EntryResult:
    ids: list                  # per query, int32 array of up to e entry ids
    distances: list            # per query, float32 squared primary distances (ascending)
    routed: np.ndarray         # per query cell id
    evaluations: int           # query-entry pairs scored
    per_query: np.ndarray      # pairs scored per query (= routed cell size)


def _sqdist_matrix(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    X = X.astype(np.float64)
    C = C.astype(np.float64)
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X: np.ndarray, r: int, rng) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = _sqdist_matrix(X, centers[0][None, :])[:, 0]
    for _ in range(1, r):
        tot = d2.sum()
        if tot <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * tot, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sqdist_matrix(X, X[idx][None, :])[:, 0])
    return np.array(centers, np.float64)


def kmeans(X: np.ndarray, r: int, iters: int = 25, seed: int = 0):
    """k-means++ seeding then ``iters`` Lloyd rounds.

    An empty cluster is re-seeded with the point of the largest cluster that
    is farthest from that cluster's centroid.  The last step is an update, so
    every returned centroid is the mean of its returned cell.
    Returns (centroids, labels).
    """
    X = np.asarray(X, np.float64)
    n = X.shape[0]
    if n < r:
        raise ValueError(f"need at least r={r} points, got {n}")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, r, rng)
    labels = np.zeros(n, np.int64)
    for _ in range(max(iters, 1)):
        D = _sqdist_matrix(X, C)
        labels = D.argmin(1)
        sizes = np.bincount(labels, minlength=r)
        for c in np.flatnonzero(sizes == 0):
            big = int(np.argmax(sizes))
            pts = np.flatnonzero(labels == big)
            far = pts[int(np.argmax(D[pts, big]))]
            labels[far] = c
            sizes[big] -= 1
            sizes[c] = 1
        for c in range(r):
            C[c] = X[labels == c].mean(0)
    return C, labels


def train_entry_index(member_ids, member_vectors, r: int = 32, iters: int = 25,
                      seed: int = 0) -> EntryIndex:
    member_ids = np.asarray(member_ids, np.int32)
    V = np.asarray(member_vectors, np.float32)
    if V.shape[0] != member_ids.size:
        raise ValueError("one vector per member id is required")
    if member_ids.size < r:
        raise ValueError(f"{member_ids.size} members cannot fill r={r} cells")
    C, labels = kmeans(V, r, iters, seed)
    order = np.lexsort((member_ids, labels))
    off = np.zeros(r + 1, np.int64)
    np.cumsum(np.bincount(labels, minlength=r), out=off[1:])
    return EntryIndex(C.astype(np.float32), off, member_ids[order],
                      np.ascontiguousarray(V[order]))


def route_queries(index: EntryIndex, queries_primary) -> np.ndarray:
    """Nearest centroid per query; ties go to the lower cell id."""
    Q = np.asarray(queries_primary, np.float32)
    if Q.ndim == 1:
        Q = Q[None, :]
    if Q.shape[1] != index.centroids.shape[1]:
        raise ValueError(f"query dim {Q.shape[1]} != centroid dim {index.centroids.shape[1]}")
    out = np.empty(Q.shape[0], np.int32)
    C = index.centroids.astype(np.float64)
    for s in range(0, Q.shape[0], 1024):
        diff = Q[s:s + 1024, None, :].astype(np.float64) - C[None, :, :]
        out[s:s + 1024] = np.einsum("mrd,mrd->mr", diff, diff).argmin(1)
    return out


def tiled_entry_distances(index: EntryIndex, queries_primary, routed=None,
                          e: int = 64) -> EntryResult:
    """Score each query against every entry of its routed cell, keep the best ``e``."""
    Q = np.ascontiguousarray(queries_primary, np.float32)
    if Q.ndim == 1:
        Q = Q[None, :]
    if routed is None:
        routed = route_queries(index, Q)
    routed = np.ascontiguousarray(routed, np.int32)
    sizes = index.cell_sizes()
    per_query = sizes[routed]
    q_off = np.zeros(Q.shape[0] + 1, np.int64)
    np.cumsum(per_query, out=q_off[1:])
    out = np.zeros(int(q_off[-1]), np.float32)
    work = K.tiled_cell_distances(Q, routed, index.entry_vectors, index.cell_offsets, q_off, out)
    ids, dists = [], []
    for i in range(Q.shape[0]):
        c = routed[i]
        dd = out[q_off[i]:q_off[i + 1]]
        cid = index.cell(c)
        if dd.size > e:
            part = np.argpartition(dd, e - 1)[:e]
            # keep everything tied with the e-th value so the id tie-break is exact
            part = np.flatnonzero(dd <= dd[part].max())
            dd, cid = dd[part], cid[part]
        o = np.lexsort((cid, dd))[:e]
        ids.append(cid[o].astype(np.int32))
        dists.append(dd[o].astype(np.float32))
    return EntryResult(ids, dists, routed, int(work.sum()), per_query.astype(np.int64))


def count_fes_work(m: int, n: int, d: int, r: int) -> dict:
    """Closed-form FES cost with balanced cells of n / r entries.

    One squared difference counts as one computation.  Memory reads are the
    queries plus the entries of the cells that are active; with ``m`` queries
    at most ``min(m, r)`` cells are active, so a single query touches one
    cell and a full batch touches all of them.
    """
    if min(m, n, d, r) < 1:
        raise ValueError("m, n, d, r must be positive")
    comp = m * n * d / r
    active = min(m, r)
    reads = m * d + active * (n / r) * d
    return {"computations": comp, "memory_reads": reads, "density": comp / reads}
