"""The three-stage query pipeline.

1. pilot: traversal of the sampled subgraph with primary (reduced) vectors
   and a per-query bloom filter as the visited set;
2. refine: re-rank the pilot candidates with full distances (primary plus
   residual) and run a couple of exact expansions on the subgraph;
3. final: greedy search of the full graph seeded with the refined
   candidates and the ids stage 2 already evaluated.

Every stage is optional; with all of them (and entry selection) off, the
pipeline is a plain greedy search from the default entries.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .backend import ThreadPoolBackend
from .dataset_io import FlatVectorSet
from .entry_selection import EntryIndex, EntryResult, route_queries, tiled_entry_distances
from .graph_index import CsrGraph, batch_greedy_search, default_entries
from .subgraph import PilotSubgraph
from .svd_transform import SplitVectors, SvdModel, transform_split

__all__ = [
    "BloomVisited",
    "StageBudgets",
    "Toggles",
    "SearchCarry",
    "PilotOutput",
    "PipelineResult",
    "stage1_pilot",
    "stage2_refine",
    "stage3_final",
    "PilotEngine",
    "STAGES",
]

STAGES = ("fes", "stage1", "stage2", "stage3")


class BloomVisited:
    """Fixed-size bloom filter over node ids (double hashing on splitmix64).

    ``force_positive`` makes every membership test succeed, the worst case
    for false positives.
    """

    def __init__(self, nbits: int, nhash: int = 4, force_positive: bool = False):
        if nbits < 1 or nhash < 1:
            raise ValueError("nbits and nhash must be positive")
        self.nbits = int(nbits)
        self.nhash = int(nhash)
        self.bits = np.zeros((self.nbits + 63) // 64, np.uint64)
        self.count = 0
        self.force_positive = force_positive

    @classmethod
    def for_ef(cls, ef1: int, **kw) -> "BloomVisited":
        return cls(64 * ef1, 4, **kw)

    def add(self, key: int) -> None:
        K.bloom_add(self.bits, self.nbits, self.nhash, int(key))
        self.count += 1

    def __contains__(self, key) -> bool:
        if self.force_positive:
            return True
        return bool(K.bloom_test(self.bits, self.nbits, self.nhash, int(key)))

    def expected_fp_rate(self, inserted: int | None = None) -> float:
        n = self.count if inserted is None else inserted
        return (1.0 - np.exp(-self.nhash * n / self.nbits)) ** self.nhash


@dataclass(frozen=True)
class StageBudgets:
    ef1: int
    ef2: int
    ef3: int
    refine_iters: int = 2

    @classmethod
    def from_ef3(cls, ef3: int, k: int = 10, refine_iters: int = 2) -> "StageBudgets":
        return cls(max(ef3, k), max(ef3 // 2, k), max(ef3, k), refine_iters)

    def validate(self, k: int) -> None:
        if min(self.ef1, self.ef2, self.ef3) < k:
            raise ValueError(f"every ef must be >= k={k}: {self}")
        if self.refine_iters < 0:
            raise ValueError("refine_iters must be >= 0")


@dataclass(frozen=True)
class Toggles:
    fes: bool = True
    stage1: bool = True
    stage2: bool = True
    pipelining: bool = True

    @classmethod
    def baseline(cls) -> "Toggles":
        return cls(False, False, False, False)


@dataclass
class SearchCarry:
    """Stage-2 to stage-3 handoff for one query."""

    ids: np.ndarray         # ranked candidate ids
    distances: np.ndarray   # their full squared distances, ascending
    visited: np.ndarray     # every id whose full distance stage 2 computed


@dataclass
class PilotOutput:
    ids: list
    distances: list
    ndist: np.ndarray
    hops: np.ndarray


@dataclass
class PipelineResult:
    ids: np.ndarray                       # m x k, -1 padded if fewer found
    distances: np.ndarray                 # m x k
    counters: dict = field(default_factory=dict)   # stage -> per-query computations
    hops: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)    # stage -> wall seconds for the batch

    def mean_counters(self) -> dict:
        return {s: float(np.mean(c)) if len(c) else 0.0 for s, c in self.counters.items()}

    @property
    def total_computations(self) -> float:
        return sum(self.mean_counters().values())


# ------------------------------------------------------------------- stages


def _rows(ids_mat, d_mat, lens):
    return ([ids_mat[i, :lens[i]].copy() for i in range(len(lens))],
            [d_mat[i, :lens[i]].copy() for i in range(len(lens))])


def stage1_pilot(subgraph: PilotSubgraph, q_primary, ef1: int, entries=None,
                 entry_distances=None, backend: ThreadPoolBackend | None = None,
                 visited: str = "bloom", bloom_bits: int | None = None, bloom_hashes: int = 4,
                 bloom_preload=None, force_positive: bool = False) -> PilotOutput:
    """Greedy search of the subgraph in primary space, batch-parallel.

    ``entries`` are member ids (shared or per query); when absent the default
    member entries are used.  ``visited`` is "bloom" (per-query filter of
    ``64 * ef1`` bits) or "exact".  ``bloom_preload`` inserts ids into each
    query's filter before the search, to inject false positives.
    """
    Q = np.ascontiguousarray(q_primary, np.float32)
    m = Q.shape[0]
    if subgraph.primary_vectors is None:
        raise ValueError("subgraph has no primary vectors attached")
    if entries is None:
        entries = default_entries(subgraph.node_count, pool=subgraph.members)
        entry_distances = None
    if visited == "exact":
        mode = K.VISIT_EXACT
    elif visited == "bloom":
        mode = K.VISIT_BLOOM_ALL_POSITIVE if force_positive else K.VISIT_BLOOM
    else:
        raise ValueError(f"unknown visited mode {visited!r}")
    nbits = 64 * ef1 if bloom_bits is None else bloom_bits
    per_query = not (isinstance(entries, np.ndarray) and entries.ndim == 1)
    backend = backend or ThreadPoolBackend(1)

    def run(a, b):
        ent = entries[a:b] if per_query else entries
        ed = None
        if entry_distances is not None:
            ed = entry_distances[a:b] if per_query else entry_distances
        pre = None if bloom_preload is None else bloom_preload[a:b]
        ids, d, ln, nd, hp = batch_greedy_search(
            subgraph.graph, subgraph.primary_vectors, Q[a:b], ent, ef1,
            entry_distances=ed, visit_mode=mode, bloom_bits=nbits,
            bloom_hashes=bloom_hashes, bloom_preload=pre)
        return _rows(ids, d, ln) + (nd, hp)

    parts = backend.map(run, m)
    ids = [x for p in parts for x in p[0]]
    dists = [x for p in parts for x in p[1]]
    return PilotOutput(ids, dists, np.concatenate([p[2] for p in parts]),
                       np.concatenate([p[3] for p in parts]))


def stage2_refine(subgraph: PilotSubgraph, split: SplitVectors, cand_ids: list, q_split: SplitVectors,
                  ef2: int, refine_iters: int = 2, cand_primary=None):
    """Full-distance re-rank of upstream candidates plus ``refine_iters`` expansions.

    ``cand_primary`` (per query) are primary distances already known from
    upstream; they are reused and only residuals are computed.  Without them
    the whole distance is computed.  Either way one computation is counted per
    candidate.  Returns (carries, ndist, hops).
    """
    m = len(cand_ids)
    P, R = split.primary, split.residual
    QP, QR = q_split.primary, q_split.residual
    seeds, seed_d = [], []
    ndist = np.zeros(m, np.int64)
    for i in range(m):
        ids = np.asarray(cand_ids[i], np.int64)
        dr = R[ids] - QR[i]
        full = np.einsum("ij,ij->i", dr, dr)
        if cand_primary is not None and cand_primary[i] is not None:
            full = full + np.asarray(cand_primary[i], np.float32)
        else:
            dp = P[ids] - QP[i]
            full = full + np.einsum("ij,ij->i", dp, dp)
        o = np.lexsort((ids, full))
        seeds.append(ids[o].astype(np.int32))
        seed_d.append(full[o].astype(np.float32))
        ndist[i] = ids.size
    max_deg = max(subgraph.graph.max_degree, 1)
    out_i, out_d, ln, nd, hp, logs = batch_greedy_search(
        subgraph.graph, P, QP, seeds, ef2, residual=R, query_residual=QR,
        entry_distances=seed_d, visited=seeds, max_expansions=refine_iters,
        log_visited=max(1, refine_iters * max_deg))
    carries = []
    for i in range(m):
        visited = np.union1d(seeds[i], logs[i]).astype(np.int32)
        carries.append(SearchCarry(out_i[i, :ln[i]].copy(), out_d[i, :ln[i]].copy(), visited))
    return carries, ndist + nd, hp


def stage3_final(full_graph: CsrGraph, full_vectors: FlatVectorSet, queries, ef3: int, k: int,
                 carries: list | None = None, entries=None, backend: ThreadPoolBackend | None = None):
    """Greedy search of the full graph.

    With ``carries``, each query starts from its carried candidates (full
    distances known, not recomputed) and skips the carried visited ids.
    Otherwise it starts from ``entries`` (per query or shared; default
    entries when None), computing their distances.
    Returns (ids m x k, distances m x k, ndist, hops).
    """
    Q = queries.data if isinstance(queries, FlatVectorSet) else np.asarray(queries, np.float32)
    m = Q.shape[0]
    if ef3 < k:
        raise ValueError("ef3 must be >= k")
    backend = backend or ThreadPoolBackend(1)
    if carries is None and entries is None:
        entries = default_entries(full_graph.node_count)

    def run(a, b):
        if carries is not None:
            cs = carries[a:b]
            res = batch_greedy_search(full_graph, full_vectors, Q[a:b], [c.ids for c in cs], ef3,
                                      entry_distances=[c.distances for c in cs],
                                      visited=[c.visited for c in cs])
        else:
            ent = entries if (isinstance(entries, np.ndarray) and entries.ndim == 1) else entries[a:b]
            res = batch_greedy_search(full_graph, full_vectors, Q[a:b], ent, ef3)
        ids, d, ln, nd, hp = res
        return ids[:, :k], d[:, :k], nd, hp

    parts = backend.map(run, m)
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]), np.concatenate([p[3] for p in parts]))


# ------------------------------------------------------------------- engine


class PilotEngine:
    """All search-time structures plus the stage orchestration.

    Structures are read-only after construction; per-query state lives in
    the kernels, so one engine can serve concurrent batches.
    """

    def __init__(self, graph: CsrGraph, vectors: FlatVectorSet, svd: SvdModel,
                 split: SplitVectors, subgraph: PilotSubgraph, entry_index: EntryIndex | None,
                 backend: ThreadPoolBackend | None = None, fes_e: int | None = None):
        self.graph = graph
        self.vectors = vectors
        self.svd = svd
        self.split = split
        self.subgraph = subgraph
        self.entry_index = entry_index
        self.backend = backend or ThreadPoolBackend()
        self.fes_e = fes_e
        self.default_entries = default_entries(graph.node_count)
        self.member_entries = default_entries(graph.node_count, pool=subgraph.members)

    @property
    def dim(self) -> int:
        return self.vectors.dim

    @property
    def primary_dim(self) -> int:
        return self.split.primary_dim

    def _front(self, Q: np.ndarray, budgets: StageBudgets, toggles: Toggles, res: PipelineResult,
               bloom_preload=None, force_positive=False, pilot_visited="bloom"):
        """Entry selection and stage 1; returns (q_split, upstream ids, upstream primary dists)."""
        m = Q.shape[0]
        need_split = toggles.fes or toggles.stage1 or toggles.stage2
        qs = transform_split(self.svd, Q, self.primary_dim) if need_split else None
        up_ids = up_prim = None
        if toggles.fes and self.entry_index is not None:
            t = time.perf_counter()
            e = self.fes_e or budgets.ef1
            routed = route_queries(self.entry_index, qs.primary)
            er: EntryResult = tiled_entry_distances(self.entry_index, qs.primary, routed, e)
            res.counters["fes"] = er.per_query + self.entry_index.r
            res.seconds["fes"] = time.perf_counter() - t
            # empty cell: fall back to default member entries, distances unknown
            up_ids = [x if x.size else self.member_entries for x in er.ids]
            up_prim = [d if d.size else np.full(self.member_entries.size, np.nan, np.float32)
                       for d in er.distances]
        if toggles.stage1:
            t = time.perf_counter()
            out = stage1_pilot(self.subgraph, qs.primary, budgets.ef1,
                               entries=up_ids, entry_distances=up_prim, backend=self.backend,
                               visited=pilot_visited, bloom_preload=bloom_preload,
                               force_positive=force_positive)
            res.counters["stage1"] = out.ndist
            res.hops["stage1"] = out.hops
            res.seconds["stage1"] = time.perf_counter() - t
            up_ids, up_prim = out.ids, out.distances
        return qs, up_ids, up_prim

    def _back(self, Q, qs, up_ids, up_prim, k, budgets, toggles, res: PipelineResult,
              reuse_primary=True):
        carries = None
        if toggles.stage2 and up_ids is not None:
            t = time.perf_counter()
            prim = None
            if reuse_primary and up_prim is not None:
                prim = [None if np.isnan(d).any() else d for d in up_prim]
            carries, nd, hp = stage2_refine(self.subgraph, self.split, up_ids, qs,
                                            budgets.ef2, budgets.refine_iters, prim)
            res.counters["stage2"] = nd
            res.hops["stage2"] = hp
            res.seconds["stage2"] = time.perf_counter() - t
        t = time.perf_counter()
        if carries is not None:
            ids, d, nd, hp = stage3_final(self.graph, self.vectors, Q, budgets.ef3, k,
                                          carries=carries, backend=self.backend)
        elif up_ids is not None:
            ids, d, nd, hp = stage3_final(self.graph, self.vectors, Q, budgets.ef3, k,
                                          entries=up_ids, backend=self.backend)
        else:
            ids, d, nd, hp = stage3_final(self.graph, self.vectors, Q, budgets.ef3, k,
                                          entries=self.default_entries, backend=self.backend)
        res.counters["stage3"] = nd
        res.hops["stage3"] = hp
        res.seconds["stage3"] = time.perf_counter() - t
        res.ids, res.distances = ids, d
        return res

    def search(self, queries, k: int = 10, budgets: StageBudgets | None = None,
               toggles: Toggles = Toggles(), bloom_preload=None, force_positive: bool = False,
               pilot_visited: str = "bloom", reuse_primary: bool = True) -> PipelineResult:
        """Run entry selection and stages 1-3 for one batch of queries."""
        Q = queries.data if isinstance(queries, FlatVectorSet) else np.asarray(queries, np.float32)
        if Q.ndim == 1:
            Q = Q[None, :]
        budgets = budgets or StageBudgets.from_ef3(64, k)
        budgets.validate(k)
        res = PipelineResult(np.zeros((0, k), np.int32), np.zeros((0, k), np.float32))
        qs, up_ids, up_prim = self._front(Q, budgets, toggles, res, bloom_preload,
                                          force_positive, pilot_visited)
        return self._back(Q, qs, up_ids, up_prim, k, budgets, toggles, res, reuse_primary)

    def search_stream(self, batches, k: int = 10, budgets: StageBudgets | None = None,
                      toggles: Toggles = Toggles()) -> list:
        """Search a sequence of query batches.

        With ``toggles.pipelining`` the front half (entry selection, stage 1)
        of batch i+1 runs on a worker thread while the back half (stages 2-3)
        of batch i runs on the caller thread.  Results come back in order and
        are identical to running the batches one by one.
        """
        budgets = budgets or StageBudgets.from_ef3(64, k)
        budgets.validate(k)
        batches = [b.data if isinstance(b, FlatVectorSet) else np.asarray(b, np.float32)
                   for b in batches]
        if not toggles.pipelining or len(batches) < 2:
            return [self.search(b, k, budgets, toggles) for b in batches]

        handoff: queue.Queue = queue.Queue(maxsize=2)

        def producer():
            try:
                for Q in batches:
                    res = PipelineResult(np.zeros((0, k), np.int32), np.zeros((0, k), np.float32))
                    handoff.put((Q, res, self._front(Q, budgets, toggles, res)))
            except BaseException as exc:  # surfaced on the consumer side
                handoff.put(exc)

        worker = threading.Thread(target=producer, daemon=True)
        worker.start()
        out = []
        for _ in batches:
            item = handoff.get()
            if isinstance(item, BaseException):
                raise item
            Q, res, (qs, up_ids, up_prim) = item
            out.append(self._back(Q, qs, up_ids, up_prim, k, budgets, toggles, res))
        worker.join()
        return out
