"""Sampled pilot subgraph that keeps the full graph's id space.

Non-sampled nodes stay in the CSR arrays with an empty adjacency row, so an
id found on the subgraph indexes the full graph and the full vectors directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset_io import FlatVectorSet
from .graph_index import CsrGraph, build_graph
from .svd_transform import SplitVectors

__all__ = [
    "PilotSubgraph",
    "SamplingTrace",
    "sample_nodes",
    "reconnect",
    "attach_primary",
    "build_pilot_subgraph",
    "memory_estimate",
]


@dataclass(frozen=True)
class PilotSubgraph:
    graph: CsrGraph
    member_flags: np.ndarray         # bool, node_count
    primary_vectors: np.ndarray | None  # node_count x d', zero rows for non-members
    sampling_ratio: float

    @property
    def node_count(self) -> int:
        return self.graph.node_count

    @property
    def members(self) -> np.ndarray:
        return np.flatnonzero(self.member_flags).astype(np.int32)

    @property
    def member_count(self) -> int:
        return int(self.member_flags.sum())

    def check_invariants(self) -> None:
        deg = self.graph.degrees()
        if np.any(deg[~self.member_flags] != 0):
            raise AssertionError("a non-member has outgoing edges")
        if self.graph.neighbors.size and not self.member_flags[self.graph.neighbors].all():
            raise AssertionError("an edge points to a non-member")
        if self.primary_vectors is not None and np.any(self.primary_vectors[~self.member_flags]):
            raise AssertionError("a non-member primary row is not zero")


@dataclass(frozen=True)
class SamplingTrace:
    rounds: int
    seeds: np.ndarray       # ids that joined as seeds (after truncation)


def sample_nodes(full: CsrGraph, ratio: float, seed: int = 0, batch_frac: float = 0.01,
                 return_trace: bool = False):
    """Seed-and-expand sampling up to ``ratio`` of the nodes.

    Each round draws ``batch_frac`` of the nodes uniformly from the current
    non-members as seeds and adds them plus their 1-hop out-neighbors.  Rounds
    repeat until the member count reaches the target, then the last round's
    additions are thinned uniformly so the count hits the target exactly.
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"sampling ratio must be in (0, 1], got {ratio}")
    n = full.node_count
    target = min(n, max(1, int(round(ratio * n))))
    flags = np.zeros(n, bool)
    is_seed = np.zeros(n, bool)
    if target == n:
        flags[:] = True
        return (flags, SamplingTrace(0, np.zeros(0, np.int32))) if return_trace else flags
    rng = np.random.default_rng(seed)
    per_round = max(1, int(round(batch_frac * n)))
    count = 0
    rounds = 0
    while count < target:
        rounds += 1
        pool = np.flatnonzero(~flags)
        seeds = rng.choice(pool, size=min(per_round, pool.size), replace=False)
        frontier = np.concatenate([full.neighbors_of(s) for s in seeds]) if seeds.size else seeds
        added = np.unique(np.concatenate([seeds, frontier]))
        added = added[~flags[added]]
        if count + added.size > target:
            added = rng.choice(added, size=target - count, replace=False)
        flags[added] = True
        is_seed[np.intersect1d(seeds, added)] = True
        count += added.size
    if return_trace:
        return flags, SamplingTrace(rounds, np.flatnonzero(is_seed).astype(np.int32))
    return flags


def reconnect(full_vectors: FlatVectorSet, member_flags: np.ndarray, M: int = 32,
              ef_construction: int = 200, seed: int = 0) -> CsrGraph:
    """Fresh graph build over the member vectors, scattered back into full id space."""
    members = np.flatnonzero(member_flags)
    if members.size < 1:
        raise ValueError("subgraph needs at least one member")
    n = full_vectors.count
    if members.size == 1:
        return CsrGraph(np.zeros(n + 1, np.int64), np.zeros(0, np.int32), M)
    local = build_graph(full_vectors.subset(members), M, ef_construction, seed)
    deg = np.zeros(n, np.int64)
    deg[members] = local.degrees()
    off = np.zeros(n + 1, np.int64)
    np.cumsum(deg, out=off[1:])
    # members are ascending, so local rows already sit in global order
    return CsrGraph(off, members[local.neighbors].astype(np.int32), M)


def attach_primary(graph: CsrGraph, member_flags: np.ndarray, split: SplitVectors,
                   sampling_ratio: float | None = None) -> PilotSubgraph:
    if split.count != graph.node_count:
        raise ValueError(f"split has {split.count} rows for {graph.node_count} nodes")
    prim = np.zeros_like(split.primary)
    prim[member_flags] = split.primary[member_flags]
    ratio = float(member_flags.mean()) if sampling_ratio is None else sampling_ratio
    return PilotSubgraph(graph, member_flags, prim, ratio)


def build_pilot_subgraph(full: CsrGraph, full_vectors: FlatVectorSet, split: SplitVectors,
                         ratio: float, M: int = 32, ef_construction: int = 200,
                         seed: int = 0) -> PilotSubgraph:
    flags = sample_nodes(full, ratio, seed)
    g = reconnect(full_vectors, flags, M, ef_construction, seed)
    return attach_primary(g, flags, split, ratio)


def memory_estimate(node_count: int, dim: int, primary_dim: int, sampling_ratio: float,
                    max_degree: int = 32) -> dict:
    """Byte estimates for the pilot data versus the full vectors.

    ``resident`` is the layout held here (every row kept, non-member rows
    zero).  ``accelerator`` drops non-member vector rows and counts member
    adjacency at the full degree budget, keeping every CSR offset.
    """
    members = sampling_ratio * node_count
    csr = 8 * (node_count + 1) + 4 * max_degree * members
    full_vectors = 4.0 * node_count * dim
    resident = 4.0 * node_count * primary_dim + csr
    accelerator = 4.0 * members * primary_dim + csr
    return {
        "full_vector_bytes": full_vectors,
        "csr_bytes": csr,
        "resident_bytes": resident,
        "accelerator_bytes": accelerator,
        "resident_fraction": resident / full_vectors,
        "accelerator_fraction": accelerator / full_vectors,
    }
