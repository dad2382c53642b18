"""Compiled inner loops shared by the index, the pilot stages and the harness.

Everything here works on plain numpy arrays so that the Python-level modules
own the data types and these functions stay backend-agnostic.  All kernels
are ``nogil`` so a thread pool can run query chunks concurrently.
"""

import numpy as np
from numba import njit, prange

# visited-set modes understood by ``search_core``
VISIT_EXACT = 0
VISIT_BLOOM = 1
VISIT_BLOOM_ALL_POSITIVE = 2

_U64 = np.uint64

# reassociation for vectorised sums; NaN/Inf semantics kept (NaN marks unknown seed distances)
FAST = {"reassoc", "contract", "arcp", "nsz"}


@njit(cache=True, nogil=True, fastmath=FAST)
def sqdist(a, b):
    s = np.float32(0.0)
    for i in range(a.shape[0]):
        t = a[i] - b[i]
        s += t * t
    return s


@njit(cache=True, nogil=True, fastmath=FAST)
def sqdist_split(p, r, qp, qr, u):
    """Full squared distance of row ``u`` as primary part plus residual part."""
    return sqdist(p[u], qp) + sqdist(r[u], qr)


@njit(cache=True, nogil=True)
def sqdist_exact(a, b):
    # sequential float64 accumulation, no reassociation: reproducible bit-for-bit
    s = 0.0
    for i in range(a.shape[0]):
        t = np.float64(a[i]) - np.float64(b[i])
        s += t * t
    return s


# ---------------------------------------------------------------- bloom filter


@njit(cache=True, nogil=True)
def splitmix64(x):
    z = (x + _U64(0x9E3779B97F4A7C15)) & _U64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)) & _U64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)) & _U64(0xFFFFFFFFFFFFFFFF)
    return z ^ (z >> _U64(31))


@njit(cache=True, nogil=True)
def bloom_add(bits, nbits, nhash, key):
    h = splitmix64(_U64(key))
    h1 = h & _U64(0xFFFFFFFF)
    h2 = (h >> _U64(32)) | _U64(1)
    for i in range(nhash):
        pos = (h1 + _U64(i) * h2) % _U64(nbits)
        bits[pos >> _U64(6)] |= _U64(1) << (pos & _U64(63))


@njit(cache=True, nogil=True)
def bloom_test(bits, nbits, nhash, key):
    h = splitmix64(_U64(key))
    h1 = h & _U64(0xFFFFFFFF)
    h2 = (h >> _U64(32)) | _U64(1)
    for i in range(nhash):
        pos = (h1 + _U64(i) * h2) % _U64(nbits)
        if (bits[pos >> _U64(6)] >> (pos & _U64(63))) & _U64(1) == _U64(0):
            return False
    return True


# ------------------------------------------------------------- candidate queue


@njit(cache=True, nogil=True)
def queue_insert(qd, qi, qc, size, cap, d, v):
    """Insert (d, v) into the (distance, id)-sorted queue, keeping at most ``cap``.

    Returns the new size.  Entries past ``cap`` fall off the end, which is the
    same as inserting everything and then resizing to ``cap``.
    """
    if size == cap:
        wd = qd[size - 1]
        if d > wd or (d == wd and v > qi[size - 1]):
            return size
    lo = 0
    hi = size
    while lo < hi:
        mid = (lo + hi) >> 1
        if qd[mid] < d or (qd[mid] == d and qi[mid] < v):
            lo = mid + 1
        else:
            hi = mid
    end = size if size < cap else cap - 1
    for j in range(end, lo, -1):
        qd[j] = qd[j - 1]
        qi[j] = qi[j - 1]
        qc[j] = qc[j - 1]
    qd[lo] = d
    qi[lo] = v
    qc[lo] = False
    if size < cap:
        size += 1
    return size


# ------------------------------------------------------------- greedy search


@njit(cache=True, nogil=True, fastmath=FAST)
def search_core(offsets, neighbors, prim, resid, qp, qr,
                seed_ids, seed_d, ef, max_expansions,
                visit_mode, tags, tag, bits, nbits, nhash,
                out_d, out_i, vis_log):
    """Best-first traversal over a CSR graph.

    ``seed_d`` holds already-known distances for the seeds; NaN entries are
    computed here and counted.  Seeds are inserted into the queue and marked
    visited before the loop.  The loop repeatedly expands the first unchecked
    queue entry until none is left or ``max_expansions`` (>= 0) is reached.
    Ids whose distance is computed during expansion are appended to
    ``vis_log`` while it has room.

    Returns (queue size, distance computations, expansions, ids logged).
    """
    cap = ef
    qd = np.empty(cap, np.float32)
    qi = np.empty(cap, np.int32)
    qc = np.zeros(cap, np.bool_)
    size = 0
    ndist = 0
    for s in range(seed_ids.shape[0]):
        u = seed_ids[s]
        # seeds bypass the visited test (they may be pre-visited); only dedupe
        dup = False
        for j in range(size):
            if qi[j] == u:
                dup = True
                break
        if dup:
            continue
        if visit_mode == VISIT_EXACT:
            tags[u] = tag
        else:
            bloom_add(bits, nbits, nhash, u)
        d = seed_d[s]
        if np.isnan(d):
            d = sqdist(prim[u], qp) + sqdist(resid[u], qr)
            ndist += 1
        size = queue_insert(qd, qi, qc, size, cap, np.float32(d), u)

    hops = 0
    nlog = 0
    while max_expansions < 0 or hops < max_expansions:
        p = -1
        for j in range(size):
            if not qc[j]:
                p = j
                break
        if p < 0:
            break
        qc[p] = True
        u = qi[p]
        hops += 1
        for e in range(offsets[u], offsets[u + 1]):
            v = neighbors[e]
            if visit_mode == VISIT_EXACT:
                if tags[v] == tag:
                    continue
                tags[v] = tag
            elif visit_mode == VISIT_BLOOM:
                if bloom_test(bits, nbits, nhash, v):
                    continue
                bloom_add(bits, nbits, nhash, v)
            else:
                continue
            d = sqdist(prim[v], qp) + sqdist(resid[v], qr)
            if nlog < vis_log.shape[0]:
                vis_log[nlog] = v
                nlog += 1
            ndist += 1
            size = queue_insert(qd, qi, qc, size, cap, d, v)
    for j in range(size):
        out_d[j] = qd[j]
        out_i[j] = qi[j]
    return size, ndist, hops, nlog


@njit(cache=True, nogil=True)
def batch_search(offsets, neighbors, prim, resid, qprim, qresid,
                 seed_ids, seed_d, seed_len, ef, max_expansions,
                 visit_mode, pre_visited, pre_len, nbits, nhash, bloom_preload, preload_len,
                 out_d, out_i, out_len, out_ndist, out_hops, out_vis, out_vis_len):
    """Run ``search_core`` for a chunk of queries.

    Seeds, pre-visited ids and bloom preloads are ragged per query, padded to
    rectangular arrays with their used lengths given separately.  ``out_vis``
    receives each query's expansion-visited ids (zero columns disables it).
    """
    n = offsets.shape[0] - 1
    tags = np.zeros(n, np.int32)
    nwords = (nbits + 63) // 64 if visit_mode != VISIT_EXACT else 1
    bits = np.zeros(nwords, np.uint64)
    for i in range(qprim.shape[0]):
        tag = i + 1
        if visit_mode == VISIT_EXACT:
            for j in range(pre_len[i]):
                tags[pre_visited[i, j]] = tag
        else:
            bits[:] = 0
            for j in range(preload_len[i]):
                bloom_add(bits, nbits, nhash, bloom_preload[i, j])
        size, nd, hops, nlog = search_core(
            offsets, neighbors, prim, resid, qprim[i], qresid[i],
            seed_ids[i, :seed_len[i]], seed_d[i, :seed_len[i]], ef, max_expansions,
            visit_mode, tags, tag, bits, nbits, nhash, out_d[i], out_i[i], out_vis[i])
        out_vis_len[i] = nlog
        out_len[i] = size
        out_ndist[i] = nd
        out_hops[i] = hops


# ------------------------------------------------------------- graph building


@njit(cache=True, nogil=True, fastmath=FAST)
def _select_neighbors(vectors, node, cand_d, cand_i, ncand, M, out):
    """Occlusion pruning: drop a candidate when a kept neighbor is closer to it than ``node`` is."""
    kept = 0
    for c in range(ncand):
        v = cand_i[c]
        if v == node:
            continue
        dv = cand_d[c]
        ok = True
        for s in range(kept):
            if sqdist(vectors[v], vectors[out[s]]) < dv:
                ok = False
                break
        if ok:
            out[kept] = v
            kept += 1
            if kept == M:
                break
    return kept


@njit(cache=True, nogil=True, fastmath=FAST)
def build_core(vectors, order, M, ef_construction):
    """Incremental insertion in ``order``; returns fixed-stride adjacency and degrees."""
    n = vectors.shape[0]
    adj = np.full((n, M), -1, np.int32)
    deg = np.zeros(n, np.int32)
    tags = np.zeros(n, np.int32)
    cap = max(ef_construction, M)
    qd = np.empty(cap, np.float32)
    qi = np.empty(cap, np.int32)
    sel = np.empty(M, np.int32)
    pd = np.empty(M + 1, np.float32)
    pi = np.empty(M + 1, np.int32)
    pc = np.zeros(M + 1, np.bool_)
    seed = np.empty(1, np.int32)
    seed[0] = order[0]
    for t in range(1, n):
        x = order[t]
        size, _, _ = _search_adj(adj, deg, vectors, vectors[x], seed, cap, tags, t, qd, qi)
        k = _select_neighbors(vectors, x, qd, qi, size, M, sel)
        for j in range(k):
            adj[x, j] = sel[j]
        deg[x] = k
        for j in range(k):
            s = sel[j]
            if deg[s] < M:
                adj[s, deg[s]] = x
                deg[s] += 1
                continue
            # overflow: re-prune s's list together with x
            m = 0
            for e in range(M):
                w = adj[s, e]
                m = queue_insert(pd, pi, pc, m, M + 1, sqdist(vectors[s], vectors[w]), w)
            m = queue_insert(pd, pi, pc, m, M + 1, sqdist(vectors[s], vectors[x]), x)
            deg[s] = _reprune(vectors, s, pd, pi, m, M, adj)
    return adj, deg


@njit(cache=True, nogil=True, fastmath=FAST)
def _reprune(vectors, s, pd, pi, m, M, adj):
    kept = 0
    for c in range(m):
        v = pi[c]
        dv = pd[c]
        ok = True
        for j in range(kept):
            if sqdist(vectors[v], vectors[adj[s, j]]) < dv:
                ok = False
                break
        if ok:
            adj[s, kept] = v
            kept += 1
            if kept == M:
                break
    for j in range(kept, M):
        adj[s, j] = -1
    return kept


@njit(cache=True, nogil=True, fastmath=FAST)
def _search_adj(adj, deg, vectors, q, seeds, ef, tags, tag, qd, qi):
    """Greedy search over the fixed-stride build-time adjacency."""
    qc = np.zeros(ef, np.bool_)
    size = 0
    nd = 0
    for s in range(seeds.shape[0]):
        u = seeds[s]
        if tags[u] == tag:
            continue
        tags[u] = tag
        size = queue_insert(qd, qi, qc, size, ef, sqdist(vectors[u], q), u)
        nd += 1
    hops = 0
    while True:
        p = -1
        for j in range(size):
            if not qc[j]:
                p = j
                break
        if p < 0:
            break
        qc[p] = True
        u = qi[p]
        hops += 1
        for e in range(deg[u]):
            v = adj[u, e]
            if tags[v] == tag:
                continue
            tags[v] = tag
            size = queue_insert(qd, qi, qc, size, ef, sqdist(vectors[v], q), v)
            nd += 1
    return size, nd, hops


# --------------------------------------------------------------- brute force


@njit(cache=True, nogil=True)
def exact_rows(base, q, ids, out):
    for j in range(ids.shape[0]):
        out[j] = sqdist_exact(base[ids[j]], q)


@njit(cache=True, nogil=True)
def exact_all(base, q, out):
    for j in range(base.shape[0]):
        out[j] = sqdist_exact(base[j], q)


# ------------------------------------------------------------ fast entry selection

TILE = 32


@njit(cache=True, parallel=True, fastmath=False)
def tiled_cell_distances(queries, routed, ev, cell_off, q_off, out):
    """Cluster-centric tiled distance kernel.

    One work unit per cell.  Within a cell, entries and dimensions are walked
    in tiles of 32; every query is visited per tile and skipped unless it was
    routed to this cell.  Partial squared distances accumulate into ``out``,
    laid out per query as the distances to its cell's entries in cell order
    (``q_off`` gives each query's start).  Returns evaluations per cell.
    """
    r = cell_off.shape[0] - 1
    m = queries.shape[0]
    d = queries.shape[1]
    work = np.zeros(r, np.int64)
    for block in prange(r):
        c0 = cell_off[block]
        c1 = cell_off[block + 1]
        cnt = 0
        for j0 in range(c0, c1, TILE):
            j1 = min(j0 + TILE, c1)
            for k0 in range(0, d, TILE):
                k1 = min(k0 + TILE, d)
                for i in range(m):
                    if routed[i] != block:
                        continue
                    base = q_off[i] - c0
                    for j in range(j0, j1):
                        part = np.float32(0.0)
                        for k in range(k0, k1):
                            t = queries[i, k] - ev[j, k]
                            part += t * t
                        out[base + j] += part
                        if k0 == 0:
                            cnt += 1
        work[block] = cnt
    return work
