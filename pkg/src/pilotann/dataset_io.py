"""Vector-benchmark file formats, synthetic data and exact ground truth."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _kernels as K

__all__ = [
    "FlatVectorSet",
    "GroundTruth",
    "VecsFormatError",
    "MalformedHeaderError",
    "InconsistentDimensionError",
    "TruncatedFileError",
    "load_fvecs",
    "load_ivecs",
    "write_fvecs",
    "write_ivecs",
    "generate_synthetic",
    "brute_force_topk",
    "recall_at_k",
]


class VecsFormatError(ValueError):
    """Base class for fvecs/ivecs decoding failures."""


class MalformedHeaderError(VecsFormatError):
    pass


class InconsistentDimensionError(VecsFormatError):
    pass


class TruncatedFileError(VecsFormatError):
    pass


@dataclass(frozen=True)
class FlatVectorSet:
    """Row-major float32 matrix with its shape spelled out."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError(f"expected a 2-d array, got shape {data.shape}")
        if data.shape[0] and data.shape[1] < 1:
            raise ValueError("dim must be positive")
        if not np.isfinite(data).all():
            raise ValueError("vector data contains NaN or Inf")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.count

    def subset(self, ids) -> "FlatVectorSet":
        return FlatVectorSet(self.data[np.asarray(ids)])


@dataclass(frozen=True)
class GroundTruth:
    """Exact top-k per query: ids (int32) and squared distances (float64)."""

    ids: np.ndarray
    distances: np.ndarray

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    @property
    def count(self) -> int:
        return self.ids.shape[0]

    def truncate(self, k: int) -> "GroundTruth":
        if k > self.k:
            raise ValueError(f"ground truth only has depth {self.k}, asked for {k}")
        return GroundTruth(self.ids[:, :k], self.distances[:, :k])


# ------------------------------------------------------------------ file I/O


def _read_vecs(path, payload_dtype) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        return np.zeros((0, 0), dtype=payload_dtype)
    if raw.size < 4:
        raise TruncatedFileError(f"{path}: {raw.size} bytes is shorter than one header")
    dim = int(raw[:4].view("<i4")[0])
    if dim <= 0:
        raise MalformedHeaderError(f"{path}: record 0 declares dimension {dim}")
    rec = 4 * (dim + 1)
    nrec, tail = divmod(raw.size, rec)
    if nrec:
        headers = raw[: nrec * rec].view("<i4").reshape(nrec, dim + 1)[:, 0]
        bad = np.flatnonzero(headers != dim)
        if bad.size:
            i = int(bad[0])
            if headers[i] <= 0:
                raise MalformedHeaderError(f"{path}: record {i} declares dimension {headers[i]}")
            raise InconsistentDimensionError(
                f"{path}: record {i} has dimension {headers[i]}, expected {dim}")
    if tail:
        # a trailing header that disagrees is the more specific diagnosis
        if tail >= 4:
            h = int(raw[nrec * rec: nrec * rec + 4].view("<i4")[0])
            if h <= 0:
                raise MalformedHeaderError(f"{path}: record {nrec} declares dimension {h}")
            if h != dim:
                raise InconsistentDimensionError(
                    f"{path}: record {nrec} has dimension {h}, expected {dim}")
        raise TruncatedFileError(f"{path}: {tail} trailing bytes after {nrec} records")
    body = raw.view("<i4").reshape(nrec, dim + 1)[:, 1:]
    return np.ascontiguousarray(body).view(payload_dtype).astype(payload_dtype.newbyteorder("="))


def load_fvecs(path: str | os.PathLike) -> FlatVectorSet:
    return FlatVectorSet(_read_vecs(path, np.dtype("<f4")))


def load_ivecs(path: str | os.PathLike) -> np.ndarray:
    """Integer matrix, one row per record (ground-truth id files)."""
    return _read_vecs(path, np.dtype("<i4"))


def _write_vecs(path, arr: np.ndarray, dtype):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("expected a 2-d array")
    n, d = arr.shape
    out = np.empty((n, d + 1), dtype="<i4")
    out[:, 0] = d
    out[:, 1:] = np.ascontiguousarray(arr, dtype=dtype).view("<i4")
    out.tofile(path)


def write_fvecs(path, vs: FlatVectorSet | np.ndarray) -> None:
    data = vs.data if isinstance(vs, FlatVectorSet) else vs
    _write_vecs(path, data, "<f4")


def write_ivecs(path, ids: np.ndarray) -> None:
    _write_vecs(path, ids, "<i4")


# ------------------------------------------------------------- synthetic data


def generate_synthetic(n: int, d: int, clusters: int, seed: int,
                       spectrum_decay: float = 0.75, center_scale: float = 0.5) -> FlatVectorSet:
    """Gaussian-mixture vectors with a decaying within-cluster spectrum.

    Randomness comes from numpy's PCG64 bit generator (``np.random.default_rng``)
    so a given ``seed`` reproduces bit-identical output.  Cluster centers are
    drawn from N(0, center_scale^2 I).  Each point is its center plus a noise
    vector whose per-axis standard deviation is ``(1 + j) ** -spectrum_decay``
    (so the largest axis has unit spread), rotated by one shared random
    orthogonal matrix.  The decay gives the data a principal subspace, as real
    embedding sets have; ``spectrum_decay=0`` gives isotropic unit blobs.
    """
    if n < 1 or d < 1 or clusters < 1:
        raise ValueError(f"need n, d, clusters >= 1 (got n={n}, d={d}, clusters={clusters})")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(clusters, d))
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    rot = q * np.sign(np.diag(r))
    scales = (1.0 + np.arange(d)) ** -spectrum_decay
    labels = rng.integers(0, clusters, size=n)
    noise = rng.normal(size=(n, d))
    noise *= scales
    data = noise @ rot.T
    del noise
    for c in range(clusters):
        data[labels == c] += centers[c]
    return FlatVectorSet(data.astype(np.float32))


# --------------------------------------------------------------- ground truth


def _sort_rows(d: np.ndarray, ids: np.ndarray):
    order = np.lexsort((ids, d))
    return d[order], ids[order]


def brute_force_topk(base: FlatVectorSet, queries: FlatVectorSet, k: int,
                     block: int | None = None) -> GroundTruth:
    """Exact k nearest neighbours by squared Euclidean distance, ties by smaller id.

    Distances are accumulated sequentially in float64.  For large bases a
    float64 GEMM pass shortlists candidates first; the shortlist is only
    trusted when its k-th exact distance is provably below every excluded
    point's, otherwise that query falls back to a full scan.
    """
    if base.dim != queries.dim:
        raise ValueError(f"dimension mismatch: base {base.dim} vs queries {queries.dim}")
    n, m = base.count, queries.count
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    ids_out = np.empty((m, k), np.int32)
    d_out = np.empty((m, k), np.float64)
    X, Q = base.data, queries.data
    shortlist = min(n, 2 * k + 32)
    dist = np.empty(n, np.float64)

    if shortlist >= n // 2:
        for i in range(m):
            K.exact_all(X, Q[i], dist)
            top = np.argpartition(dist, k - 1)[:k] if k < n else np.arange(n)
            # widen to every id tied with the k-th distance so id tie-break is exact
            kth = dist[top].max()
            cand = np.flatnonzero(dist <= kth)
            dd, ii = _sort_rows(dist[cand], cand)
            d_out[i], ids_out[i] = dd[:k], ii[:k]
        return GroundTruth(ids_out, d_out)

    # keep the float64 distance block near 256 MB
    block = block or max(8, min(256, 32_000_000 // n))
    X64 = X.astype(np.float64)
    xn = np.einsum("ij,ij->i", X64, X64)
    eps = np.finfo(np.float64).eps
    for s in range(0, m, block):
        Qb = Q[s:s + block].astype(np.float64)
        qn = np.einsum("ij,ij->i", Qb, Qb)
        approx = xn[None, :] - 2.0 * (Qb @ X64.T) + qn[:, None]
        part = np.argpartition(approx, shortlist, axis=1)
        for r in range(Qb.shape[0]):
            i = s + r
            cand = part[r, :shortlist].astype(np.int64)
            cutoff = approx[r, part[r, shortlist]]
            err = 8.0 * base.dim * eps * (xn.max() + qn[r] + 1.0)
            cd = np.empty(cand.size, np.float64)
            K.exact_rows(X, Q[i], cand, cd)
            dd, ii = _sort_rows(cd, cand)
            if dd[k - 1] + err < cutoff - err:
                d_out[i], ids_out[i] = dd[:k], ii[:k]
                continue
            K.exact_all(X, Q[i], dist)
            kth = np.partition(dist, k - 1)[k - 1]
            c = np.flatnonzero(dist <= kth)
            dd, ii = _sort_rows(dist[c], c)
            d_out[i], ids_out[i] = dd[:k], ii[:k]
    return GroundTruth(ids_out, d_out)


def recall_at_k(retrieved, truth: GroundTruth | np.ndarray, k: int) -> float:
    """Mean over queries of |retrieved_k ∩ truth_k| / k."""
    tids = truth.ids if isinstance(truth, GroundTruth) else np.asarray(truth)
    if len(retrieved) != len(tids):
        raise ValueError(f"{len(retrieved)} result rows for {len(tids)} queries")
    if len(tids) == 0:
        return 0.0
    if k < 1 or k > tids.shape[1]:
        raise ValueError(f"k={k} exceeds ground-truth depth {tids.shape[1]}")
    hits = 0
    for row, t in zip(retrieved, tids):
        row = list(row)
        if len(row) < k:
            raise ValueError(f"a result row has {len(row)} ids, fewer than k={k}")
        hits += len(set(row[:k]).intersection(t[:k].tolist()))
    return hits / (k * len(tids))
