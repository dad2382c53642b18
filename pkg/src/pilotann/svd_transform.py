"""Orthogonal SVD rotation and the primary/residual split of rotated vectors.

Because the rotation is orthonormal, the squared distance between two
rotated vectors equals the squared distance between the originals, and it
splits exactly into a primary part (leading components) plus a residual part.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .dataset_io import FlatVectorSet

__all__ = [
    "SvdModel",
    "SplitVectors",
    "fit_svd",
    "transform_split",
    "primary_distance",
    "residual_distance",
    "save_svd",
    "load_svd",
    "primary_dim_for_ratio",
]

SVD_MAGIC = b"PSVD"
SVD_VERSION = 1


@dataclass(frozen=True)
class SvdModel:
    rotation: np.ndarray          # D x D, columns are right singular vectors
    singular_values: np.ndarray   # length D, non-increasing
    primary_dim: int

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]


@dataclass(frozen=True)
class SplitVectors:
    primary: np.ndarray     # count x d'
    residual: np.ndarray    # count x (D - d')

    @property
    def count(self) -> int:
        return self.primary.shape[0]

    @property
    def primary_dim(self) -> int:
        return self.primary.shape[1]

    @property
    def residual_dim(self) -> int:
        return self.residual.shape[1]


def primary_dim_for_ratio(dim: int, ratio: float) -> int:
    if not 0 < ratio <= 1:
        raise ValueError(f"svd ratio must be in (0, 1], got {ratio}")
    return min(dim, max(1, int(round(ratio * dim))))


def _fix_signs(v: np.ndarray) -> np.ndarray:
    # first nonzero component of every column made non-negative
    v = v.copy()
    for j in range(v.shape[1]):
        nz = np.flatnonzero(np.abs(v[:, j]) > 1e-12)
        if nz.size and v[nz[0], j] < 0:
            v[:, j] = -v[:, j]
    return v


def fit_svd(data: FlatVectorSet, sample_cap: int = 100_000, primary_dim: int | None = None,
            seed: int = 0) -> SvdModel:
    """Right singular vectors of a uniform row sample (no mean-centering).

    Uses the eigendecomposition of the D x D scatter matrix, which always
    yields a complete orthonormal basis, also for rank-deficient or
    all-identical input.
    """
    if data.count < 2:
        raise ValueError("fit_svd needs at least two vectors")
    X = data.data
    if data.count > sample_cap:
        rng = np.random.default_rng(seed)
        X = X[np.sort(rng.choice(data.count, size=sample_cap, replace=False))]
    X = X.astype(np.float64)
    scatter = X.T @ X
    evals, evecs = np.linalg.eigh(scatter)
    order = np.argsort(-evals, kind="stable")
    evals = np.clip(evals[order], 0.0, None)
    V = _fix_signs(evecs[:, order])
    sv = np.sqrt(evals)
    D = data.dim
    pd = D if primary_dim is None else primary_dim
    if not 1 <= pd <= D:
        raise ValueError(f"primary_dim must be in [1, {D}], got {pd}")
    return SvdModel(rotation=V.astype(np.float32), singular_values=sv.astype(np.float32),
                    primary_dim=pd)


def transform_split(model: SvdModel, data: FlatVectorSet | np.ndarray,
                    primary_dim: int | None = None) -> SplitVectors:
    X = data.data if isinstance(data, FlatVectorSet) else np.asarray(data, np.float32)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: data {X.shape[1]} vs model {model.dim}")
    pd = model.primary_dim if primary_dim is None else primary_dim
    if not 1 <= pd <= model.dim:
        raise ValueError(f"primary_dim must be in [1, {model.dim}], got {pd}")
    Y = (X.astype(np.float64) @ model.rotation.astype(np.float64)).astype(np.float32)
    return SplitVectors(np.ascontiguousarray(Y[:, :pd]), np.ascontiguousarray(Y[:, pd:]))


def _sq(a, b) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    t = a - b
    return float(np.dot(t, t))


def primary_distance(a_primary, b_primary) -> float:
    return _sq(a_primary, b_primary)


def residual_distance(a_residual, b_residual) -> float:
    return _sq(a_residual, b_residual)


# sidecar: magic, version u32, D u32, d' u32, rotation f32[D*D], singular values f32[D]
_HDR = struct.Struct("<4sIII")


def save_svd(model: SvdModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(_HDR.pack(SVD_MAGIC, SVD_VERSION, model.dim, model.primary_dim))
        f.write(np.ascontiguousarray(model.rotation, "<f4").tobytes())
        f.write(np.ascontiguousarray(model.singular_values, "<f4").tobytes())


def load_svd(path: str | os.PathLike) -> SvdModel:
    with open(path, "rb") as f:
        magic, version, D, pd = _HDR.unpack(f.read(_HDR.size))
        if magic != SVD_MAGIC:
            raise ValueError(f"{path}: not an SVD sidecar")
        if version != SVD_VERSION:
            raise ValueError(f"{path}: unsupported SVD sidecar version {version}")
        rot = np.frombuffer(f.read(4 * D * D), "<f4").reshape(D, D)
        sv = np.frombuffer(f.read(4 * D), "<f4")
    if sv.size != D:
        raise ValueError(f"{path}: truncated SVD sidecar")
    return SvdModel(rot.astype(np.float32), sv.astype(np.float32), int(pd))
