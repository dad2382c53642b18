"""Benchmark configuration: a dataclass plus a flat ``key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment; list values are
comma-separated.  Unknown keys are an error.  Example::

    n = 100000
    d = 128
    sweep = 10, 12, 16, 24, 32, 48, 64
    sampling_ratio = 0.25
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

__all__ = ["BenchConfig", "load_config", "parse_overrides"]

DEFAULT_SWEEP = (10, 12, 14, 16, 20, 24, 32, 48, 64, 96, 128)


def _default_cache() -> str:
    return os.environ.get("PILOTANN_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "pilotann"))


@dataclass
class BenchConfig:
    # data: files, or a synthetic mixture when base_path is empty
    base_path: str = ""
    query_path: str = ""
    groundtruth_path: str = ""
    n: int = 100_000
    d: int = 128
    clusters: int = 16
    n_queries: int = 1000
    spectrum_decay: float = 0.75
    center_scale: float = 0.5
    data_seed: int = 1
    gt_depth: int = 128
    # full index
    M: int = 32
    ef_construction: int = 200
    # pilot structures
    sampling_ratio: float = 0.25
    svd_ratio: float = 0.25
    svd_sample_cap: int = 100_000
    fes_r: int = 32
    fes_iters: int = 25
    fes_e: int = 0            # 0: use ef1
    # search
    k: int = 10
    sweep: list = field(default_factory=lambda: list(DEFAULT_SWEEP))
    ef1_min: int = 0          # stage-1 queue floor; 0 keeps ef1 = ef3
    ef2_frac: float = 0.5
    refine_iters: int = 2
    batch: int = 256
    threads: int = 0          # 0: PILOTANN_THREADS or cpu count
    warmup_batches: int = 1
    target_recall: float = 0.90
    tau_fracs: list = field(default_factory=lambda: [0.0, 0.125, 0.25])
    seed: int = 0
    cache_dir: str = field(default_factory=_default_cache)

    def validate(self) -> None:
        for name in ("sampling_ratio", "svd_ratio"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if not self.sweep:
            raise ValueError("sweep must not be empty")
        if min(self.sweep) < self.k:
            raise ValueError(f"every sweep ef must be >= k={self.k}")
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.base_path and not os.path.exists(self.base_path):
            raise FileNotFoundError(self.base_path)
        if self.base_path and not self.query_path:
            raise ValueError("query_path is required with base_path")

    def budgets(self, ef3: int):
        from .staged_search import StageBudgets
        ef1 = max(ef3, self.ef1_min, self.k)
        ef2 = max(int(ef3 * self.ef2_frac), self.k)
        return StageBudgets(ef1, ef2, max(ef3, self.k), self.refine_iters)

    def replace(self, **kw) -> "BenchConfig":
        return dataclasses.replace(self, **kw)

    def _key(self, names) -> str:
        blob = json.dumps({n: getattr(self, n) for n in names}, sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()[:16]

    def data_key(self) -> str:
        names = ["base_path", "query_path", "groundtruth_path", "n", "d", "clusters", "n_queries",
                 "spectrum_decay", "center_scale", "data_seed", "gt_depth"]
        return self._key(names)

    def index_key(self) -> str:
        return self.data_key() + "-" + self._key(["M", "ef_construction", "seed"])

    def pilot_key(self) -> str:
        return self.index_key() + "-" + self._key(
            ["sampling_ratio", "svd_ratio", "svd_sample_cap", "fes_r", "fes_iters"])


def _coerce(f: dataclasses.Field, raw: str):
    default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
    raw = raw.strip()
    if isinstance(default, list):
        if not raw:
            return []
        elem = type(default[0]) if default else float
        return [elem(x.strip()) for x in raw.split(",") if x.strip()]
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    return type(default)(raw)


def parse_overrides(cfg: BenchConfig, pairs) -> BenchConfig:
    """Apply ``(key, value-string)`` pairs on top of ``cfg``."""
    fields = {f.name: f for f in dataclasses.fields(BenchConfig)}
    kw = {}
    for key, raw in pairs:
        key = key.strip().replace("-", "_")
        if key not in fields:
            raise KeyError(f"unknown config key {key!r}")
        kw[key] = _coerce(fields[key], raw)
    return dataclasses.replace(cfg, **kw)


def load_config(path: str | os.PathLike | None = None, overrides=()) -> BenchConfig:
    pairs = []
    if path:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                k, v = line.split("=", 1)
                pairs.append((k, v))
    cfg = parse_overrides(BenchConfig(), list(pairs) + list(overrides))
    cfg.validate()
    return cfg
