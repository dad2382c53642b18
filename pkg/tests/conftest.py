import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pilotann.dataset_io import FlatVectorSet, brute_force_topk, generate_synthetic
from pilotann.graph_index import build_graph
from pilotann.subgraph import build_pilot_subgraph
from pilotann.entry_selection import train_entry_index
from pilotann.svd_transform import fit_svd, primary_dim_for_ratio, transform_split

settings.register_profile("ci", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


class Small:
    """A 2K x 32 clustered set with every structure built once."""

    def __init__(self, n=2000, d=32, m=200, seed=3):
        vs = generate_synthetic(n + m, d, 8, seed)
        self.base = FlatVectorSet(vs.data[:n])
        self.queries = FlatVectorSet(vs.data[n:])
        self.truth = brute_force_topk(self.base, self.queries, 64)
        self.graph = build_graph(self.base, 16, 100, seed=0)
        pd = primary_dim_for_ratio(d, 0.5)
        self.svd = fit_svd(self.base, primary_dim=pd)
        self.split = transform_split(self.svd, self.base, pd)
        self.qsplit = transform_split(self.svd, self.queries, pd)
        self.sub = build_pilot_subgraph(self.graph, self.base, self.split, 0.3, 16, 100, seed=0)
        m_ids = self.sub.members
        self.entry_index = train_entry_index(m_ids, self.split.primary[m_ids], r=8, seed=0)


@pytest.fixture(scope="session")
def small():
    return Small()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(RESULTS, key=lambda r: (str(r[0]).zfill(3) if isinstance(r[0], int) else "~" + r[0])):
            terminalreporter.write_line(line)
