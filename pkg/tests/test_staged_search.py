import numpy as np
import pytest
from hypothesis import given, strategies as st

from pilotann.backend import ThreadPoolBackend
from pilotann.dataset_io import recall_at_k
from pilotann.graph_index import SearchStats, batch_greedy_search, default_entries, greedy_search
from pilotann.staged_search import (BloomVisited, PilotEngine, StageBudgets, Toggles, stage1_pilot,
                                    stage2_refine, stage3_final)
from pilotann.subgraph import PilotSubgraph, attach_primary
from pilotann.svd_transform import transform_split


@pytest.fixture(scope="module")
def engine(small):
    return PilotEngine(small.graph, small.base, small.svd, small.split, small.sub,
                       small.entry_index, ThreadPoolBackend(2, chunk=32))


class TestBloom:
    @given(st.lists(st.integers(0, 2**31 - 1), min_size=1, max_size=300, unique=True))
    def test_no_false_negatives(self, keys):
        b = BloomVisited.for_ef(8)
        for k in keys:
            b.add(k)
        assert all(k in b for k in keys)

    def test_fp_rate_at_design_load(self, rng):
        # 64 bits per ef1 slot and 4 hashes give <= 5% up to ~10.25 inserts per slot
        ef1 = 64
        load = 10 * ef1
        b = BloomVisited.for_ef(ef1)
        keys = rng.choice(10**7, size=load + 4000, replace=False)
        ins, probe = keys[:load], keys[load:]
        for k in ins:
            b.add(int(k))
        fp = np.mean([int(k) in b for k in probe])
        assert fp <= 0.05
        assert b.expected_fp_rate() <= 0.05

    @pytest.mark.parametrize("per_slot", [4, 8, 16])
    def test_fp_rate_tracks_theory(self, rng, per_slot):
        b = BloomVisited.for_ef(32)
        keys = rng.choice(10**7, size=32 * per_slot + 4000, replace=False)
        for k in keys[:32 * per_slot]:
            b.add(int(k))
        fp = np.mean([int(k) in b for k in keys[32 * per_slot:]])
        assert abs(fp - b.expected_fp_rate()) <= 0.03

    def test_force_positive(self):
        assert 12345 in BloomVisited(64, force_positive=True)

    def test_bad_size(self):
        with pytest.raises(ValueError):
            BloomVisited(0)


class TestBudgets:
    def test_defaults(self):
        b = StageBudgets.from_ef3(64)
        assert (b.ef1, b.ef2, b.ef3, b.refine_iters) == (64, 32, 64, 2)
        assert StageBudgets.from_ef3(12).ef2 == 10

    def test_validate(self):
        with pytest.raises(ValueError):
            StageBudgets(5, 10, 10).validate(10)


class TestStage1:
    def test_full_subgraph_exact_visited_equals_greedy(self, small):
        full = attach_primary(small.graph, np.ones(small.base.count, bool),
                              transform_split(small.svd, small.base, small.base.dim))
        qs = transform_split(small.svd, small.queries, small.base.dim)
        ent = default_entries(small.base.count)
        out = stage1_pilot(full, qs.primary, 32, entries=ent, visited="exact")
        ref = batch_greedy_search(small.graph, full.primary_vectors, qs.primary, ent, 32)
        for i in range(small.queries.count):
            assert np.array_equal(out.ids[i], ref[0][i, :ref[2][i]])
        assert np.array_equal(out.ndist, ref[3])

    def test_member_query_ranks_first(self, small):
        m = small.sub.members[::97][:10]
        out = stage1_pilot(small.sub, small.split.primary[m], 48)
        assert [o[0] for o in out.ids] == m.tolist()

    def test_all_positive_bloom_returns_entries(self, small):
        ent = default_entries(small.base.count, pool=small.sub.members)
        out = stage1_pilot(small.sub, small.qsplit.primary[:20], 32, entries=ent, force_positive=True)
        for ids in out.ids:
            assert set(ids.tolist()) == set(ent.tolist())

    def test_backend_chunking_is_invisible(self, small):
        a = stage1_pilot(small.sub, small.qsplit.primary, 24, backend=ThreadPoolBackend(1))
        b = stage1_pilot(small.sub, small.qsplit.primary, 24, backend=ThreadPoolBackend(3, chunk=7))
        assert all(np.array_equal(x, y) for x, y in zip(a.ids, b.ids))
        assert np.array_equal(a.ndist, b.ndist)

    def test_bad_mode(self, small):
        with pytest.raises(ValueError):
            stage1_pilot(small.sub, small.qsplit.primary[:1], 16, visited="nope")


class TestStage2:
    def _stage1(self, small, ef=32):
        return stage1_pilot(small.sub, small.qsplit.primary, ef, visited="exact")

    def test_distances_are_full(self, small):
        s1 = self._stage1(small)
        carries, _, _ = stage2_refine(small.sub, small.split, s1.ids, small.qsplit, 16, 2, s1.distances)
        for i, c in enumerate(carries):
            ref = ((small.base.data[c.ids].astype(np.float64) - small.queries.data[i]) ** 2).sum(1)
            assert np.allclose(c.distances, ref, rtol=1e-3, atol=1e-4)
            assert np.all(np.diff(c.distances) >= 0)
            assert small.sub.member_flags[c.ids].all()

    def test_zero_iterations_is_rerank(self, small):
        s1 = self._stage1(small)
        carries, nd, hops = stage2_refine(small.sub, small.split, s1.ids, small.qsplit, 16, 0)
        for i, c in enumerate(carries):
            ids = np.asarray(s1.ids[i])
            full = ((small.base.data[ids].astype(np.float64) - small.queries.data[i]) ** 2).sum(1)
            order = np.lexsort((ids, full))[:16]
            assert np.array_equal(c.ids, ids[order])
            assert set(c.visited.tolist()) == set(ids.tolist())
        assert np.all(hops == 0)
        assert np.array_equal(nd, [len(x) for x in s1.ids])

    def test_full_primary_rerank_is_identity(self, small):
        full = attach_primary(small.graph, np.ones(small.base.count, bool),
                              transform_split(small.svd, small.base, small.base.dim))
        qs = transform_split(small.svd, small.queries, small.base.dim)
        split = transform_split(small.svd, small.base, small.base.dim)
        s1 = stage1_pilot(full, qs.primary, 20, entries=default_entries(small.base.count), visited="exact")
        carries, _, _ = stage2_refine(full, split, s1.ids, qs, 20, 0, s1.distances)
        for c, ids in zip(carries, s1.ids):
            assert np.array_equal(c.ids, ids)

    def test_visited_soundness(self, small):
        s1 = self._stage1(small)
        carries, _, _ = stage2_refine(small.sub, small.split, s1.ids, small.qsplit, 16, 2, s1.distances)
        for i, c in enumerate(carries):
            # every id in the visited set is a candidate or a neighbour reached by an expansion
            assert set(np.asarray(s1.ids[i]).tolist()) <= set(c.visited.tolist())
            assert small.sub.member_flags[c.visited].all()
            assert set(c.ids.tolist()) <= set(c.visited.tolist())


class TestStage3AndEngine:
    def test_graceful_degradation(self, small, engine):
        res = engine.search(small.queries, 10, StageBudgets.from_ef3(32), Toggles.baseline())
        ent = default_entries(small.base.count)
        for i in range(small.queries.count):
            st_ = SearchStats()
            q = greedy_search(small.graph, small.base, small.queries.data[i], ent, 32, stats=st_)
            assert res.ids[i].tolist() == q.ids[:10]
            assert np.array_equal(res.distances[i], np.array(q.distances[:10], np.float32))
            assert res.counters["stage3"][i] == st_.distance_computations
        assert set(res.counters) == {"stage3"}

    def test_true_topk_carry_gives_full_recall(self, small):
        from pilotann.staged_search import SearchCarry
        carries = []
        for i in range(small.queries.count):
            ids = small.truth.ids[i, :10]
            carries.append(SearchCarry(ids, small.truth.distances[i, :10].astype(np.float32), ids))
        ids, _, _, _ = stage3_final(small.graph, small.base, small.queries, 16, 10, carries=carries)
        assert recall_at_k(ids, small.truth, 10) == 1.0

    def test_pipeline_quality_and_accounting(self, small, engine):
        b = StageBudgets.from_ef3(32)
        res = engine.search(small.queries, 10, b)
        assert recall_at_k(res.ids, small.truth, 10) >= 0.95
        assert set(res.counters) == {"fes", "stage1", "stage2", "stage3"}
        total = sum(np.mean(v) for v in res.counters.values())
        assert res.total_computations == pytest.approx(total)
        again = engine.search(small.queries, 10, b)
        for s in res.counters:
            assert np.array_equal(res.counters[s], again.counters[s])

    @pytest.mark.parametrize("tog", [Toggles(True, True, False, False), Toggles(False, True, True, False),
                                     Toggles(True, False, False, False), Toggles(True, False, True, False)])
    def test_partial_toggles_run(self, small, engine, tog):
        res = engine.search(small.queries, 10, StageBudgets.from_ef3(32), tog)
        assert res.ids.shape == (small.queries.count, 10)
        assert recall_at_k(res.ids, small.truth, 10) >= 0.9

    def test_adversarial_bloom(self, small, engine, rng):
        # preload every query's filter with ids stage 1 would need
        b = StageBudgets.from_ef3(32)
        exact = engine.search(small.queries, 10, b, pilot_visited="exact")
        pre = [rng.choice(small.sub.members, size=16 * b.ef1, replace=False) for _ in range(small.queries.count)]
        noisy = engine.search(small.queries, 10, b, bloom_preload=pre)
        assert abs(recall_at_k(exact.ids, small.truth, 10) - recall_at_k(noisy.ids, small.truth, 10)) <= 0.01

    def test_reuse_flag_changes_nothing_but_work(self, small, engine):
        b = StageBudgets.from_ef3(24)
        a = engine.search(small.queries, 10, b, reuse_primary=True)
        c = engine.search(small.queries, 10, b, reuse_primary=False)
        assert recall_at_k(a.ids, small.truth, 10) == pytest.approx(recall_at_k(c.ids, small.truth, 10), abs=0.01)

    def test_stream_equals_batches(self, small, engine):
        b = StageBudgets.from_ef3(24)
        batches = [small.queries.data[s:s + 37] for s in range(0, small.queries.count, 37)]
        piped = engine.search_stream(batches, 10, b, Toggles())
        plain = [engine.search(x, 10, b) for x in batches]
        for p, q in zip(piped, plain):
            assert np.array_equal(p.ids, q.ids)
            for s in q.counters:
                assert np.array_equal(p.counters[s], q.counters[s])

    def test_empty_cell_falls_back(self, small):
        from pilotann.entry_selection import EntryIndex
        ei = small.entry_index
        empty = EntryIndex(ei.centroids, np.zeros_like(ei.cell_offsets), ei.entry_ids[:0], ei.entry_vectors[:0])
        eng = PilotEngine(small.graph, small.base, small.svd, small.split, small.sub, empty)
        res = eng.search(small.queries, 10, StageBudgets.from_ef3(32))
        assert recall_at_k(res.ids, small.truth, 10) >= 0.9
