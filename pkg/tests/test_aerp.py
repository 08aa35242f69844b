import numpy as np
import pytest

from kvedram.aerp import (CacheBudget, PolicyCache, PopularitySnapshot,
                          StorageFormat, choose_format, popularity_stability,
                          prefill_select, recompute_kv, stored_bytes_input,
                          stored_bytes_kv)
from kvedram.attention import ImportanceTable, attend, mix
from kvedram.core import ConfigurationError, ModelShape, encode_q88


def make_cache(heads=3, n_prime=4, sink=0, recent=0, channels=None, cap=None):
    shape = ModelShape(channels or heads * 4, heads)
    return PolicyCache(shape, CacheBudget(n_prime, sink, recent),
                       recompute_cap=cap)


def seed_scores(table, head_scores):
    for h, scores in enumerate(head_scores):
        table.scores[h].update(scores)


class TestAdmitDecoding:
    def test_lowest_score_token_replaced_per_head(self):
        # Three heads full at four tokens; the arriving fifth token replaces
        # each head's own minimum, so heads diverge.
        cache = make_cache()
        for h in range(3):
            for tid in (1, 2, 3, 4):
                cache._insert(h, tid, None)
        table = ImportanceTable(heads=3)
        seed_scores(table, [
            {1: 0.9, 2: 0.8, 3: 0.1, 4: 0.5},
            {1: 0.9, 2: 0.8, 3: 0.5, 4: 0.1},
            {1: 0.05, 2: 0.8, 3: 0.5, 4: 0.9},
        ])
        for h in range(3):
            table.scores[h][5] = 0.0
        events = cache.admit_decoding(5, table)
        assert [(e.head, e.evicted) for e in events] == [(0, 3), (1, 4), (2, 1)]
        # The fourth token stays resident in two of three heads: input format.
        assert cache.entries[4].format is StorageFormat.INPUT_VECTOR

    def test_forced_choice_single_evictable(self):
        # sink + recent == N' - 1 leaves exactly one middle token evictable.
        cache = make_cache(heads=1, n_prime=4, sink=1, recent=2)
        for tid in (0, 5, 8, 9):
            cache._insert(0, tid, None)
        table = ImportanceTable(heads=1)
        seed_scores(table, [{0: 0.1, 5: 9.0, 8: 0.2, 9: 0.3, 10: 0.0}])
        events = cache.admit_decoding(10, table)
        assert [e.evicted for e in events] == [5]

    def test_rejects_overtight_budget(self):
        with pytest.raises(ConfigurationError):
            CacheBudget(4, 2, 2)

    def test_ties_break_to_lowest_token_id(self):
        cache = make_cache(heads=1, n_prime=3)
        for tid in (4, 7, 9):
            cache._insert(0, tid, None)
        table = ImportanceTable(heads=1)
        seed_scores(table, [{4: 0.5, 7: 0.5, 9: 0.5, 12: 0.0}])
        events = cache.admit_decoding(12, table)
        assert events[0].evicted == 4

    def test_matches_brute_force_resort_oracle(self):
        # 200 random steps against an independent oracle that re-sorts the
        # score table every step.
        rng = np.random.default_rng(17)
        heads, n_prime, sink, recent = 2, 16, 2, 4
        cache = make_cache(heads=heads, n_prime=n_prime, sink=sink, recent=recent)
        table = ImportanceTable(heads=heads)
        oracle = [dict() for _ in range(heads)]
        oracle_res = [list() for _ in range(heads)]
        for tid in range(n_prime):
            for h in range(heads):
                cache._insert(h, tid, None)
                oracle[h][tid] = 0.0
                oracle_res[h].append(tid)
                table.scores[h][tid] = 0.0
        for step in range(200):
            new = n_prime + step
            for h in range(heads):
                # Discrete increments force frequent exact ties.
                incr = {t: float(rng.choice([0.0, 0.25, 0.5]))
                        for t in oracle_res[h] + [new]}
                for t, v in incr.items():
                    table.scores[h][t] = table.scores[h].get(t, 0.0) + v
                    oracle[h][t] = oracle[h].get(t, 0.0) + v
            cache.admit_decoding(new, table, step=step)
            for h in range(heads):
                cand = sorted(t for t in oracle_res[h]
                              if t >= sink and t < new - recent)
                victim = min(cand, key=lambda t: (oracle[h][t], t))
                oracle_res[h][oracle_res[h].index(victim)] = new
                del oracle[h][victim]
                assert cache.resident_set(h) == set(oracle_res[h])

    def test_budget_safety_and_retention(self):
        rng = np.random.default_rng(23)
        heads, n_prime, sink, recent = 2, 8, 1, 2
        cache = make_cache(heads=heads, n_prime=n_prime, sink=sink, recent=recent)
        table = ImportanceTable(heads=heads)
        for tid in range(n_prime):
            for h in range(heads):
                cache._insert(h, tid, None)
                table.scores[h][tid] = float(rng.random())
        for step in range(60):
            new = n_prime + step
            for h in range(heads):
                table.scores[h][new] = float(rng.random())
            events = cache.admit_decoding(new, table, step=step)
            for h in range(heads):
                residents = cache.resident_set(h)
                assert len(residents) <= n_prime
                assert set(range(sink)) <= residents
                window = set(range(max(sink, new - recent), new + 1))
                assert window <= residents
            for ev in events:
                assert ev.evicted >= sink
                assert ev.evicted < new - recent


class TestPrefillSelect:
    def budget(self):
        return CacheBudget(8, 2, 2)

    def test_short_context_keeps_everything(self):
        kept = prefill_select(np.random.default_rng(0).random((2, 5)),
                              self.budget(), 5)
        assert kept == [[0, 1, 2, 3, 4]] * 2

    def test_uniform_scores_prefer_low_ids(self):
        kept = prefill_select(np.ones((1, 12)), self.budget(), 12)
        assert kept == [[0, 1, 2, 3, 4, 5, 10, 11]]

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(41)
        n_cxt, budget = 64, CacheBudget(16, 3, 4)
        scores = rng.random((4, n_cxt))
        kept = prefill_select(scores, budget, n_cxt)
        for h in range(4):
            protected = set(range(3)) | set(range(n_cxt - 4, n_cxt))
            free = [t for t in range(n_cxt) if t not in protected]
            ranked = sorted(free, key=lambda t: (-scores[h, t], t))
            expected = sorted(protected | set(ranked[:16 - len(protected)]))
            assert kept[h] == expected


class TestChooseFormat:
    def test_majority_of_three_heads_stores_input(self):
        assert choose_format([True, True, False], 3) is StorageFormat.INPUT_VECTOR

    def test_exact_half_keeps_kv(self):
        assert choose_format([True, True, False, False], 4) is StorageFormat.KV_SPLIT

    def test_input_chosen_iff_bytes_strictly_shrink(self):
        for heads in range(2, 33):
            channels = heads * 8
            for resident in range(heads + 1):
                fmt = choose_format([True] * resident + [False] * (heads - resident),
                                    heads)
                kv = stored_bytes_kv(channels, heads, resident)
                inp = stored_bytes_input(channels)
                assert (fmt is StorageFormat.INPUT_VECTOR) == (inp < kv)


class TestRecomputeKv:
    def test_identity_projection_slices_input(self):
        shape = ModelShape(8, 2)
        x = encode_q88(np.linspace(-1, 1, 8))
        k, v = recompute_kv(x, np.eye(8), np.eye(8), shape)
        assert np.array_equal(k.reshape(-1), x)
        assert np.array_equal(v.reshape(-1), x)

    def test_zero_input_zero_planes(self):
        shape = ModelShape(8, 2)
        rng = np.random.default_rng(1)
        k, v = recompute_kv(np.zeros(8, dtype=np.uint16),
                            rng.normal(size=(8, 8)), rng.normal(size=(8, 8)),
                            shape)
        assert not k.any() and not v.any()

    def test_round_trip_is_bit_exact(self):
        # Store at first computation, recompute later: identical planes.
        shape = ModelShape(16, 4)
        rng = np.random.default_rng(2)
        w_k = rng.normal(size=(16, 16))
        w_v = rng.normal(size=(16, 16))
        for _ in range(25):
            x = encode_q88(rng.normal(size=16))
            stored = recompute_kv(x, w_k, w_v, shape)
            later = recompute_kv(x, w_k, w_v, shape)
            assert np.array_equal(stored[0], later[0])
            assert np.array_equal(stored[1], later[1])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            recompute_kv(np.zeros(8, dtype=np.uint16), np.eye(4), np.eye(4),
                         ModelShape(8, 2))


class TestFormatEconomyInCache:
    def test_input_format_bytes_beat_kv_alternative(self):
        rng = np.random.default_rng(3)
        cache = make_cache(heads=4, n_prime=8, channels=32)
        table = ImportanceTable(heads=4)
        for tid in range(8):
            for h in range(4):
                cache._insert(h, tid, None)
                table.scores[h][tid] = float(rng.random())
        for step in range(40):
            new = 8 + step
            for h in range(4):
                table.scores[h][new] = float(rng.random())
            cache.admit_decoding(new, table, step=step)
            for entry in cache.entries.values():
                if entry.format is StorageFormat.INPUT_VECTOR and entry.resident_heads:
                    kv_alt = stored_bytes_kv(32, 4, entry.resident_heads)
                    if entry.resident_heads * 2 > 4:
                        assert stored_bytes_input(32) < kv_alt


def test_slot_reuse_preserves_attention_output():
    # Physically overwriting evicted slots (arbitrary order) must give the
    # same output as an id-ordered layout.
    rng = np.random.default_rng(29)
    d, n = 4, 6
    slot_keys = [rng.normal(size=d) for _ in range(n)]
    slot_values = [rng.normal(size=d) for _ in range(n)]
    for _ in range(30):
        victim = int(rng.integers(n))
        slot_keys[victim] = rng.normal(size=d)
        slot_values[victim] = rng.normal(size=d)
        q = rng.normal(size=d)
        out_slots = mix(attend(q, np.stack(slot_keys)), np.stack(slot_values))
        order = rng.permutation(n)
        out_sorted = mix(attend(q, np.stack([slot_keys[i] for i in order])),
                         np.stack([slot_values[i] for i in order]))
        assert np.allclose(out_slots, out_sorted, atol=1e-9)


class TestPopularityStability:
    def test_constant_pattern_is_fully_stable(self):
        snap = PopularitySnapshot(4, {1: 4, 2: 3, 3: 1})
        assert popularity_stability(snap, snap) == 1.0

    def test_inverted_scores_drop_to_zero(self):
        start = PopularitySnapshot(4, {1: 4, 2: 4})
        end = PopularitySnapshot(4, {1: 1, 2: 0, 9: 4})
        assert popularity_stability(start, end) == 0.0

    def test_no_popular_tokens_is_vacuously_stable(self):
        start = PopularitySnapshot(4, {1: 1})
        assert popularity_stability(start, PopularitySnapshot(4, {})) == 1.0
