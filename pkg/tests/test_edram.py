import numpy as np
import pytest

from kvedram.core import ConfigurationError, Rng, decode_q88, encode_q88
from kvedram.edram import (BankLayout, CacheMissError, DEFAULT_INTERVALS,
                           EdramDevice, RefreshController, RetentionModel,
                           classify, fit_retention_model, inject_flips,
                           mean_refresh_rate, uniform_intervals)


class TestClassify:
    def test_all_equal_scores_all_lst(self):
        assert not classify(np.full(8, 3.0)).any()

    def test_two_tokens_split_on_median(self):
        mask = classify(np.array([0.9, 0.1]))
        assert mask.tolist() == [True, False]

    def test_random_scores_split_in_half(self):
        rng = np.random.default_rng(0)
        scores = rng.permutation(1000).astype(float)
        mask = classify(scores)
        assert mask.sum() == 500
        # sort oracle: exactly the top half is flagged
        top = set(np.argsort(scores)[500:])
        assert set(np.nonzero(mask)[0]) == top

    def test_odd_count_differs_by_one(self):
        mask = classify(np.random.default_rng(1).permutation(101).astype(float))
        assert abs(int(mask.sum()) - int((~mask).sum())) == 1

    def test_balanced_policy_halves_ties(self):
        mask = classify(np.full(10, 2.0), policy="balanced")
        assert mask.sum() == 5


class TestRetentionModel:
    def test_safe_at_rated_retention(self):
        assert RetentionModel().failure_rate(45e-6) <= 1e-6

    def test_nondecreasing_in_interval(self):
        model = RetentionModel()
        ts = np.geomspace(1e-6, 1.0, 200)
        rates = [model.failure_rate(t) for t in ts]
        assert all(a <= b for a, b in zip(rates, rates[1:]))

    def test_zero_elapsed_zero_rate(self):
        assert RetentionModel().failure_rate(0.0) == 0.0

    def test_fit_reproduces_frozen_defaults(self):
        fitted = fit_retention_model()
        frozen = RetentionModel()
        assert fitted.mu == pytest.approx(frozen.mu, rel=1e-9)
        assert fitted.sigma == pytest.approx(frozen.sigma, rel=1e-9)

    def test_fit_hits_aggregate_target(self):
        model = fit_retention_model()
        iv = np.array(list(DEFAULT_INTERVALS.values()))
        w = (1 / iv) / (1 / iv).sum()
        agg = float(sum(wi * model.failure_rate(t) for wi, t in zip(w, iv)))
        assert agg == pytest.approx(2e-3, rel=1e-9)


class TestInjectFlips:
    def test_zero_elapsed_is_identity(self):
        plane = np.arange(256, dtype=np.uint8)
        out, count = inject_flips(plane, 0.0, RetentionModel(), Rng(0).stream("x"))
        assert count == 0 and np.array_equal(out, plane)

    def test_empirical_rate_matches_probability(self):
        # Binomial concentration: 10^6 bits at p=1e-3 lands within +/-5 %.
        model = RetentionModel()
        t = np.exp(model.mu + model.sigma * -3.0902323061678132)  # F(t) ~ 1e-3
        p = model.failure_rate(t)
        plane = np.zeros(125_000, dtype=np.uint8)
        _, count = inject_flips(plane, t, model, Rng(7).stream("cal"))
        rate = count / (plane.size * 8)
        assert rate == pytest.approx(p, rel=0.05)

    def test_deterministic_under_seed(self):
        plane = np.zeros(1000, dtype=np.uint8)
        model = RetentionModel()
        a, na = inject_flips(plane, 5e-3, model, Rng(3).stream("f", 0))
        b, nb = inject_flips(plane, 5e-3, model, Rng(3).stream("f", 0))
        assert na == nb and np.array_equal(a, b)

    def test_plane_flips_independent_chi_square(self):
        from scipy.stats import chi2_contingency

        model = RetentionModel()
        t = np.exp(model.mu)  # F = 0.5 per bit for a sharp joint test
        rng = Rng(11)
        n = 4000
        msb, _ = inject_flips(np.zeros(n, np.uint8), t, model, rng.stream("m"))
        lsb, _ = inject_flips(np.zeros(n, np.uint8), t, model, rng.stream("l"))
        a = (msb & 1).astype(bool)
        b = (lsb & 1).astype(bool)
        table = np.array([[np.sum(a & b), np.sum(a & ~b)],
                          [np.sum(~a & b), np.sum(~a & ~b)]])
        _, pval, _, _ = chi2_contingency(table)
        assert pval > 0.01


class TestRefreshController:
    def controller(self, intervals):
        return RefreshController(intervals, energy_per_byte=1e-12)

    def test_no_expiry_no_events(self):
        ctl = self.controller(uniform_intervals(1e-3))
        events = ctl.advance(0.5e-3, lambda key: 100)
        assert events == [] and ctl.total_energy_j == 0.0

    def test_uniform_45us_over_1ms_gives_22_passes(self):
        ctl = self.controller(uniform_intervals(45e-6))
        ctl.advance(1e-3, lambda key: 10)
        assert all(n == 22 for n in ctl.pass_counts().values())

    def test_default_intervals_pass_counts_over_36ms(self):
        ctl = self.controller(dict(DEFAULT_INTERVALS))
        # uneven jumps should not change the totals
        for now in (0.009, 0.0171, 0.029, 0.036):
            ctl.advance(now, lambda key: 10)
        counts = ctl.pass_counts()
        assert counts[("HST", "MSB")] == 100
        assert counts[("HST", "LSB")] == 6
        assert counts[("LST", "MSB")] == 25
        assert counts[("LST", "LSB")] == 5

    def test_mean_rate_identity(self):
        rate = mean_refresh_rate(DEFAULT_INTERVALS)
        assert rate == pytest.approx(1.0 / 1.05e-3, rel=0.01)

    def test_energy_linear_in_bytes(self):
        a = self.controller(uniform_intervals(1e-4))
        b = self.controller(uniform_intervals(1e-4))
        a.advance(1e-2, lambda key: 1000)
        b.advance(1e-2, lambda key: 2000)
        assert b.total_energy_j == pytest.approx(2 * a.total_energy_j, rel=1e-12)

    def test_rejects_unordered_intervals(self):
        bad = dict(DEFAULT_INTERVALS)
        bad[("HST", "MSB")] = 10.0  # slower than every other group
        with pytest.raises(ConfigurationError):
            self.controller(bad)

    def test_rejects_time_reversal(self):
        ctl = self.controller(uniform_intervals(1e-3))
        ctl.advance(1.0, lambda key: 1)
        with pytest.raises(ConfigurationError):
            ctl.advance(0.5, lambda key: 1)


def small_device(capacity=8, intervals=None, seed=0, policy="median"):
    return EdramDevice(BankLayout(capacity), intervals or uniform_intervals(45e-6),
                       energy_per_byte=1e-12, model=RetentionModel(),
                       rng=Rng(seed), class_policy=policy)


def kv_payload(rng, heads=2, head_dim=4):
    return dict(k_raw=encode_q88(rng.normal(size=(heads, head_dim))),
                v_raw=encode_q88(rng.normal(size=(heads, head_dim))),
                score_codes=rng.integers(0, 16, heads).astype(np.uint8))


class TestEdramDevice:
    def test_zero_elapsed_readout_is_bit_exact(self):
        rng = np.random.default_rng(0)
        dev = small_device()
        payload = kv_payload(rng)
        dev.write_token(1, 0.0, **payload)
        out = dev.read_token(1, 0.0)
        assert np.array_equal(out["k_raw"], payload["k_raw"])
        assert np.array_equal(out["v_raw"], payload["v_raw"])

    def test_miss_raises_cache_miss(self):
        with pytest.raises(CacheMissError):
            small_device().read_token(99, 0.0)

    def test_forced_top_bit_flip_moves_value_by_128(self):
        from kvedram.core import flip_bit

        raw = encode_q88(np.array([0.5]))[0]
        flipped = flip_bit(raw, 15)
        delta = decode_q88(flipped) - decode_q88(raw)
        assert abs(float(delta)) == pytest.approx(128.0)

    def test_msb_corruption_dominates_lsb(self):
        # Equal flip rate per plane: every MSB-plane flip moves the value by
        # at least 1.0, every LSB-plane flip by at most 0.5.
        rng = np.random.default_rng(5)
        raw = encode_q88(rng.normal(size=2000))
        vals = decode_q88(raw)
        bits_m = rng.integers(8, 16, size=2000)
        bits_l = rng.integers(0, 8, size=2000)
        d_m = np.abs(decode_q88(raw ^ (1 << bits_m).astype(np.uint16)) - vals)
        d_l = np.abs(decode_q88(raw ^ (1 << bits_l).astype(np.uint16)) - vals)
        assert d_m.min() >= 1.0
        assert d_l.max() <= 0.5
        assert d_m.mean() / d_l.mean() >= 16

    def test_refresh_injects_persistent_corruption(self):
        rng = np.random.default_rng(1)
        # long interval => high per-pass failure rate
        intervals = {("HST", "MSB"): 5e-3, ("HST", "LSB"): 5e-3,
                     ("LST", "MSB"): 5e-3, ("LST", "LSB"): 5e-3}
        dev = small_device(intervals=intervals, seed=3)
        payload = kv_payload(rng, heads=4, head_dim=64)
        dev.write_token(1, 0.0, **payload)
        dev.advance(0.5)
        assert dev.flip_count > 0
        out = dev.read_token(1, 0.5)
        assert not np.array_equal(out["k_raw"], payload["k_raw"]) or \
            not np.array_equal(out["v_raw"], payload["v_raw"])

    def test_evict_write_keeps_address_and_count(self):
        rng = np.random.default_rng(2)
        dev = small_device()
        addr = dev.write_token(1, 0.0, **kv_payload(rng))
        dev.write_token(2, 0.0, **kv_payload(rng))
        new_addr = dev.evict_write(1, 7, 0.0, **kv_payload(rng))
        assert new_addr == addr
        assert len(dev.tokens) == 2
        with pytest.raises(ConfigurationError):
            dev.evict_write(42, 8, 0.0, **kv_payload(rng))

    def test_bank_occupancy_matches_dict_reference(self):
        rng = np.random.default_rng(3)
        dev = small_device(capacity=16)
        reference: dict[int, int] = {}
        free = list(range(15, -1, -1))
        live: list[int] = []
        for step in range(100):
            tid = 100 + step
            if len(live) == 16:
                victim = live[int(rng.integers(16))]
                dev.evict_write(victim, tid, 0.0, **kv_payload(rng))
                reference[tid] = reference.pop(victim)
                live[live.index(victim)] = tid
            else:
                dev.write_token(tid, 0.0, **kv_payload(rng))
                reference[tid] = free.pop()
                live.append(tid)
            layout = BankLayout(16)
            expected = {b: 0 for b in range(32)}
            for address in reference.values():
                for bank in layout.banks_for(address).values():
                    expected[bank] += 1
            assert dev.occupancy() == expected

    def test_same_address_across_all_four_groups(self):
        layout = BankLayout(8)
        banks = layout.banks_for(5)
        assert sorted(banks) == ["K_LSB", "K_MSB", "V_LSB", "V_MSB"]
        assert {b % 8 for b in banks.values()} == {5}
        assert len(set(banks.values())) == 4

    def test_input_vector_payload_round_trips(self):
        rng = np.random.default_rng(4)
        dev = small_device()
        x = encode_q88(rng.normal(size=8))
        dev.write_token(3, 0.0, x_raw=x,
                        score_codes=np.array([1, 9], dtype=np.uint8))
        out = dev.read_token(3, 0.0)
        assert out["format"] == "input_vector"
        assert np.array_equal(out["x_raw"], x)

    def test_flip_log_records_time_bank_address_bit(self):
        rng = np.random.default_rng(6)
        intervals = uniform_intervals(5e-3)
        dev = EdramDevice(BankLayout(8), intervals, 1e-12, RetentionModel(),
                          Rng(9), log_flips=True)
        dev.write_token(1, 0.0, **kv_payload(rng, heads=4, head_dim=64))
        dev.advance(0.05)
        assert dev.flip_count > 0
        assert len(dev.flip_log) == dev.flip_count
        for t, bank, address, bit in dev.flip_log:
            assert 0 <= bank < 32
            assert address == dev.tokens[1].address
            assert 0 <= bit < 16
