"""Banked eDRAM KV-cache model: bit-plane layout, adaptive refresh, bit flips.

Refresh is two-dimensional: each stored plane belongs to one of four groups
(importance class x bit plane), each with its own countdown. Retention
failures materialize when a group refreshes: every member bit flips
independently with the probability the retention curve assigns to that
group's interval, and the corrupted value is written back.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, Rng

# Countdown comparisons tolerate sub-picosecond float error so pass counts
# over exact-multiple windows stay integral.
TIME_EPS = 1e-12

RETENTION_TIME = 45e-6
# Log-normal per-cell retention fit: P(retention < 45us) = 1e-7 and the
# bit-interval-weighted flip rate over the default adaptive intervals = 2e-3.
LOGNORMAL_MU = -1.866390386034304
LOGNORMAL_SIGMA = 1.5660567434679968

DEFAULT_INTERVALS = {
    ("HST", "MSB"): 0.36e-3,
    ("HST", "LSB"): 5.4e-3,
    ("LST", "MSB"): 1.44e-3,
    ("LST", "LSB"): 7.2e-3,
}

TOTAL_BANKS = 32
BANKS_PER_GROUP = 8
BANK_GROUPS = ("K_MSB", "K_LSB", "V_MSB", "V_LSB")


class CacheMissError(KeyError):
    """Requested token is not resident; caller accounts a DRAM fetch."""


class ImportanceClass(enum.Enum):
    HST = "HST"
    LST = "LST"


@dataclass(frozen=True)
class RetentionModel:
    """Per-cell retention-time distribution, log-normal by default.

    failure_rate(t) = P(cell retention < t). The curve is configuration, not
    ground truth: the two parameters are fit to the calibration anchors and
    can be refit for other interval sets via fit_retention_model.
    """

    mu: float = LOGNORMAL_MU
    sigma: float = LOGNORMAL_SIGMA

    def failure_rate(self, elapsed: float) -> float:
        if elapsed < 0:
            raise ConfigurationError("elapsed time must be nonnegative")
        if elapsed == 0.0:
            return 0.0
        z = (math.log(elapsed) - self.mu) / (self.sigma * math.sqrt(2.0))
        return 0.5 * math.erfc(-z)


def fit_retention_model(intervals=None, target_rate: float = 2e-3,
                        retention_anchor: float = RETENTION_TIME,
                        anchor_rate: float = 1e-7) -> RetentionModel:
    """Fit (mu, sigma) so failure_rate(retention_anchor) == anchor_rate and the
    bit-interval-weighted mean flip rate over `intervals` equals target_rate.

    Bits in a faster-refreshed group accrue proportionally more refresh
    intervals per unit time, so groups are weighted by 1/interval (equal bit
    populations per group).
    """
    from scipy.optimize import brentq
    from scipy.stats import norm

    if intervals is None:
        intervals = list(DEFAULT_INTERVALS.values())
    iv = np.asarray(sorted(intervals), dtype=np.float64)
    if np.any(iv <= 0):
        raise ConfigurationError("refresh intervals must be positive")
    z_anchor = norm.ppf(anchor_rate)
    w = (1.0 / iv) / (1.0 / iv).sum()

    def aggregate(sigma: float) -> float:
        mu = math.log(retention_anchor) - z_anchor * sigma
        return float((w * norm.cdf((np.log(iv) - mu) / sigma)).sum())

    sigma = brentq(lambda s: aggregate(s) - target_rate, 0.05, 20.0, xtol=1e-14)
    mu = math.log(retention_anchor) - z_anchor * sigma
    return RetentionModel(mu=mu, sigma=sigma)


def classify(scores, policy: str = "median"):
    """Split scores into HST (True) / LST (False).

    "median": strictly above the median is HST, so equal scores all land in
    LST. "balanced": rank split into exact halves (ties to LST), which the
    refresh controller uses so group byte populations stay even.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if n == 0:
        return np.zeros(0, dtype=bool)
    if policy == "median":
        return scores > np.median(scores)
    if policy == "balanced":
        order = np.lexsort((np.arange(n), scores))
        mask = np.zeros(n, dtype=bool)
        mask[order[n - n // 2:]] = True
        return mask
    raise ConfigurationError(f"unknown classification policy {policy!r}")


def inject_flips(plane: np.ndarray, elapsed: float, model: RetentionModel,
                 rng: np.random.Generator):
    """Flip each bit of a byte plane independently with failure_rate(elapsed).

    Returns (flipped plane, flip count). Deterministic under a fixed stream.
    """
    plane = np.asarray(plane, dtype=np.uint8)
    p = model.failure_rate(elapsed)
    if p == 0.0 or plane.size == 0:
        return plane.copy(), 0
    bits = rng.random((plane.size, 8)) < p
    count = int(bits.sum())
    if count == 0:
        return plane.copy(), 0
    weights = (1 << np.arange(8, dtype=np.uint16)).astype(np.uint8)
    mask = (bits.astype(np.uint8) * weights).sum(axis=1).astype(np.uint8)
    return (plane ^ mask.reshape(plane.shape)).astype(np.uint8), count


@dataclass
class RefreshGroup:
    """One (importance class x bit plane) refresh domain."""

    importance_class: str  # "HST" | "LST"
    bit_plane: str         # "MSB" | "LSB"
    interval: float
    next_due: float = 0.0
    passes: int = 0
    expected_flip_rate: float = 0.0

    def __post_init__(self):
        if self.interval <= 0:
            raise ConfigurationError("refresh interval must be positive")
        if self.next_due == 0.0:
            self.next_due = self.interval

    @property
    def key(self):
        return (self.importance_class, self.bit_plane)


def _validate_group_ordering(intervals: dict) -> None:
    i = intervals
    ok = (i[("HST", "MSB")] <= i[("LST", "MSB")]
          and i[("HST", "LSB")] <= i[("LST", "LSB")]
          and i[("HST", "MSB")] <= i[("HST", "LSB")]
          and i[("LST", "MSB")] <= i[("LST", "LSB")])
    if not ok:
        raise ConfigurationError(
            "refresh intervals must refresh HST at least as often as LST and "
            "MSB planes at least as often as LSB planes"
        )


def uniform_intervals(interval: float) -> dict:
    return {key: interval for key in DEFAULT_INTERVALS}


def mean_refresh_rate(intervals: dict) -> float:
    """Arithmetic mean of the four per-group refresh rates (Hz)."""
    return float(np.mean([1.0 / v for v in intervals.values()]))


@dataclass
class RefreshEvent:
    time: float
    group: tuple
    refreshed_bytes: int
    energy_j: float
    flips: int
    pass_index: int = 0


class RefreshController:
    """Countdown machinery for the four refresh groups.

    advance() fires every due refresh up to `now`, charging energy per byte
    and (optionally) drawing binomial flip counts for the member bits. The
    bit-true device drives the same schedule but injects flips into data.
    """

    def __init__(self, intervals: dict, energy_per_byte: float,
                 model: RetentionModel | None = None,
                 rng: Rng | None = None, validate_ordering: bool = True):
        if set(intervals) != set(DEFAULT_INTERVALS):
            raise ConfigurationError("need exactly the four (class, plane) intervals")
        if validate_ordering:
            _validate_group_ordering(intervals)
        self.model = model
        self.rng = rng
        self.energy_per_byte = energy_per_byte
        self.groups = {}
        for (cls, plane), interval in intervals.items():
            g = RefreshGroup(cls, plane, interval)
            if model is not None:
                g.expected_flip_rate = model.failure_rate(interval)
            self.groups[(cls, plane)] = g
        self.now = 0.0
        self.total_energy_j = 0.0
        self.total_flips = 0

    def advance(self, now: float, bytes_per_group) -> list[RefreshEvent]:
        """Fire due refreshes up to `now`; census may be a dict or a callable."""
        if now < self.now - TIME_EPS:
            raise ConfigurationError("time must be monotone")
        events = []
        for key, g in self.groups.items():
            while g.next_due <= now + TIME_EPS:
                census = bytes_per_group(key) if callable(bytes_per_group) else bytes_per_group[key]
                energy = census * self.energy_per_byte
                flips = 0
                if self.model is not None and self.rng is not None and census > 0:
                    gen = self.rng.stream("refresh-flips", key[0], key[1], g.passes)
                    flips = int(gen.binomial(census * 8, g.expected_flip_rate))
                events.append(RefreshEvent(g.next_due, key, census, energy,
                                           flips, g.passes))
                g.passes += 1
                self.total_energy_j += energy
                self.total_flips += flips
                g.next_due = g.interval * (g.passes + 1)
        self.now = max(self.now, now)
        return events

    def pass_counts(self) -> dict:
        return {key: g.passes for key, g in self.groups.items()}


@dataclass(frozen=True)
class BankLayout:
    """32 banks: 8 each for Key-MSB, Key-LSB, Value-MSB, Value-LSB.

    A token's planes share one address across all four groups.
    """

    capacity_tokens: int
    bytes_per_bank: int = 0

    @property
    def total_banks(self) -> int:
        return TOTAL_BANKS

    def banks_for(self, address: int) -> dict[str, int]:
        if not 0 <= address < self.capacity_tokens:
            raise ConfigurationError(f"address {address} out of range")
        offset = address % BANKS_PER_GROUP
        return {group: gi * BANKS_PER_GROUP + offset
                for gi, group in enumerate(BANK_GROUPS)}


@dataclass
class _TokenData:
    address: int
    k_raw: np.ndarray | None   # (heads, head_dim) uint16, None for input format
    v_raw: np.ndarray | None
    x_raw: np.ndarray | None   # (channels,) uint16, None for KV format
    score_codes: np.ndarray    # (heads,) uint8 register-file entries


class EdramDevice:
    """Bit-true eDRAM KV cache for one layer at toy scale.

    Data lives as uint16 Q8.8 words; the MSB/LSB byte planes map to the MSB
    and LSB bank groups. Classification into HST/LST is recomputed from the
    4-bit score register whenever a token is admitted or evicted.
    """

    def __init__(self, layout: BankLayout, intervals: dict,
                 energy_per_byte: float, model: RetentionModel,
                 rng: Rng, class_policy: str = "median",
                 log_flips: bool = False):
        self.layout = layout
        self.controller = RefreshController(intervals, energy_per_byte,
                                            model=None, rng=None)
        self.model = model
        self.rng = rng
        self.class_policy = class_policy
        self.tokens: dict[int, _TokenData] = {}
        self._free = list(range(layout.capacity_tokens - 1, -1, -1))
        self._hst: dict[int, np.ndarray] = {}   # token -> per-head HST mask
        self._hst_x: dict[int, bool] = {}
        self.flip_count = 0
        # One record per flip: (time, bank, address, bit).
        self.flip_log: list[tuple] | None = [] if log_flips else None

    # -- membership ---------------------------------------------------------

    def _reclassify(self) -> None:
        """Recompute HST membership over all live (token, head) register entries."""
        if not self.tokens:
            self._hst, self._hst_x = {}, {}
            return
        ids = sorted(self.tokens)
        codes = np.concatenate([self.tokens[t].score_codes for t in ids])
        mask = classify(codes, self.class_policy)
        heads = self.tokens[ids[0]].score_codes.shape[0]
        self._hst = {t: mask[i * heads:(i + 1) * heads] for i, t in enumerate(ids)}
        # Shared input vectors take the max per-head score of the token.
        max_codes = np.array([self.tokens[t].score_codes.max() for t in ids])
        x_mask = classify(max_codes, self.class_policy)
        self._hst_x = {t: bool(x_mask[i]) for i, t in enumerate(ids)}

    def _group_planes(self, key):
        """Yield (array, token, kind) triples whose bits sit in group `key`.

        kind is "K", "V", or "X"; shared input vectors (kind "X") map to the
        key banks of their plane.
        """
        cls, plane = key
        want_hst = cls == "HST"
        for tid, data in self.tokens.items():
            if data.x_raw is not None:
                if self._hst_x[tid] == want_hst:
                    yield data.x_raw, tid, "X"
            else:
                heads = np.nonzero(self._hst[tid] == want_hst)[0]
                for h in heads:
                    yield data.k_raw[h], tid, "K"
                    yield data.v_raw[h], tid, "V"

    def _group_bytes(self, key) -> int:
        return sum(arr.size for arr, _, _ in self._group_planes(key))

    # -- refresh ------------------------------------------------------------

    def advance(self, now: float) -> list[RefreshEvent]:
        """Process due refreshes; retention failures persist via write-back."""
        events = self.controller.advance(now, self._group_bytes)
        for ev in events:
            if ev.refreshed_bytes == 0:
                continue
            cls, plane = ev.group
            interval = self.controller.groups[ev.group].interval
            gen = self.rng.stream("device-flips", cls, plane, ev.pass_index)
            shift = 8 if plane == "MSB" else 0
            for arr, tid, kind in self._group_planes(ev.group):
                byte_view = ((arr.astype(np.int64) >> shift) & 0xFF).astype(np.uint8)
                flipped, count = inject_flips(byte_view, interval, self.model, gen)
                if count:
                    other = arr.astype(np.int64) & (0xFF00 >> shift if shift else 0xFF00)
                    arr[...] = (other | (flipped.astype(np.int64) << shift)).astype(np.uint16)
                    ev.flips += count
                    self.flip_count += count
                    if self.flip_log is not None:
                        address = self.tokens[tid].address
                        group_name = f"{'K' if kind == 'X' else kind}_{plane}"
                        bank = self.layout.banks_for(address)[group_name]
                        xor = flipped ^ byte_view
                        for idx in np.nonzero(xor)[0]:
                            for bit in range(8):
                                if (int(xor[idx]) >> bit) & 1:
                                    self.flip_log.append(
                                        (ev.time, bank, address, bit + shift))
        return events

    # -- data path ----------------------------------------------------------

    def write_token(self, token_id: int, now: float, *, k_raw=None, v_raw=None,
                    x_raw=None, score_codes=None,
                    address: int | None = None) -> int:
        """Store a token's planes; freshly written data starts fully refreshed."""
        self.advance(now)
        if (k_raw is None) == (x_raw is None):
            raise ConfigurationError("provide either k/v planes or an input vector")
        if address is None:
            if not self._free:
                raise ConfigurationError("eDRAM capacity exceeded")
            address = self._free.pop()
        codes = np.asarray(score_codes, dtype=np.uint8)
        self.tokens[token_id] = _TokenData(
            address,
            None if k_raw is None else np.array(k_raw, dtype=np.uint16),
            None if v_raw is None else np.array(v_raw, dtype=np.uint16),
            None if x_raw is None else np.array(x_raw, dtype=np.uint16),
            codes,
        )
        self._reclassify()
        return address

    def evict_write(self, evicted_id: int, new_id: int, now: float, **payload) -> int:
        """Replace the evicted token at its own address in all four groups."""
        if evicted_id not in self.tokens:
            raise ConfigurationError(f"evict index for non-resident token {evicted_id}")
        address = self.tokens.pop(evicted_id).address
        self._hst.pop(evicted_id, None)
        self._hst_x.pop(evicted_id, None)
        return self.write_token(new_id, now, address=address, **payload)

    def read_token(self, token_id: int, now: float):
        """Merged (possibly corrupted) planes for a resident token."""
        self.advance(now)
        data = self.tokens.get(token_id)
        if data is None:
            raise CacheMissError(token_id)
        if data.x_raw is not None:
            return {"format": "input_vector", "x_raw": data.x_raw.copy()}
        return {"format": "kv_split", "k_raw": data.k_raw.copy(),
                "v_raw": data.v_raw.copy()}

    def occupancy(self) -> dict[int, int]:
        """Tokens per physical bank; identical across the four groups."""
        counts = {b: 0 for b in range(TOTAL_BANKS)}
        for data in self.tokens.values():
            for bank in self.layout.banks_for(data.address).values():
                counts[bank] += 1
        return counts
