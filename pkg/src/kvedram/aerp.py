"""Attention-based eviction and recomputation policy.

Per-head caches evict the lowest-importance evictable token when full; sink
tokens and a sliding recent window are never evicted. Tokens that stay
resident in a strict majority of heads after an eviction round switch to
storing the shared input vector instead of per-head K/V, and that format is
frozen until the token is fully evicted.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .attention import ImportanceTable
from .core import ConfigurationError, ModelShape, encode_q88

BYTES_PER_ELEM = 2  # 16-bit stored values


class StorageFormat(enum.Enum):
    KV_SPLIT = "kv_split"
    INPUT_VECTOR = "input_vector"


@dataclass(frozen=True)
class CacheBudget:
    """Per-head token budget with protected sink and recent-window counts."""

    n_prime: int
    sink_count: int = 0
    recent_window: int = 0

    def __post_init__(self):
        if min(self.n_prime, self.sink_count, self.recent_window) < 0:
            raise ConfigurationError("budget fields must be nonnegative")
        if self.sink_count + self.recent_window >= self.n_prime:
            raise ConfigurationError(
                "sink_count + recent_window must leave at least one evictable slot"
            )

    def is_sink(self, token_id: int) -> bool:
        return token_id < self.sink_count

    def is_recent(self, token_id: int, incoming_id: int) -> bool:
        return token_id >= incoming_id - self.recent_window


@dataclass
class CacheEntry:
    """One token's storage record: format plus per-head residency bitmap."""

    token_id: int
    format: StorageFormat
    residency: np.ndarray  # bool per head

    @property
    def resident_heads(self) -> int:
        return int(self.residency.sum())


@dataclass(frozen=True)
class EvictionEvent:
    head: int
    evicted: int
    incoming: int
    step: int


def choose_format(residency, heads: int) -> StorageFormat:
    """Input-vector storage iff the token is resident in a strict majority of heads."""
    resident = int(np.asarray(residency, dtype=bool).sum())
    if np.asarray(residency).shape != (heads,):
        raise ConfigurationError(f"residency bitmap must have length {heads}")
    return StorageFormat.INPUT_VECTOR if resident * 2 > heads else StorageFormat.KV_SPLIT


def stored_bytes_input(channels: int) -> int:
    """Bytes to hold one shared input vector (length C, 16-bit)."""
    return channels * BYTES_PER_ELEM


def stored_bytes_kv(channels: int, heads: int, resident_heads: int) -> int:
    """Bytes to hold per-head K and V vectors across the heads still resident."""
    if channels % heads != 0:
        raise ConfigurationError("heads must divide channels")
    return 2 * (channels // heads) * resident_heads * BYTES_PER_ELEM


class PolicyCache:
    """Mutable per-sequence cache state for one layer.

    Each head owns a slot list; eviction overwrites the evicted slot in place,
    mirroring the shared-address bank layout. The attention output is invariant
    to slot order, so the policy never compacts or reorders.
    """

    def __init__(self, shape: ModelShape, budget: CacheBudget,
                 recompute_cap: int | None = None):
        self.shape = shape
        self.budget = budget
        self.recompute_cap = recompute_cap
        self.slots: list[list[int]] = [[] for _ in range(shape.heads)]
        self.entries: dict[int, CacheEntry] = {}
        self.eviction_count = 0
        self.format_conversions = 0
        self.popularity_drops = 0

    def _input_token_count(self) -> int:
        return sum(1 for e in self.entries.values()
                   if e.format is StorageFormat.INPUT_VECTOR)

    def _may_convert(self) -> bool:
        if self.recompute_cap is None:
            return True
        return self._input_token_count() < self.recompute_cap

    def residents(self, head: int) -> list[int]:
        return self.slots[head]

    def resident_set(self, head: int) -> set[int]:
        return set(self.slots[head])

    def _insert(self, head: int, token_id: int, slot: int | None) -> None:
        if slot is None:
            self.slots[head].append(token_id)
        else:
            self.slots[head][slot] = token_id
        entry = self.entries.get(token_id)
        if entry is None:
            residency = np.zeros(self.shape.heads, dtype=bool)
            entry = CacheEntry(token_id, StorageFormat.KV_SPLIT, residency)
            self.entries[token_id] = entry
        entry.residency[head] = True

    def _drop_residency(self, token_id: int, head: int) -> None:
        entry = self.entries[token_id]
        entry.residency[head] = False
        if entry.resident_heads == 0:
            del self.entries[token_id]
        elif entry.format is StorageFormat.INPUT_VECTOR:
            if entry.resident_heads * 2 <= self.shape.heads:
                self.popularity_drops += 1  # format stays frozen

    def admit_prefill(self, resident_ids_per_head: list[list[int]]) -> None:
        """Load the post-selection prefill residents and fix initial formats."""
        for h, ids in enumerate(resident_ids_per_head):
            for tid in ids:
                self._insert(h, tid, None)
        for tid in sorted(self.entries):
            entry = self.entries[tid]
            fmt = choose_format(entry.residency, self.shape.heads)
            if fmt is StorageFormat.INPUT_VECTOR and self._may_convert():
                entry.format = fmt
                self.format_conversions += 1

    def admit_decoding(self, new_token: int, scores: ImportanceTable,
                       step: int = 0) -> list[EvictionEvent]:
        """Admit one decoded token into every head, evicting where full."""
        budget = self.budget
        events: list[EvictionEvent] = []
        touched: list[int] = []
        for h in range(self.shape.heads):
            slots = self.slots[h]
            if len(slots) < budget.n_prime:
                self._insert(h, new_token, None)
                continue
            table = scores.scores[h]
            best_slot, best_key = -1, None
            for idx, tid in enumerate(slots):
                if budget.is_sink(tid) or budget.is_recent(tid, new_token):
                    continue
                key = (table[tid], tid)
                if best_key is None or key < best_key:
                    best_slot, best_key = idx, key
            if best_key is None:
                raise ConfigurationError("no evictable resident; budget too tight")
            victim = slots[best_slot]
            events.append(EvictionEvent(h, victim, new_token, step))
            self._drop_residency(victim, h)
            scores.drop(h, victim)
            self._insert(h, new_token, best_slot)
            touched.append(victim)
        self.eviction_count += len(events)
        for tid in sorted(set(touched)):
            entry = self.entries.get(tid)
            if entry is not None and entry.format is StorageFormat.KV_SPLIT:
                if choose_format(entry.residency, self.shape.heads) \
                        is StorageFormat.INPUT_VECTOR and self._may_convert():
                    entry.format = StorageFormat.INPUT_VECTOR
                    self.format_conversions += 1
        return events

    def byte_census(self) -> dict[str, int]:
        """Stored bytes by format, for energy accounting and economy checks."""
        kv = inp = 0
        for entry in self.entries.values():
            if entry.format is StorageFormat.INPUT_VECTOR:
                inp += stored_bytes_input(self.shape.channels)
            else:
                kv += stored_bytes_kv(self.shape.channels, self.shape.heads,
                                      entry.resident_heads)
        return {"kv_split_bytes": kv, "input_vector_bytes": inp}

    def format_mix(self) -> dict[str, int]:
        counts = {"kv_split": 0, "input_vector": 0}
        for entry in self.entries.values():
            counts[entry.format.value] += 1
        return counts


def prefill_select(scores, budget: CacheBudget, n_cxt: int) -> list[list[int]]:
    """Per-head prefill retention: sinks, recents, then top scores (ties: low id)."""
    if n_cxt < 1:
        raise ConfigurationError("prefill length must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != n_cxt:
        raise ConfigurationError("scores must have shape (heads, n_cxt)")
    ids = np.arange(n_cxt)
    if n_cxt <= budget.n_prime:
        return [list(ids) for _ in range(scores.shape[0])]
    protected = (ids < budget.sink_count) | (ids >= n_cxt - budget.recent_window)
    free_ids = ids[~protected]
    keep_free = budget.n_prime - int(protected.sum())
    selected = []
    for h in range(scores.shape[0]):
        order = np.lexsort((free_ids, -scores[h, free_ids]))
        chosen = free_ids[order[:keep_free]]
        selected.append(sorted(ids[protected].tolist() + chosen.tolist()))
    return selected


def recompute_kv(x_raw, w_k, w_v, shape: ModelShape):
    """Recompute per-head K/V planes from a stored input vector.

    Pure function of (x, W_K, W_V): replaying it yields bit-exactly the vectors
    produced at the token's first computation.
    """
    from .core import decode_q88

    x_raw = np.asarray(x_raw)
    if x_raw.shape != (shape.channels,):
        raise ConfigurationError(f"input vector must have length {shape.channels}")
    w_k = np.asarray(w_k, dtype=np.float64)
    w_v = np.asarray(w_v, dtype=np.float64)
    if w_k.shape != (shape.channels, shape.channels) or w_v.shape != w_k.shape:
        raise ConfigurationError("projection matrices must be C x C")
    x = decode_q88(x_raw)
    k = encode_q88(x @ w_k).reshape(shape.heads, shape.head_dim)
    v = encode_q88(x @ w_v).reshape(shape.heads, shape.head_dim)
    return k, v


@dataclass
class PopularitySnapshot:
    """Residency counts per token at one instant, for stability measurement."""

    heads: int
    resident_heads: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_cache(cls, cache: PolicyCache) -> "PopularitySnapshot":
        return cls(cache.shape.heads,
                   {t: e.resident_heads for t, e in cache.entries.items()})

    def popular(self) -> set[int]:
        return {t for t, r in self.resident_heads.items() if r * 2 > self.heads}


def popularity_stability(at_prefill: PopularitySnapshot,
                         at_end: PopularitySnapshot) -> float:
    """Fraction of prefill-popular tokens still popular at decode end."""
    start = at_prefill.popular()
    if not start:
        return 1.0
    return len(start & at_end.popular()) / len(start)
