"""Synthetic workloads, the newline-delimited trace format, and a vectorized
policy-replay engine sized for the paper-scale task geometries.

Attention rows are normalized per-token salience weights drawn log-normally;
the skew parameter sets how concentrated attention is. The mapping from skew
to expected Gini coefficient is erf(skew / 2), the closed form for the Gini
of a log-normal with sigma = skew. This is a documented stand-in for real
model attention, never a claim about model statistics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .aerp import CacheBudget, PopularitySnapshot, StorageFormat
from .attention import ROW_SUM_TOL
from .core import ConfigurationError, ModelShape, Rng

DEFAULT_SHAPE = ModelShape(channels=256, heads=4, layers=2)


@dataclass(frozen=True)
class WorkloadSpec:
    shape: ModelShape = DEFAULT_SHAPE
    n_cxt: int = 64
    decode_len: int = 256
    batch: int = 1
    skew: float = 1.0
    head_correlation: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.n_cxt < 0 or self.decode_len < 0:
            raise ConfigurationError("lengths must be nonnegative")
        if self.batch < 1:
            raise ConfigurationError("batch must be >= 1")
        if not 0.0 <= self.head_correlation <= 1.0:
            raise ConfigurationError("head correlation must lie in [0, 1]")

    @property
    def total_tokens(self) -> int:
        return self.n_cxt + self.decode_len


# Task-class geometries: (context, decode, budget, recent window, sinks).
PRESETS = {
    "la": dict(n_cxt=128, decode_len=512, n_prime=128, recent_window=64, sink_count=10),
    "tq": dict(n_cxt=512, decode_len=2048, n_prime=1024, recent_window=512, sink_count=10),
    "qa": dict(n_cxt=1024, decode_len=5120, n_prime=1024, recent_window=512, sink_count=10),
    "pg19": dict(n_cxt=512, decode_len=8192, n_prime=2048, recent_window=1024, sink_count=10),
}


def preset(name: str, shape: ModelShape = DEFAULT_SHAPE, seed: int = 0,
           skew: float = 1.0, batch: int = 1):
    """Named task geometry -> (WorkloadSpec, CacheBudget)."""
    try:
        p = PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    spec = WorkloadSpec(shape=shape, n_cxt=p["n_cxt"], decode_len=p["decode_len"],
                        seed=seed, skew=skew, batch=batch)
    budget = CacheBudget(p["n_prime"], p["sink_count"], p["recent_window"])
    return spec, budget


def target_gini(skew: float) -> float:
    """Population Gini of the log-normal salience weights."""
    return math.erf(skew / 2.0)


def gini(weights) -> float:
    """Sample Gini coefficient of nonnegative weights."""
    w = np.sort(np.asarray(weights, dtype=np.float64))
    n = w.shape[0]
    if n == 0 or w.sum() == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float((2.0 * (ranks * w).sum() / (n * w.sum())) - (n + 1.0) / n)


class SyntheticWorkload:
    """Deterministic salience tables per (layer, head, token).

    log-salience = skew * (rho * z_token + sqrt(1 - rho^2) * z_{head,token}),
    so heads correlate on which tokens matter while each head's marginal
    distribution keeps sigma = skew.
    """

    def __init__(self, spec: WorkloadSpec):
        self.spec = spec
        rng = Rng(spec.seed)
        shape = spec.shape
        n = spec.total_tokens
        self.log_salience = np.empty((shape.layers, shape.heads, n))
        rho = spec.head_correlation
        for layer in range(shape.layers):
            shared = rng.stream("salience-shared", layer).standard_normal(n)
            for h in range(shape.heads):
                own = rng.stream("salience-head", layer, h).standard_normal(n)
                z = rho * shared + math.sqrt(1.0 - rho * rho) * own
                self.log_salience[layer, h] = spec.skew * z

    def row(self, layer: int, head: int, token_ids) -> np.ndarray:
        """Normalized attention row over the given live tokens."""
        ids = np.asarray(token_ids, dtype=np.int64)
        lw = self.log_salience[layer, head, ids]
        w = np.exp(lw - lw.max())
        return w / w.sum()

    def prefill_matrix(self, layer: int, head: int) -> np.ndarray:
        """Causal n_cxt x n_cxt attention matrix (rows normalized)."""
        n = self.spec.n_cxt
        mat = np.zeros((n, n))
        for q in range(n):
            mat[q, :q + 1] = self.row(layer, head, np.arange(q + 1))
        return mat


@dataclass
class TraceRecord:
    step: int
    layer: int
    head: int
    token_ids: list[int]
    row: list[float]


def write_trace(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "step": rec.step, "layer": rec.layer, "head": rec.head,
                "token_ids": list(map(int, rec.token_ids)),
                "row": [float(x) for x in rec.row],
            }) + "\n")


class TraceFormatError(ValueError):
    pass


def load_trace(path) -> list[TraceRecord]:
    """Parse and validate a newline-delimited trace file."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = TraceRecord(int(obj["step"]), int(obj["layer"]),
                                  int(obj["head"]), list(obj["token_ids"]),
                                  [float(x) for x in obj["row"]])
            except (KeyError, TypeError, ValueError) as exc:
                raise TraceFormatError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if len(rec.token_ids) != len(rec.row):
                raise TraceFormatError(
                    f"{path}:{lineno}: row length {len(rec.row)} does not match "
                    f"{len(rec.token_ids)} token ids")
            total = sum(rec.row)
            if rec.row and abs(total - 1.0) > ROW_SUM_TOL:
                raise TraceFormatError(
                    f"{path}:{lineno}: row sums to {total!r}, expected 1")
            records.append(rec)
    return records


@dataclass
class StepInfo:
    index: int
    token_id: int
    evictions: int
    agreement: float


@dataclass
class LayerCensus:
    """Stored-byte census of one layer's cache, by storage format."""

    kv_pairs: int = 0      # (token, head) pairs stored as split K/V planes
    input_tokens: int = 0  # tokens stored as one shared input vector
    kv_bytes: int = 0
    input_bytes: int = 0

    @property
    def stored_bytes(self) -> int:
        return self.kv_bytes + self.input_bytes


class PolicyReplay:
    """Array-based replay of the eviction/recomputation policy.

    Semantics match aerp.PolicyCache exactly (same tie rules, same format
    freezing); this engine keeps per-head slots in flat arrays so paper-scale
    geometries run in seconds. It also tracks the raw-salience sums standing
    in for the pre-softmax hardware accumulation and reports how often that
    argmin agrees with the exact one.

    `evict` off models the original full cache; `recompute` off keeps every
    token in split K/V format (eviction-only policy). `recompute_cap` bounds
    how many tokens may hold input-vector format at once, keeping the
    per-step recomputation load inside the compute/bandwidth balance.
    """

    def __init__(self, spec: WorkloadSpec, budget: CacheBudget,
                 evict: bool = True, recompute: bool = True,
                 track_agreement: bool = True, record: bool = False,
                 recompute_cap: int | None = None):
        self.spec = spec
        self.budget = budget
        self.evict = evict
        self.recompute = recompute
        self.recompute_cap = recompute_cap
        self.track_agreement = track_agreement
        self.workload = SyntheticWorkload(spec)
        shape = spec.shape
        slots = budget.n_prime if evict else spec.total_tokens
        slots = max(slots, 1)
        L, H = shape.layers, shape.heads
        self.ids = np.full((L, H, slots), -1, dtype=np.int64)
        self.scores = np.zeros((L, H, slots))
        self.hw = np.zeros((L, H, slots))
        self.lens = np.zeros((L, H), dtype=np.int64)
        self.res_count = np.zeros((L, spec.total_tokens), dtype=np.int16)
        self.fmt = np.zeros((L, spec.total_tokens), dtype=np.int8)  # 1 = input vector
        self._census = [LayerCensus() for _ in range(L)]
        self.eviction_count = 0
        self.format_conversions = 0
        self.popularity_drops = 0
        self.agreement_votes = 0
        self.agreement_hits = 0
        self.records: list[TraceRecord] | None = [] if record else None
        self.prefill_snapshots: list[PopularitySnapshot] | None = None
        self._step = 0
        self._prefilled = False

    @property
    def decode_len(self) -> int:
        return self.spec.decode_len

    # -- census bookkeeping --------------------------------------------------

    def _pair_bytes(self) -> int:
        return 4 * self.spec.shape.head_dim  # K and V, 16-bit each

    def _input_vec_bytes(self) -> int:
        return 2 * self.spec.shape.channels

    def _add_pairs(self, layer: int, n: int) -> None:
        c = self._census[layer]
        c.kv_pairs += n
        c.kv_bytes += n * self._pair_bytes()

    def _may_convert(self, layer: int) -> bool:
        if self.recompute_cap is None:
            return True
        return self._census[layer].input_tokens < self.recompute_cap

    def _convert_to_input(self, layer: int, token: int) -> None:
        c = self._census[layer]
        resident = int(self.res_count[layer, token])
        self.fmt[layer, token] = 1
        self._add_pairs(layer, -resident)
        c.input_tokens += 1
        c.input_bytes += self._input_vec_bytes()
        self.format_conversions += 1

    def census(self, layer: int) -> LayerCensus:
        return self._census[layer]

    def resident_ids(self, layer: int, head: int) -> np.ndarray:
        return self.ids[layer, head, :self.lens[layer, head]]

    def popularity_snapshot(self, layer: int = 0) -> PopularitySnapshot:
        counts = self.res_count[layer]
        live = np.nonzero(counts > 0)[0]
        return PopularitySnapshot(self.spec.shape.heads,
                                  {int(t): int(counts[t]) for t in live})

    # -- replay --------------------------------------------------------------

    def prefill(self) -> None:
        from .aerp import prefill_select
        from .attention import prefill_scores

        spec, shape = self.spec, self.spec.shape
        self._prefilled = True
        if spec.n_cxt > 0:
            for layer in range(shape.layers):
                scores = np.empty((shape.heads, spec.n_cxt))
                for h in range(shape.heads):
                    scores[h] = prefill_scores(self.workload.prefill_matrix(layer, h))
                if self.evict:
                    selected = prefill_select(scores, self.budget, spec.n_cxt)
                else:
                    selected = [list(range(spec.n_cxt)) for _ in range(shape.heads)]
                for h, ids in enumerate(selected):
                    n = len(ids)
                    self.ids[layer, h, :n] = ids
                    self.scores[layer, h, :n] = scores[h, ids]
                    self.hw[layer, h, :n] = np.exp(
                        self.workload.log_salience[layer, h, ids])
                    self.lens[layer, h] = n
                    np.add.at(self.res_count[layer], ids, 1)
                live = np.nonzero(self.res_count[layer] > 0)[0]
                for t in live:
                    count = int(self.res_count[layer, t])
                    if self.recompute and 2 * count > shape.heads \
                            and self._may_convert(layer):
                        self._convert_to_input(layer, int(t))
                    else:
                        self._add_pairs(layer, count)
        self.prefill_snapshots = [self.popularity_snapshot(l)
                                  for l in range(shape.layers)]

    def step(self) -> StepInfo:
        if not self._prefilled:
            self.prefill()
        t = self._step
        token = self.spec.n_cxt + t
        if self.evict:
            info = self._step_evicting(t, token)
        else:
            info = self._step_full_cache(t, token)
        self._step += 1
        return info

    def _step_full_cache(self, t: int, token: int) -> StepInfo:
        """No-eviction path: residents are 0..token-1 in every head."""
        L, H = self.spec.shape.layers, self.spec.shape.heads
        n = int(self.lens[0, 0])
        lw = self.workload.log_salience[:, :, :token + 1]
        m = lw.max(axis=2, keepdims=True)
        w = np.exp(lw - m)
        rows = w / w.sum(axis=2, keepdims=True)
        self.scores[:, :, :n] += rows[:, :, :n]
        self.ids[:, :, n] = token
        self.scores[:, :, n] = rows[:, :, n]
        self.lens[:, :] = n + 1
        self.res_count[:, token] = H
        for layer in range(L):
            self._add_pairs(layer, H)
        if self.records is not None:
            for layer in range(L):
                for h in range(H):
                    self.records.append(TraceRecord(
                        t, layer, h, list(range(token + 1)),
                        rows[layer, h].tolist()))
        return StepInfo(t, token, 0, 1.0)

    def _step_evicting(self, t: int, token: int) -> StepInfo:
        spec, shape, budget = self.spec, self.spec.shape, self.budget
        evictions, hits, votes = 0, 0, 0
        for layer in range(shape.layers):
            sal = self.workload.log_salience[layer]
            touched: list[int] = []
            for h in range(shape.heads):
                n = int(self.lens[layer, h])
                ids = self.ids[layer, h, :n]
                lw_res = sal[h, ids]
                lw_new = sal[h, token]
                m = max(lw_res.max(), lw_new) if n else lw_new
                w = np.exp(lw_res - m)
                w_new = math.exp(lw_new - m)
                norm = w.sum() + w_new
                self.scores[layer, h, :n] += w / norm
                new_score = w_new / norm
                new_hw = math.exp(lw_new)
                if self.track_agreement:
                    self.hw[layer, h, :n] += np.exp(lw_res)
                    if n:
                        s = self.scores[layer, h, :n]
                        exact = ids[s == s.min()].min()
                        hwv = self.hw[layer, h, :n]
                        votes += 1
                        hits += int(exact == ids[hwv == hwv.min()].min())
                if self.records is not None:
                    self.records.append(TraceRecord(
                        t, layer, h, ids.tolist() + [token],
                        np.append(w / norm, new_score).tolist()))
                if n == budget.n_prime:
                    protected = (ids < budget.sink_count) | \
                                (ids >= token - budget.recent_window)
                    cand = np.nonzero(~protected)[0]
                    if cand.size == 0:
                        raise ConfigurationError("no evictable resident")
                    cs = self.scores[layer, h, cand]
                    lowest = cand[cs == cs.min()]
                    slot = int(lowest[np.argmin(ids[lowest])])
                    victim = int(ids[slot])
                    evictions += 1
                    touched.append(victim)
                    self.res_count[layer, victim] -= 1
                    left = int(self.res_count[layer, victim])
                    if self.fmt[layer, victim] == 0:
                        self._add_pairs(layer, -1)
                    else:
                        if left > 0 and 2 * left <= shape.heads:
                            self.popularity_drops += 1
                        if left == 0:
                            c = self._census[layer]
                            c.input_tokens -= 1
                            c.input_bytes -= self._input_vec_bytes()
                    self.ids[layer, h, slot] = token
                    self.scores[layer, h, slot] = new_score
                    self.hw[layer, h, slot] = new_hw
                else:
                    self.ids[layer, h, n] = token
                    self.scores[layer, h, n] = new_score
                    self.hw[layer, h, n] = new_hw
                    self.lens[layer, h] += 1
                self.res_count[layer, token] += 1
                self._add_pairs(layer, 1)
            # Format decisions follow the eviction round, mirroring PolicyCache.
            if self.recompute:
                for victim in sorted(set(touched)):
                    left = int(self.res_count[layer, victim])
                    if left > 0 and self.fmt[layer, victim] == 0 \
                            and 2 * left > shape.heads and self._may_convert(layer):
                        self._convert_to_input(layer, victim)
        self.eviction_count += evictions
        self.agreement_votes += votes
        self.agreement_hits += hits
        return StepInfo(t, token, evictions, hits / votes if votes else 1.0)

    def steps(self):
        for _ in range(self.spec.decode_len):
            yield self.step()

    def run(self) -> "PolicyReplay":
        for _ in self.steps():
            pass
        return self

    @property
    def agreement_rate(self) -> float:
        if self.agreement_votes == 0:
            return 1.0
        return self.agreement_hits / self.agreement_votes

    def end_snapshot(self, layer: int = 0) -> PopularitySnapshot:
        return self.popularity_snapshot(layer)


class TraceReplay:
    """Replays an externally supplied trace through the policy.

    The records are the workload: rows drive score accumulation and the
    policy evicts under the configured budget. Each record's resident ids
    must match the policy's slot order exactly; a mismatch means the trace
    was produced under a different configuration. Scores start cold (traces
    carry no prefill pass). Desk scale only.
    """

    def __init__(self, records: list[TraceRecord], spec: WorkloadSpec,
                 budget: CacheBudget, evict: bool = True, recompute: bool = True,
                 recompute_cap: int | None = None):
        from .aerp import PolicyCache
        from .attention import ImportanceTable

        self.spec = spec
        self.budget = budget
        self.evict = evict
        self.recompute = recompute
        shape = spec.shape
        self.by_step: dict[int, dict[tuple, TraceRecord]] = {}
        for rec in records:
            if rec.layer >= shape.layers or rec.head >= shape.heads:
                raise TraceFormatError(
                    f"record addresses layer {rec.layer}/head {rec.head} beyond "
                    f"the configured shape")
            self.by_step.setdefault(rec.step, {})[(rec.layer, rec.head)] = rec
        self.decode_len = max(self.by_step) + 1 if self.by_step else 0
        self.caches = [PolicyCache(shape, budget, recompute_cap=recompute_cap)
                       for _ in range(shape.layers)]
        self.tables = [ImportanceTable(shape.heads) for _ in range(shape.layers)]
        self.eviction_count = 0
        self.popularity_drops = 0
        self.agreement_rate = 1.0
        self.prefill_snapshots = None
        self._step = 0
        self._prefilled = False

    @property
    def format_conversions(self) -> int:
        return sum(c.format_conversions for c in self.caches)

    @property
    def lens(self):
        return np.array([[len(slots) for slots in cache.slots]
                         for cache in self.caches], dtype=np.int64)

    def census(self, layer: int) -> LayerCensus:
        cache = self.caches[layer]
        c = LayerCensus()
        for entry in cache.entries.values():
            if entry.format is StorageFormat.INPUT_VECTOR:
                c.input_tokens += 1
                c.input_bytes += 2 * self.spec.shape.channels
            else:
                c.kv_pairs += entry.resident_heads
                c.kv_bytes += 4 * self.spec.shape.head_dim * entry.resident_heads
        return c

    def popularity_snapshot(self, layer: int = 0) -> PopularitySnapshot:
        return PopularitySnapshot.from_cache(self.caches[layer])

    def prefill(self) -> None:
        """Admit the residents implied by the first step's records."""
        self._prefilled = True
        first = self.by_step.get(0, {})
        for (layer, h), rec in first.items():
            for tid in rec.token_ids[:-1]:
                self.caches[layer]._insert(h, tid, None)
                self.tables[layer].scores[h][tid] = 0.0
        self.prefill_snapshots = [self.popularity_snapshot(l)
                                  for l in range(self.spec.shape.layers)]

    def step(self) -> StepInfo:
        if not self._prefilled:
            self.prefill()
        t = self._step
        shape = self.spec.shape
        token = None
        evictions = 0
        for layer in range(shape.layers):
            cache, table = self.caches[layer], self.tables[layer]
            for h in range(shape.heads):
                rec = self.by_step.get(t, {}).get((layer, h))
                if rec is None:
                    raise TraceFormatError(
                        f"trace is missing step {t} layer {layer} head {h}")
                ids = rec.token_ids[:-1]
                token = rec.token_ids[-1]
                if ids != list(cache.residents(h)):
                    raise TraceFormatError(
                        f"step {t} layer {layer} head {h}: trace ids do not "
                        f"match the policy's residents; the trace was recorded "
                        f"under a different configuration")
                table.accumulate(h, rec.row, ids, new_token=token)
            if self.evict:
                evs = cache.admit_decoding(token, table, step=t)
                evictions += len(evs)
            else:
                for h in range(shape.heads):
                    cache._insert(h, token, None)
            if not self.recompute:
                for entry in cache.entries.values():
                    entry.format = StorageFormat.KV_SPLIT
        self.eviction_count += evictions
        self.popularity_drops = sum(c.popularity_drops for c in self.caches)
        self._step += 1
        return StepInfo(t, token if token is not None else -1, evictions, 1.0)

    def run(self) -> "TraceReplay":
        for _ in range(self.decode_len):
            self.step()
        return self


def materialize_trace(spec: WorkloadSpec, budget: CacheBudget, evict: bool = True,
                      recompute: bool = True) -> list[TraceRecord]:
    """Run the replay with row capture; intended for desk-scale geometries."""
    replay = PolicyReplay(spec, budget, evict=evict, recompute=recompute,
                          record=True)
    replay.run()
    return replay.records


def resident_formats(replay: PolicyReplay, layer: int = 0) -> dict[int, StorageFormat]:
    counts = replay.res_count[layer]
    live = np.nonzero(counts > 0)[0]
    return {int(t): (StorageFormat.INPUT_VECTOR if replay.fmt[layer, t] else
                     StorageFormat.KV_SPLIT) for t in live}
