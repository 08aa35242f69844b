"""Analytical latency/energy/data-lifetime model and the five comparison
system configurations.

Latency terms follow the three access-time quotients (compute ops over array
throughput, KV bytes over KV-store bandwidth, weight bytes over SRAM
bandwidth). Energy is strictly additive over the breakdown categories.
Refresh costs energy but hides behind execution, except that each refresh
pass colliding with demand traffic is charged one stall cycle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .core import ConfigurationError, Rng
from .edram import (DEFAULT_INTERVALS, RefreshController, RetentionModel,
                    RETENTION_TIME, uniform_intervals)
from .microarch import RsaConfig, mm_ops
from .report import RunReport
from .workload import CacheBudget, PolicyReplay, WorkloadSpec

KIB = 1024
MIB = 1024 * 1024
GIB = 1024 * MIB


class CapacityError(RuntimeError):
    """Workload footprint exceeds the configured DRAM capacity."""


@dataclass(frozen=True)
class SramParams:
    access_j_per_byte: float = 185.9e-12
    leakage_w: float = 0.415          # per reference 4 MiB array
    bandwidth: float = 128e9
    reference_bytes: int = 4 * MIB


@dataclass(frozen=True)
class EdramParams:
    access_j_per_byte: float = 84.8e-12
    leakage_w: float = 0.154          # per reference 4 MiB array
    refresh_j_per_pass: float = 1.14e-3   # full reference-array pass
    retention_s: float = RETENTION_TIME
    bandwidth: float = 256e9
    reference_bytes: int = 4 * MIB

    @property
    def refresh_j_per_byte(self) -> float:
        return self.refresh_j_per_pass / self.reference_bytes


@dataclass(frozen=True)
class DramParams:
    bandwidth: float = 64e9
    # No published figure exists for this; the default is a plausible LPDDR4
    # system-level cost and is configuration, not ground truth.
    energy_j_per_byte: float = 120e-12
    capacity_bytes: int = 16 * GIB


@dataclass(frozen=True)
class TechParams:
    sram: SramParams = field(default_factory=SramParams)
    edram: EdramParams = field(default_factory=EdramParams)
    dram: DramParams = field(default_factory=DramParams)
    rsa_energy_j_per_op: float = 0.05e-12

    def __post_init__(self):
        if self.edram.access_j_per_byte >= self.sram.access_j_per_byte:
            raise ConfigurationError("eDRAM access energy must undercut SRAM")
        for val in (self.sram.bandwidth, self.edram.bandwidth,
                    self.dram.bandwidth, self.rsa_energy_j_per_op):
            if val <= 0:
                raise ConfigurationError("tech parameters must be positive")


def t_mm(n_ops: int, top_rsa: float) -> float:
    """Matrix-multiply time: op count over array throughput."""
    if top_rsa <= 0:
        raise ConfigurationError("throughput must be positive")
    return n_ops / top_rsa


def t_edram(kv_bytes: float, bandwidth: float) -> float:
    """KV access time: bytes over KV-store bandwidth."""
    if bandwidth <= 0:
        raise ConfigurationError("bandwidth must be positive")
    return kv_bytes / bandwidth


def t_sram(weight_bytes: float, bandwidth: float) -> float:
    """Weight access time: bytes over SRAM bandwidth."""
    if bandwidth <= 0:
        raise ConfigurationError("bandwidth must be positive")
    return weight_bytes / bandwidth


# -- data lifetime --------------------------------------------------------
#
# One self-attention step touches X (block input), Q, K, V. Each schedule
# below lists ops as (name, predecessors, duration, births, consumes); an
# intermediate's lifetime runs from the end of the op that births it to the
# start of the op that consumes it. Ops within one memory port chain on each
# other; the overlapped schedule runs the KV-cache read in parallel with the
# value-weight load and streams fresh K/V into compute at birth.

_SERIAL_SCHEDULE = (
    ("load_wq", (), "sram", (), ()),
    ("mm_q", ("load_wq",), None, ("Q",), ()),
    ("load_wk", ("load_wq",), "sram", (), ()),
    ("mm_k", ("load_wk",), None, ("K",), ()),
    ("load_wv", ("load_wk",), "sram", (), ()),
    ("mm_v", ("load_wv",), None, ("V",), ("X",)),
    ("read_kcache", ("load_wv",), "edram", (), ()),
    ("mm_qk", ("read_kcache",), None, (), ("Q", "K")),
    ("softmax", ("mm_qk",), None, (), ()),
    ("read_vcache", ("read_kcache",), "edram", (), ()),
    ("mm_av", ("read_vcache",), None, (), ("V",)),
)

_OVERLAPPED_SCHEDULE = (
    ("load_wq", (), "sram", (), ()),
    ("mm_q", ("load_wq",), None, ("Q",), ()),
    ("load_wk", ("load_wq",), "sram", (), ()),
    ("mm_k", ("load_wk",), None, ("K",), ()),
    ("stream_k", ("mm_k",), None, (), ("K",)),
    ("read_kcache", ("load_wk",), "edram", (), ()),
    ("load_wv", ("load_wk",), "sram", (), ()),
    ("mm_v", ("load_wv",), None, ("V",), ("X",)),
    ("stream_v", ("mm_v",), None, (), ("V",)),
    ("mm_qk", ("read_kcache",), None, (), ("Q",)),
    ("softmax", ("mm_qk",), None, (), ()),
    ("mm_av", ("softmax",), None, (), ()),
)

_SCHEDULES = {"serial": _SERIAL_SCHEDULE, "overlapped": _OVERLAPPED_SCHEDULE}


def replay_lifetimes(schedule: str, t_sram_val, t_edram_val) -> dict:
    """Event-driven replay of one SA step; works on floats or symbols."""
    try:
        ops = _SCHEDULES[schedule]
    except KeyError:
        raise ConfigurationError(f"unknown schedule {schedule!r}") from None
    durations = {"sram": t_sram_val, "edram": t_edram_val, None: 0}
    end, born, consumed = {}, {"X": 0}, {}
    for name, after, dur, births, consumes in ops:
        if len(after) > 1:
            start = max(end[a] for a in after)
        else:
            start = end[after[0]] if after else 0
        end[name] = start + durations[dur]
        for sym in births:
            born[sym] = end[name]
        for sym in consumes:
            consumed[sym] = start
    out = {sym: consumed[sym] - born[sym] for sym in ("X", "Q", "K", "V")}
    out["total"] = out["X"] + out["Q"] + out["K"] + out["V"]
    return out


def lifetime_serial(t_sram_val, t_edram_val) -> dict:
    """Closed form for the serial schedule: total 6*T_SRAM + 4*T_eDRAM."""
    s, e = t_sram_val, t_edram_val
    out = {"X": 3 * s, "Q": 2 * s + e, "K": s + e, "V": 2 * e}
    out["total"] = 6 * s + 4 * e
    return out


def lifetime_overlapped(t_sram_val, t_edram_val) -> dict:
    """Closed form for the overlapped schedule: total 4*T_SRAM + T_eDRAM.

    Fresh K and V stream straight into compute, so their lifetimes vanish.
    """
    s, e = t_sram_val, t_edram_val
    out = {"X": 3 * s, "Q": s + e, "K": 0 * s, "V": 0 * s}
    out["total"] = 4 * s + e
    return out


def recompute_tradeoff(alpha: float, n_vectors: int, load_latency: float,
                       recompute_latency: float, residue: float = 0.0) -> float:
    """Latency of serving n vectors when a fraction alpha is recomputed.

    Loads and recomputation overlap; the slower stream dominates, plus any
    non-overlappable residue.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError("alpha must lie in [0, 1]")
    load_time = (1.0 - alpha) * n_vectors * load_latency
    recompute_time = alpha * n_vectors * recompute_latency
    return max(load_time, recompute_time) + residue


# -- system configurations -------------------------------------------------

@dataclass(frozen=True)
class SystemConfig:
    """One comparison point: memory technology plus policy toggles."""

    name: str
    kv_memory: str                     # "sram" | "edram"
    rsa: RsaConfig
    eviction: bool
    recomputation: bool
    adaptive_refresh: bool
    overlapped_schedule: bool
    kv_capacity_bytes: int = 4 * MIB
    weight_sram_bytes: int = 2 * MIB
    activation_edram_bytes: int = 256 * KIB
    refresh_interval_s: float = RETENTION_TIME
    recompute_cap: int | None = None   # None = compute/bandwidth balance point

    def __post_init__(self):
        if self.kv_memory not in ("sram", "edram"):
            raise ConfigurationError(f"unknown kv memory {self.kv_memory!r}")
        if self.kv_memory == "sram" and self.adaptive_refresh:
            raise ConfigurationError("adaptive refresh applies to eDRAM only")
        if self.refresh_interval_s <= 0:
            raise ConfigurationError("refresh interval must be positive")

    def refresh_intervals(self) -> dict:
        if self.adaptive_refresh:
            return dict(DEFAULT_INTERVALS)
        return uniform_intervals(self.refresh_interval_s)


def _sram_rsa() -> RsaConfig:
    # Area-equalized SRAM baseline trades array size for capacity.
    return RsaConfig(rows=24, cols=24)


SYSTEM_NAMES = ("orig-sram", "orig-edram", "aep-sram", "aerp-sram", "full-edram")


def system_config(name: str, **overrides) -> SystemConfig:
    base = {
        "orig-sram": SystemConfig("orig-sram", "sram", _sram_rsa(),
                                  eviction=False, recomputation=False,
                                  adaptive_refresh=False, overlapped_schedule=False),
        "orig-edram": SystemConfig("orig-edram", "edram", RsaConfig(),
                                   eviction=False, recomputation=False,
                                   adaptive_refresh=False, overlapped_schedule=False),
        "aep-sram": SystemConfig("aep-sram", "sram", _sram_rsa(),
                                 eviction=True, recomputation=False,
                                 adaptive_refresh=False, overlapped_schedule=False),
        "aerp-sram": SystemConfig("aerp-sram", "sram", _sram_rsa(),
                                  eviction=True, recomputation=True,
                                  adaptive_refresh=False, overlapped_schedule=False),
        "full-edram": SystemConfig("full-edram", "edram", RsaConfig(),
                                   eviction=True, recomputation=True,
                                   adaptive_refresh=True, overlapped_schedule=True),
    }
    try:
        cfg = base[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown system {name!r}; choose from {SYSTEM_NAMES}") from None
    return replace(cfg, **overrides) if overrides else cfg


def default_recompute_cap(budget: CacheBudget, channels: int,
                          rsa: RsaConfig, kv_bandwidth: float) -> int:
    """Recompute set sized so its per-step compute hides under the KV stream.

    Reading one resident (token, head-set) costs ~4C bytes; recomputing one
    input-format token costs 4C^2 ops, so the two streams balance at
    N' * TOP / (B_kv * C) input-format tokens. Half that keeps the
    recomputation overlapped with margin once input-format storage shrinks
    the stream it hides behind.
    """
    balance = rsa.top_rsa / (kv_bandwidth * channels)
    return max(1, int(budget.n_prime * balance / 2))


# -- the run itself ---------------------------------------------------------

def run_config(system: SystemConfig, spec: WorkloadSpec, budget: CacheBudget,
               tech: TechParams | None = None,
               retention: RetentionModel | None = None,
               refresh_intervals: dict | None = None,
               sim_seed: int | None = None,
               trace=None) -> RunReport:
    """Simulate one configuration over one workload; pure in (config, seeds).

    `sim_seed` drives only the stochastic retention failures, so two runs
    differing in sim_seed alone report identical compute/latency figures.
    """
    tech = tech or TechParams()
    retention = retention or RetentionModel()
    shape = spec.shape
    C, H, L, B = shape.channels, shape.heads, shape.layers, spec.batch
    d = shape.head_dim
    is_edram = system.kv_memory == "edram"
    kv_bw = tech.edram.bandwidth if is_edram else tech.sram.bandwidth
    kv_pj = tech.edram.access_j_per_byte if is_edram else tech.sram.access_j_per_byte
    top = system.rsa.top_rsa
    if sim_seed is None:
        sim_seed = spec.seed

    cap = system.recompute_cap
    if system.recomputation and cap is None:
        cap = default_recompute_cap(budget, C, system.rsa, kv_bw)

    if trace is not None:
        from .workload import TraceReplay
        replay = TraceReplay(trace, spec, budget, evict=system.eviction,
                             recompute=system.recomputation, recompute_cap=cap)
    else:
        replay = PolicyReplay(spec, budget, evict=system.eviction,
                              recompute=system.recomputation,
                              track_agreement=system.eviction,
                              recompute_cap=cap)
    replay.prefill()

    intervals = refresh_intervals or system.refresh_intervals()
    controller = None
    if is_edram:
        controller = RefreshController(intervals, tech.edram.refresh_j_per_byte,
                                       model=retention, rng=Rng(sim_seed))

    weight_bytes_layer = 4 * C * C          # 8-bit Wq, Wk, Wv, Wo
    weight_bytes_total = L * weight_bytes_layer
    new_token_write = 4 * C                 # fresh 16-bit K and V

    energy = {k: 0.0 for k in ("rsa_compute", "sram_weights", "kv_access",
                               "refresh", "leakage", "dram")}
    lat = {k: 0.0 for k in ("prefill", "compute", "weight_access",
                            "kv_access", "dram", "stalls")}
    lifetime = {k: 0.0 for k in ("X", "Q", "K", "V", "total")}
    ops_total = 0
    sram_bytes_total = 0.0
    onchip_bytes_total = 0.0
    dram_bytes_total = float(weight_bytes_total)   # initial weight load
    recompute_events = 0
    stall_cycles = 0

    # Prefill block: parallel context pass, then selection trims the cache.
    prefill_time = weight_bytes_total / tech.dram.bandwidth
    if trace is None and spec.n_cxt > 0:
        n = spec.n_cxt
        ops = B * L * (n * 8 * C * C + 4 * C * n * (n + 1) // 2)
        write_bytes = B * L * n * new_token_write
        onchip_frac = min(1.0, system.kv_capacity_bytes / write_bytes)
        onchip = write_bytes * onchip_frac
        spill = write_bytes - onchip
        ops_total += ops
        sram_bytes_total += weight_bytes_total
        onchip_bytes_total += onchip
        dram_bytes_total += spill
        prefill_time += (ops / top + weight_bytes_total / tech.sram.bandwidth
                         + onchip / kv_bw + spill / tech.dram.bandwidth)
    lat["prefill"] = prefill_time

    decode_clock = 0.0  # refresh timeline runs over the decode phase
    sal_cap = system.kv_capacity_bytes

    for _ in range(replay.decode_len):
        stored = sum(replay.census(l).stored_bytes for l in range(L)) * B
        onchip_frac = min(1.0, sal_cap / stored) if stored else 1.0
        spill_stored = max(0.0, stored - sal_cap)
        if spill_stored + weight_bytes_total > tech.dram.capacity_bytes:
            raise CapacityError(
                f"{spill_stored + weight_bytes_total:.3e} B exceeds DRAM capacity")

        step_time = 0.0
        for layer in range(L):
            census = replay.census(layer)
            resident_pairs = int(replay.lens[layer].sum())
            n_inp = census.input_tokens
            read_bytes = B * (census.kv_bytes + census.input_bytes)
            write_bytes = B * new_token_write
            access = read_bytes + write_bytes
            onchip = access * onchip_frac
            spill = access - onchip

            base_ops = B * (8 * C * C + 4 * d * (resident_pairs + H))
            rec_ops = B * n_inp * mm_ops(1, C, C) * 2
            recompute_events += B * n_inp

            tw = t_sram(weight_bytes_layer, tech.sram.bandwidth)
            tk = t_edram(onchip, kv_bw)
            td = spill / tech.dram.bandwidth
            tc_base = t_mm(base_ops, top)
            tc_rec = t_mm(rec_ops, top)

            if system.overlapped_schedule:
                layer_time = max(tw, tk, tc_rec) + td + tc_base
                life = lifetime_overlapped(tw, tk)
            else:
                layer_time = tw + tk + td + tc_base + max(0.0, tc_rec - tk - td)
                life = lifetime_serial(tw, tk)
            step_time += layer_time

            for key in lifetime:
                lifetime[key] += life[key]
            if is_edram:
                act_bytes = B * 8 * C  # X, Q, K, V at 16-bit
                passes = math.floor(life["total"] / tech.edram.retention_s)
                energy["refresh"] += passes * act_bytes * tech.edram.refresh_j_per_byte

            ops_total += base_ops + rec_ops
            sram_bytes_total += weight_bytes_layer
            onchip_bytes_total += onchip
            dram_bytes_total += spill
            lat["weight_access"] += tw
            lat["kv_access"] += tk
            lat["dram"] += td
            lat["compute"] += tc_base + tc_rec

        decode_clock += step_time
        if controller is not None:
            onchip_stored = min(float(stored), float(sal_cap))
            census_q = int(onchip_stored // 4)
            events = controller.advance(decode_clock, lambda key: census_q)
            stall_cycles += sum(1 for ev in events if ev.refreshed_bytes > 0)
        replay.step()

    stall_time = stall_cycles / system.rsa.clock_hz
    lat["stalls"] = stall_time
    makespan = prefill_time + decode_clock + stall_time

    energy["rsa_compute"] = ops_total * tech.rsa_energy_j_per_op
    energy["sram_weights"] = sram_bytes_total * tech.sram.access_j_per_byte
    energy["kv_access"] = onchip_bytes_total * kv_pj
    energy["dram"] = dram_bytes_total * tech.dram.energy_j_per_byte
    if controller is not None:
        energy["refresh"] += controller.total_energy_j

    leak_w = tech.sram.leakage_w * system.weight_sram_bytes / tech.sram.reference_bytes
    if is_edram:
        leak_w += tech.edram.leakage_w * (
            system.kv_capacity_bytes + system.activation_edram_bytes
        ) / tech.edram.reference_bytes
    else:
        leak_w += tech.sram.leakage_w * system.kv_capacity_bytes / tech.sram.reference_bytes
    energy["leakage"] = leak_w * makespan

    final_census = [replay.census(l) for l in range(L)]
    policy = {
        "evictions": replay.eviction_count,
        "recomputations": recompute_events,
        "format_conversions": replay.format_conversions,
        "popularity_drops": replay.popularity_drops,
        "injected_flips": controller.total_flips if controller else 0,
        "stall_cycles": stall_cycles,
        "evictor_agreement_rate": replay.agreement_rate,
        "popularity_stability": _stability(replay),
        "resident_kv_pairs": sum(c.kv_pairs for c in final_census),
        "resident_input_tokens": sum(c.input_tokens for c in final_census),
        "recompute_cap": cap if system.recomputation else 0,
        "refresh_passes": {f"{c}_{p}": n for (c, p), n in
                           controller.pass_counts().items()} if controller else {},
    }

    return RunReport.build(
        system=system.name,
        seed=sim_seed,
        config=_config_echo(system, spec, budget, tech, intervals, cap,
                            sim_seed, retention),
        latency={**lat, "makespan": makespan},
        energy=energy,
        lifetime=lifetime,
        policy=policy,
        workload={
            "n_cxt": spec.n_cxt, "decode_len": spec.decode_len,
            "batch": spec.batch, "skew": spec.skew,
            "channels": C, "heads": H, "layers": L,
            "n_prime": budget.n_prime, "sink_count": budget.sink_count,
            "recent_window": budget.recent_window,
        },
    )


def _stability(replay: PolicyReplay) -> float:
    from .aerp import popularity_stability

    if replay.prefill_snapshots is None:
        return 1.0
    vals = [popularity_stability(snap, replay.popularity_snapshot(l))
            for l, snap in enumerate(replay.prefill_snapshots)]
    return float(sum(vals) / len(vals)) if vals else 1.0


def _config_echo(system: SystemConfig, spec: WorkloadSpec, budget: CacheBudget,
                 tech: TechParams, intervals: dict, cap, sim_seed: int,
                 retention: RetentionModel) -> dict:
    return {
        "sim_seed": sim_seed,
        "retention": {"mu": retention.mu, "sigma": retention.sigma},
        "system": {
            "name": system.name, "kv_memory": system.kv_memory,
            "rsa_rows": system.rsa.rows, "rsa_cols": system.rsa.cols,
            "rsa_clock_hz": system.rsa.clock_hz,
            "eviction": system.eviction, "recomputation": system.recomputation,
            "adaptive_refresh": system.adaptive_refresh,
            "overlapped_schedule": system.overlapped_schedule,
            "kv_capacity_bytes": system.kv_capacity_bytes,
            "weight_sram_bytes": system.weight_sram_bytes,
            "activation_edram_bytes": system.activation_edram_bytes,
            "recompute_cap": cap,
        },
        "refresh_intervals": {f"{c}_{p}": v for (c, p), v in intervals.items()},
        "tech": {
            "sram_access_j_per_byte": tech.sram.access_j_per_byte,
            "sram_leakage_w": tech.sram.leakage_w,
            "sram_bandwidth": tech.sram.bandwidth,
            "edram_access_j_per_byte": tech.edram.access_j_per_byte,
            "edram_leakage_w": tech.edram.leakage_w,
            "edram_refresh_j_per_pass": tech.edram.refresh_j_per_pass,
            "edram_retention_s": tech.edram.retention_s,
            "edram_bandwidth": tech.edram.bandwidth,
            "dram_bandwidth": tech.dram.bandwidth,
            "dram_energy_j_per_byte": tech.dram.energy_j_per_byte,
            "dram_capacity_bytes": tech.dram.capacity_bytes,
            "rsa_energy_j_per_op": tech.rsa_energy_j_per_op,
        },
        "workload": {
            "seed": spec.seed, "n_cxt": spec.n_cxt, "decode_len": spec.decode_len,
            "batch": spec.batch, "skew": spec.skew,
            "head_correlation": spec.head_correlation,
            "channels": spec.shape.channels, "heads": spec.shape.heads,
            "layers": spec.shape.layers,
        },
        "budget": {
            "n_prime": budget.n_prime, "sink_count": budget.sink_count,
            "recent_window": budget.recent_window,
        },
    }
