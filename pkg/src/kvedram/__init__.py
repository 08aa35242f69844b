"""Trace-driven simulator and policy library for KV caching on eDRAM-based
edge accelerators: attention-score eviction with popularity-based
recomputation, two-dimensional adaptive refresh with retention-failure
injection, and an analytical latency/energy/data-lifetime model.
"""

from .aerp import (CacheBudget, CacheEntry, EvictionEvent, PolicyCache,
                   StorageFormat, choose_format, popularity_stability,
                   prefill_select, recompute_kv)
from .attention import (AttentionState, ImportanceTable, attend, mix,
                        prefill_scores, presoftmax_importance)
from .core import (ConfigurationError, ImportanceScore, ModelShape, Rng,
                   Value16, decode_q88, encode_q88, flip_bit, merge_bits,
                   quantize4, split_bits)
from .edram import (BankLayout, CacheMissError, EdramDevice, RefreshController,
                    RefreshGroup, RetentionModel, classify, fit_retention_model,
                    inject_flips)
from .microarch import EvictorState, RsaConfig, evictor_scan, mm_cycles
from .perfmodel import (CapacityError, SystemConfig, TechParams,
                        lifetime_overlapped, lifetime_serial, recompute_tradeoff,
                        replay_lifetimes, run_config, system_config,
                        t_edram, t_mm, t_sram)
from .report import RunReport, report_diff
from .workload import (PolicyReplay, SyntheticWorkload, TraceRecord,
                       TraceReplay, WorkloadSpec, load_trace, materialize_trace,
                       preset, write_trace)

__version__ = "0.1.0"
