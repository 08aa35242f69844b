"""Functional/timing model of the systolic compute array and its min-search
evictor chain. Per-cycle register transfer is not simulated; the timing model
is throughput plus pipeline fill, and the evictor completes inside the same
pass as the array rows (no added latency).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError

OPS_PER_MAC = 2


@dataclass(frozen=True)
class RsaConfig:
    rows: int = 32
    cols: int = 32
    clock_hz: float = 1e9

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.clock_hz <= 0:
            raise ConfigurationError("array dims and clock must be positive")

    @property
    def top_rsa(self) -> float:
        """Peak throughput in ops/s (one MAC = 2 ops)."""
        return self.rows * self.cols * OPS_PER_MAC * self.clock_hz


def mm_ops(m: int, k: int, n: int) -> int:
    """MAC-op count (2 ops per MAC) for an (m x k) @ (k x n) product."""
    if min(m, k, n) < 0:
        raise ConfigurationError("matrix dims must be nonnegative")
    return OPS_PER_MAC * m * k * n


def mm_cycles(m: int, k: int, n: int, rsa: RsaConfig):
    """Staggered-pipeline cycle estimate and op count for a matrix multiply.

    Each (rows x cols) weight tile streams the m input rows after a fill of
    rows + cols - 2 cycles, so batching r extra rows into one pass costs r
    extra row-feed cycles instead of r full passes.
    """
    ops = mm_ops(m, k, n)
    if ops == 0:
        return 0, 0
    tiles = -(-k // rsa.rows) * -(-n // rsa.cols)
    fill = rsa.rows + rsa.cols - 2
    return tiles * (m + fill), ops


@dataclass
class EvictorState:
    """Score column S plus the running (min, index) chain M.

    After update row r has been processed, the chain holds the minimum over
    rows 0..r; ties resolve to the lowest index.
    """

    scores: np.ndarray
    chain: list = field(default_factory=list)

    @classmethod
    def preload(cls, scores) -> "EvictorState":
        return cls(np.asarray(scores, dtype=np.float64).copy())

    def update(self, raw_contributions) -> None:
        """Add one step's pre-softmax products into the S registers."""
        raw = np.asarray(raw_contributions, dtype=np.float64)
        if raw.shape != self.scores.shape:
            raise ConfigurationError("contribution length must match register count")
        self.scores = self.scores + raw

    def scan(self, rows_per_pass: int = 32):
        """Propagate the min down the chain; returns (min value, index)."""
        best_val, best_idx = np.inf, -1
        self.chain = []
        n = self.scores.shape[0]
        for start in range(0, n, rows_per_pass):
            for i in range(start, min(start + rows_per_pass, n)):
                if self.scores[i] < best_val:
                    best_val, best_idx = self.scores[i], i
                self.chain.append((best_val, best_idx))
        if best_idx < 0:
            raise ConfigurationError("cannot scan an empty score column")
        return float(best_val), best_idx


def evictor_importance_update(raw_products, prior_scores) -> np.ndarray:
    """Hardware score update: S[r] += raw qk product of row r.

    These sums skip the softmax, so they can disagree with the exact
    accumulated attention; the simulator reports the agreement rate.
    """
    state = EvictorState.preload(prior_scores)
    state.update(raw_products)
    return state.scores


def evictor_scan(scores, rows_per_pass: int = 32):
    """Exact argmin of the preloaded scores (ties to the lowest index)."""
    return EvictorState.preload(scores).scan(rows_per_pass)
