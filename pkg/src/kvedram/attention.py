"""Toy-scale attention numerics: per-head rows, mixed outputs, importance scores.

This is the numeric ground truth the eviction and refresh policies consume.
Only the self-attention math is modeled; no weights, FFN, or residual stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError

ROW_SUM_TOL = 1e-6


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax (max subtraction)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    w = np.exp(shifted)
    return w / w.sum()


def attend(q, keys, scale: float | None = None) -> np.ndarray:
    """Attention row of query q over the key list.

    `scale` defaults to 1/sqrt(head_dim); pass 1.0 for unscaled dot products.
    """
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ConfigurationError("attend requires a nonempty 2-D key list")
    if keys.shape[1] != q.shape[0]:
        raise ConfigurationError(
            f"key dim {keys.shape[1]} does not match query dim {q.shape[0]}"
        )
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[0])
    return softmax(keys @ q * scale)


def mix(row, values) -> np.ndarray:
    """Output vector: sum of values weighted by the attention row."""
    row = np.asarray(row, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or row.shape[0] != values.shape[0]:
        raise ConfigurationError(
            f"row length {row.shape[0]} does not match value count {values.shape[0]}"
        )
    return row @ values


def presoftmax_importance(q, keys) -> np.ndarray:
    """Raw q.k dot products, no softmax and no scaling.

    This is what the in-array min-search hardware accumulates; it can disagree
    with the exact softmax-based score, and the simulator tracks both.
    """
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ConfigurationError("presoftmax_importance requires a nonempty key list")
    if keys.shape[1] != q.shape[0]:
        raise ConfigurationError(
            f"key dim {keys.shape[1]} does not match query dim {q.shape[0]}"
        )
    return keys @ q


def prefill_scores(attn_matrix: np.ndarray) -> np.ndarray:
    """Per-token scores from a causal prefill attention matrix: column sums."""
    a = np.asarray(attn_matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigurationError("prefill attention matrix must be square")
    return a.sum(axis=0)


@dataclass
class ImportanceTable:
    """Per-head accumulated importance for tokens currently resident.

    convention "received" sums the attention each token receives across later
    queries (column sums of the attention matrix). "row_total" is the literal
    per-query row sum, which is constant 1 under softmax; it is kept only for
    comparison and is not used by any policy.
    """

    heads: int
    convention: str = "received"
    scores: list[dict[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.convention not in ("received", "row_total"):
            raise ConfigurationError(f"unknown convention {self.convention!r}")
        if not self.scores:
            self.scores = [dict() for _ in range(self.heads)]

    def accumulate(self, head: int, row, resident_ids, new_token: int | None = None):
        """Fold one decoding step's attention row into the table.

        `row` covers resident_ids plus, when `new_token` is given, the new
        token's self-attention entry in the final slot.
        """
        row = np.asarray(row, dtype=np.float64)
        ids = list(resident_ids)
        expected = len(ids) + (1 if new_token is not None else 0)
        if row.shape[0] != expected:
            raise ConfigurationError(
                f"row length {row.shape[0]} does not match {expected} tokens"
            )
        table = self.scores[head]
        if self.convention == "received":
            for tid, a in zip(ids, row):
                table[tid] = table.get(tid, 0.0) + float(a)
            if new_token is not None:
                table[new_token] = table.get(new_token, 0.0) + float(row[-1])
        else:
            owner = new_token if new_token is not None else ids[-1]
            table[owner] = table.get(owner, 0.0) + float(row.sum())

    def drop(self, head: int, token_id: int) -> None:
        self.scores[head].pop(token_id, None)

    def get(self, head: int, token_id: int) -> float:
        return self.scores[head][token_id]


def accumulate_importance(table: ImportanceTable, head: int, row, resident_ids,
                          new_token: int | None = None) -> ImportanceTable:
    """Functional wrapper around ImportanceTable.accumulate."""
    table.accumulate(head, row, resident_ids, new_token)
    return table


@dataclass
class AttentionState:
    """Per-head keys/values for one sequence plus the last step's numerics."""

    head_dim: int
    heads: int
    keys: list[list[np.ndarray]] = field(default_factory=list)
    values: list[list[np.ndarray]] = field(default_factory=list)
    rows: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.keys:
            self.keys = [[] for _ in range(self.heads)]
            self.values = [[] for _ in range(self.heads)]

    def append(self, head: int, k, v) -> None:
        k = np.asarray(k, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if k.shape != (self.head_dim,) or v.shape != (self.head_dim,):
            raise ConfigurationError("k/v vectors must have length head_dim")
        self.keys[head].append(k)
        self.values[head].append(v)

    def step(self, queries, scale: float | None = None):
        """Attend each head's query over its cached keys; returns rows, outputs."""
        self.rows, self.outputs = [], []
        for h in range(self.heads):
            if len(self.keys[h]) != len(self.values[h]):
                raise ConfigurationError("key/value lists diverged")
            row = attend(queries[h], np.stack(self.keys[h]), scale=scale)
            self.rows.append(row)
            self.outputs.append(mix(row, np.stack(self.values[h])))
        return self.rows, self.outputs
