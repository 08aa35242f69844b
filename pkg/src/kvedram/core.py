"""Shared domain types: model geometry, 16-bit fixed point, 4-bit scores, RNG.

Stored values are Q8.8 two's-complement fixed point held as unsigned 16-bit
patterns, so bit-plane splits and bit flips are exact integer operations.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

Q88_FRAC_BITS = 8
Q88_SCALE = 1 << Q88_FRAC_BITS
RAW_MIN, RAW_MAX = 0, 0xFFFF
MSB_SHIFT = 8


class ConfigurationError(ValueError):
    """Raised when shapes, budgets, or parameters are physically meaningless."""


@dataclass(frozen=True)
class ModelShape:
    """Toy transformer geometry: channel width, head count, layer count."""

    channels: int
    heads: int
    layers: int = 1

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1 or self.layers < 1:
            raise ConfigurationError("model shape fields must be >= 1")
        if self.channels % self.heads != 0:
            raise ConfigurationError(
                f"heads ({self.heads}) must divide channels ({self.channels})"
            )

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def encode_q88(value):
    """Float -> saturating Q8.8 raw pattern (unsigned 16-bit int)."""
    raw = np.clip(np.rint(np.asarray(value, dtype=np.float64) * Q88_SCALE), -32768, 32767)
    return (raw.astype(np.int64) & 0xFFFF).astype(np.uint16)


def decode_q88(raw):
    """Q8.8 raw pattern -> float."""
    raw = np.asarray(raw, dtype=np.int64) & 0xFFFF
    signed = np.where(raw >= 0x8000, raw - 0x10000, raw)
    return signed.astype(np.float64) / Q88_SCALE


def split_bits(raw):
    """Split a 16-bit pattern into its (msb, lsb) byte planes."""
    raw = np.asarray(raw, dtype=np.int64) & 0xFFFF
    return ((raw >> MSB_SHIFT).astype(np.uint8), (raw & 0xFF).astype(np.uint8))


def merge_bits(msb, lsb):
    """Inverse of split_bits; exact on the full 16-bit domain."""
    msb = np.asarray(msb, dtype=np.int64) & 0xFF
    lsb = np.asarray(lsb, dtype=np.int64) & 0xFF
    return ((msb << MSB_SHIFT) | lsb).astype(np.uint16)


def flip_bit(raw, bit):
    """XOR bit `bit` (0..15); value moves by exactly 2^(bit-8) in Q8.8 terms."""
    if not 0 <= bit <= 15:
        raise ConfigurationError(f"bit index {bit} out of range")
    return ((np.asarray(raw, dtype=np.int64) ^ (1 << bit)) & 0xFFFF).astype(np.uint16)


@dataclass(frozen=True)
class Value16:
    """One stored Q8.8 scalar, addressable by byte plane."""

    raw: int

    def __post_init__(self):
        if not RAW_MIN <= self.raw <= RAW_MAX:
            raise ConfigurationError(f"raw pattern {self.raw:#x} outside 16 bits")

    @classmethod
    def from_float(cls, value: float) -> "Value16":
        return cls(int(encode_q88(value)))

    @property
    def msb(self) -> int:
        return (self.raw >> MSB_SHIFT) & 0xFF

    @property
    def lsb(self) -> int:
        return self.raw & 0xFF

    @property
    def value(self) -> float:
        return float(decode_q88(self.raw))


SCORE_CODE_MAX = 15


def quantize4(score, scale):
    """Saturating 4-bit quantizer: clamp(round-half-even(score/scale), 0, 15)."""
    if np.any(np.asarray(scale) <= 0):
        raise ConfigurationError("quantize4 scale must be positive")
    code = np.rint(np.asarray(score, dtype=np.float64) / scale)
    return np.clip(code, 0, SCORE_CODE_MAX).astype(np.uint8)


@dataclass(frozen=True)
class ImportanceScore:
    """Accumulated attention received by a token plus its 4-bit register code."""

    accumulated: float
    quantized: int

    @classmethod
    def quantize(cls, accumulated: float, scale: float) -> "ImportanceScore":
        if accumulated < 0:
            raise ConfigurationError("importance scores are nonnegative")
        return cls(accumulated, int(quantize4(accumulated, scale)))


class RunningScale:
    """Monotone per-layer quantizer scale: (running max score) / 15."""

    def __init__(self, floor: float = 1e-12):
        self._max = floor * SCORE_CODE_MAX

    def update(self, score: float) -> None:
        if score > self._max:
            self._max = score

    @property
    def scale(self) -> float:
        return self._max / SCORE_CODE_MAX


def _label_entropy(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    digest = hashlib.blake2s(str(label).encode()).digest()
    return int.from_bytes(digest[:4], "little")


class Rng:
    """Splittable counter-based RNG (Philox) keyed by a 64-bit seed.

    Substreams are derived from (seed, labels), so a decision drawn for a given
    purpose does not depend on how many draws other purposes made before it.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *labels) -> np.random.Generator:
        key = tuple(_label_entropy(x) for x in labels)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(seq))
