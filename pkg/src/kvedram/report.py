"""Run reports: a versioned JSON schema, canonical bytes, diffs, CSV summaries.

Reports are pure functions of (configuration, seed): serialization sorts keys
and carries no timestamps or paths, so identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

SCHEMA_VERSION = 1

ENERGY_CATEGORIES = ("rsa_compute", "sram_weights", "kv_access",
                     "refresh", "leakage", "dram")


class SchemaError(ValueError):
    pass


@dataclass
class RunReport:
    schema_version: int
    system: str
    seed: int
    config_hash: str
    config: dict
    latency: dict
    energy: dict
    lifetime: dict
    policy: dict
    workload: dict = field(default_factory=dict)

    @classmethod
    def build(cls, system: str, seed: int, config: dict, latency: dict,
              energy: dict, lifetime: dict, policy: dict,
              workload: dict | None = None) -> "RunReport":
        energy = dict(energy)
        energy["total"] = sum(energy[k] for k in ENERGY_CATEGORIES)
        digest = hashlib.sha256(_canonical(config).encode()).hexdigest()[:16]
        return cls(SCHEMA_VERSION, system, seed, digest, config,
                   dict(latency), energy, dict(lifetime), dict(policy),
                   dict(workload or {}))

    @property
    def total_energy(self) -> float:
        return self.energy["total"]

    @property
    def makespan(self) -> float:
        return self.latency["makespan"]

    def onchip_energy(self) -> float:
        """Energy excluding off-chip DRAM traffic."""
        return self.total_energy - self.energy["dram"]

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "system": self.system,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": self.config,
            "latency": self.latency,
            "energy": self.energy,
            "lifetime": self.lifetime,
            "policy": self.policy,
            "workload": self.workload,
        }

    def to_json(self) -> str:
        return _canonical(self.to_dict()) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "RunReport":
        try:
            version = obj["schema_version"]
            if version != SCHEMA_VERSION:
                raise SchemaError(f"report schema {version} != {SCHEMA_VERSION}")
            return cls(version, obj["system"], obj["seed"], obj["config_hash"],
                       obj["config"], obj["latency"], obj["energy"],
                       obj["lifetime"], obj["policy"], obj.get("workload", {}))
        except KeyError as exc:
            raise SchemaError(f"report missing field {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunReport":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _ratio(a: float, b: float) -> float | None:
    if b == 0:
        return None if a != 0 else 1.0
    return a / b


def report_diff(a: RunReport, b: RunReport) -> dict:
    """Per-category ratios (a/b) and deltas (a-b) across two same-schema reports."""
    if a.schema_version != b.schema_version:
        raise SchemaError("cannot diff reports from different schema versions")
    out = {"systems": [a.system, b.system], "seeds": [a.seed, b.seed]}
    for section in ("energy", "latency", "lifetime"):
        sa, sb = getattr(a, section), getattr(b, section)
        out[section] = {
            key: {"a": sa[key], "b": sb[key], "delta": sa[key] - sb[key],
                  "ratio": _ratio(sa[key], sb[key])}
            for key in sorted(set(sa) & set(sb))
        }
    out["policy"] = {
        key: {"a": a.policy[key], "b": b.policy[key]}
        for key in sorted(set(a.policy) & set(b.policy))
        if isinstance(a.policy[key], (int, float))
    }
    return out


SUMMARY_FIELDS = ("system", "seed", "makespan_s", "energy_total_j",
                  "energy_rsa_compute_j", "energy_sram_weights_j",
                  "energy_kv_access_j", "energy_refresh_j",
                  "energy_leakage_j", "energy_dram_j",
                  "relative_efficiency", "evictions", "recomputations",
                  "injected_flips")


def summary_row(report: RunReport, baseline: RunReport | None = None) -> dict:
    eff = 1.0
    if baseline is not None and report.total_energy > 0:
        eff = baseline.total_energy / report.total_energy
    return {
        "system": report.system,
        "seed": report.seed,
        "makespan_s": report.makespan,
        "energy_total_j": report.total_energy,
        "energy_rsa_compute_j": report.energy["rsa_compute"],
        "energy_sram_weights_j": report.energy["sram_weights"],
        "energy_kv_access_j": report.energy["kv_access"],
        "energy_refresh_j": report.energy["refresh"],
        "energy_leakage_j": report.energy["leakage"],
        "energy_dram_j": report.energy["dram"],
        "relative_efficiency": eff,
        "evictions": report.policy.get("evictions", 0),
        "recomputations": report.policy.get("recomputations", 0),
        "injected_flips": report.policy.get("injected_flips", 0),
    }


def write_summary_csv(path, reports, baseline: RunReport | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for rep in reports:
            writer.writerow(summary_row(rep, baseline))
