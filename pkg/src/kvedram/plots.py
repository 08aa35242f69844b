"""Matplotlib figure rendering for run and sweep reports.

Figures are written next to the JSON/CSV outputs; callers pass report dicts,
so this module stays import-safe on headless hosts (Agg backend).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .report import ENERGY_CATEGORIES, RunReport

_CATEGORY_LABELS = {
    "rsa_compute": "compute array",
    "sram_weights": "weight SRAM",
    "kv_access": "KV cache",
    "refresh": "refresh",
    "leakage": "leakage",
    "dram": "DRAM",
}


def render_run_figure(report: RunReport, path) -> None:
    """Energy breakdown and latency split for a single run."""
    fig, (ax_e, ax_l) = plt.subplots(1, 2, figsize=(9, 3.6))

    values = [report.energy[k] for k in ENERGY_CATEGORIES]
    labels = [_CATEGORY_LABELS[k] for k in ENERGY_CATEGORIES]
    ax_e.bar(range(len(values)), values, color=plt.cm.tab10.colors[:len(values)])
    ax_e.set_xticks(range(len(values)))
    ax_e.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax_e.set_ylabel("energy (J)")
    ax_e.set_title(f"{report.system}: {report.total_energy:.3g} J total")

    lat_keys = ("prefill", "compute", "weight_access", "kv_access", "dram", "stalls")
    lat_vals = [report.latency[k] for k in lat_keys]
    ax_l.barh(range(len(lat_vals)), lat_vals, color="#4878a8")
    ax_l.set_yticks(range(len(lat_vals)))
    ax_l.set_yticklabels(lat_keys, fontsize=8)
    ax_l.invert_yaxis()
    ax_l.set_xlabel("time (s)")
    ax_l.set_title(f"makespan {report.makespan:.3g} s")

    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_sweep_figure(rows: list[dict], path) -> None:
    """Relative energy efficiency across sweep cells, stacked energy behind."""
    labels = [str(r.get("label", r["system"])) for r in rows]
    eff = [r["relative_efficiency"] for r in rows]
    x = np.arange(len(rows))

    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(rows)), 3.8))
    bottoms = np.zeros(len(rows))
    for key, color in zip(ENERGY_CATEGORIES, plt.cm.tab10.colors):
        vals = np.array([r[f"energy_{key}_j"] for r in rows])
        ax.bar(x, vals, bottom=bottoms, color=color,
               label=_CATEGORY_LABELS[key], width=0.6)
        bottoms += vals
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("energy (J)")
    ax.legend(fontsize=7, ncol=2)

    ax2 = ax.twinx()
    ax2.plot(x, eff, "o--", color="crimson")
    ax2.set_ylabel("relative efficiency (x)", color="crimson")
    for xi, yi in zip(x, eff):
        ax2.annotate(f"{yi:.2f}x", (xi, yi), textcoords="offset points",
                     xytext=(0, 6), ha="center", fontsize=7, color="crimson")

    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
