"""Experiment runner: single runs, parameter sweeps, report diffs, validation.

Configuration comes from an INI file with sections mirroring the library
modules ([workload], [budget], [system], [tech], [refresh], [run]); command
line flags override file values. Every resolved default is echoed into the
report so runs are self-describing.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import ConfigurationError, ModelShape
from .edram import DEFAULT_INTERVALS, RetentionModel, fit_retention_model, \
    uniform_intervals
from .perfmodel import (CapacityError, DramParams, EdramParams, SramParams,
                        SYSTEM_NAMES, SystemConfig, TechParams, run_config,
                        system_config)
from .report import RunReport, report_diff, write_summary_csv, summary_row
from .workload import (CacheBudget, PRESETS, TraceFormatError, WorkloadSpec,
                       load_trace, preset)

OUT_DIR_ENV = "KVEDRAM_OUT_DIR"


@dataclass
class ResolvedConfig:
    spec: WorkloadSpec
    budget: CacheBudget
    system: SystemConfig
    tech: TechParams
    intervals: dict | None
    retention: RetentionModel | None
    sim_seed: int
    trace_path: str | None
    out_dir: Path
    figures: bool
    label: str = ""


def _parse_value(text: str):
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _load_ini(path: Path) -> dict[str, dict]:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"config file {path} not found")
    return {section: {k: _parse_value(v) for k, v in parser[section].items()}
            for section in parser.sections()}


def _take(section: dict, key: str, default):
    return section.pop(key, default)


def resolve_config(args) -> ResolvedConfig:
    """Merge defaults, INI sections, and CLI flags into one validated config."""
    ini = _load_ini(Path(args.config)) if getattr(args, "config", None) else {}
    wl = dict(ini.get("workload", {}))
    bd = dict(ini.get("budget", {}))
    sysec = dict(ini.get("system", {}))
    tech_sec = dict(ini.get("tech", {}))
    refresh = dict(ini.get("refresh", {}))
    retention_sec = dict(ini.get("retention", {}))
    run_sec = dict(ini.get("run", {}))

    preset_name = getattr(args, "preset", None) or _take(wl, "preset", None)
    trace_path = getattr(args, "trace", None) or _take(wl, "trace", None)
    if preset_name and trace_path:
        raise ConfigurationError(
            "workload: exactly one source allowed (preset/fields or trace)")

    shape = ModelShape(
        channels=int(_take(wl, "channels", 256)),
        heads=int(_take(wl, "heads", 4)),
        layers=int(_take(wl, "layers", 2)),
    )
    workload_seed = int(_take(wl, "seed", 0))
    skew = float(_take(wl, "skew", 1.0))
    batch = int(_take(wl, "batch", 1))
    if getattr(args, "workload_seed", None) is not None:
        workload_seed = args.workload_seed

    if preset_name:
        spec, budget = preset(preset_name, shape=shape, seed=workload_seed,
                              skew=skew, batch=batch)
    else:
        spec = WorkloadSpec(
            shape=shape,
            n_cxt=int(_take(wl, "n_cxt", 64)),
            decode_len=int(_take(wl, "decode_len", 256)),
            batch=batch, skew=skew,
            head_correlation=float(_take(wl, "head_correlation", 0.7)),
            seed=workload_seed,
        )
        budget = CacheBudget(
            n_prime=int(_take(bd, "n_prime", 32)),
            sink_count=int(_take(bd, "sink_count", 2)),
            recent_window=int(_take(bd, "recent_window", 8)),
        )
    if preset_name:
        overrides = {k: int(v) for k, v in
                     ((k, bd[k]) for k in ("n_prime", "sink_count", "recent_window")
                      if k in bd)}
        if overrides:
            budget = replace(budget, **overrides)
    if getattr(args, "nprime", None) is not None:
        budget = replace(budget, n_prime=args.nprime)
    if wl:
        raise ConfigurationError(f"workload: unknown keys {sorted(wl)}")

    sys_name = getattr(args, "system", None) or _take(sysec, "name", "full-edram")
    system = system_config(sys_name, **{
        k: int(v) if isinstance(v, float) and k.endswith("_bytes") else v
        for k, v in sysec.items()
    })

    tech_kwargs = {}
    sram_kwargs = {k[5:]: v for k, v in tech_sec.items() if k.startswith("sram_")}
    edram_kwargs = {k[6:]: v for k, v in tech_sec.items() if k.startswith("edram_")}
    dram_kwargs = {k[5:]: v for k, v in tech_sec.items() if k.startswith("dram_")}
    if "rsa_energy_j_per_op" in tech_sec:
        tech_kwargs["rsa_energy_j_per_op"] = tech_sec["rsa_energy_j_per_op"]
    if "capacity_bytes" in dram_kwargs:
        dram_kwargs["capacity_bytes"] = int(dram_kwargs["capacity_bytes"])
    tech = TechParams(sram=SramParams(**sram_kwargs),
                      edram=EdramParams(**edram_kwargs),
                      dram=DramParams(**dram_kwargs), **tech_kwargs)

    intervals = None
    if refresh:
        if "uniform" in refresh:
            intervals = uniform_intervals(float(refresh["uniform"]))
        else:
            try:
                intervals = {(c, p): float(refresh[f"{c.lower()}_{p.lower()}"])
                             for (c, p) in DEFAULT_INTERVALS}
            except KeyError as exc:
                raise ConfigurationError(
                    f"refresh: supply 'uniform' or all four of hst_msb, hst_lsb, "
                    f"lst_msb, lst_lsb (missing {exc})") from exc

    retention = None
    if retention_sec:
        if "mu" in retention_sec and "sigma" in retention_sec:
            retention = RetentionModel(mu=float(retention_sec["mu"]),
                                       sigma=float(retention_sec["sigma"]))
        elif retention_sec.get("fit") and intervals is not None:
            retention = fit_retention_model(list(intervals.values()))
        else:
            raise ConfigurationError(
                "retention: give mu and sigma, or fit = true with a "
                "[refresh] interval table")

    sim_seed = int(_take(run_sec, "seed", workload_seed))
    if getattr(args, "seed", None) is not None:
        sim_seed = args.seed

    out_dir = (getattr(args, "out", None) or os.environ.get(OUT_DIR_ENV)
               or _take(run_sec, "out_dir", "runs"))
    figures = bool(_take(run_sec, "figures", True))
    if getattr(args, "no_figures", False):
        figures = False

    return ResolvedConfig(spec=spec, budget=budget, system=system, tech=tech,
                          intervals=intervals, retention=retention,
                          sim_seed=sim_seed, trace_path=trace_path,
                          out_dir=Path(out_dir), figures=figures)


def execute_run(cfg: ResolvedConfig) -> RunReport:
    trace = load_trace(cfg.trace_path) if cfg.trace_path else None
    return run_config(cfg.system, cfg.spec, cfg.budget, tech=cfg.tech,
                      retention=cfg.retention, refresh_intervals=cfg.intervals,
                      sim_seed=cfg.sim_seed, trace=trace)


def _write_run_outputs(cfg: ResolvedConfig, report: RunReport,
                       out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save(out_dir / "report.json")
    write_summary_csv(out_dir / "summary.csv", [report])
    if cfg.figures:
        from .plots import render_run_figure
        render_run_figure(report, out_dir / "energy_breakdown.png")


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    report = execute_run(cfg)
    _write_run_outputs(cfg, report, cfg.out_dir)
    print(f"{report.system}: energy {report.total_energy:.6g} J, "
          f"makespan {report.makespan:.6g} s -> {cfg.out_dir}/report.json")
    return 0


def _parse_sweep_axes(pairs: list[str]) -> list[tuple[str, list]]:
    axes = []
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"sweep axis {pair!r} must be key=v1,v2,...")
        key, _, values = pair.partition("=")
        key = key.strip().lower()
        if key == "system":
            vals = list(SYSTEM_NAMES) if values.strip() == "all" \
                else [v.strip() for v in values.split(",")]
        elif key in ("nprime", "seed"):
            vals = [int(v) for v in values.split(",")]
        elif key == "interval":
            vals = [float(v) for v in values.split(",")]
        else:
            raise ConfigurationError(
                f"unknown sweep axis {key!r}; use system, nprime, seed, interval")
        axes.append((key, vals))
    return axes


def _sweep_cells(base: ResolvedConfig, axes) -> list[ResolvedConfig]:
    cells = [base]
    for key, values in axes:
        grown = []
        for cell in cells:
            for val in values:
                label = f"{cell.label}/{key}={val}" if cell.label else f"{key}={val}"
                if key == "system":
                    grown.append(replace(cell, system=system_config(val), label=label))
                elif key == "nprime":
                    grown.append(replace(
                        cell, budget=replace(cell.budget, n_prime=val), label=label))
                elif key == "seed":
                    grown.append(replace(cell, sim_seed=val, label=label))
                elif key == "interval":
                    grown.append(replace(
                        cell, intervals=uniform_intervals(val), label=label))
        cells = grown
    return cells


def _cell_seed(master_seed: int, index: int) -> int:
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))
    return int(seq.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFF)


def _run_cell(cell: ResolvedConfig) -> RunReport:
    return execute_run(cell)


def cmd_sweep(args) -> int:
    base = resolve_config(args)
    axes = _parse_sweep_axes(args.sweep or [])
    if not axes:
        raise ConfigurationError("sweep requires at least one --sweep axis")
    cells = _sweep_cells(base, axes)
    swept_seed = any(key == "seed" for key, _ in axes)
    if not swept_seed:
        cells = [replace(cell, sim_seed=_cell_seed(base.sim_seed, i))
                 for i, cell in enumerate(cells)]

    workers = min(len(cells), args.jobs or os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_cell, cells))
    else:
        reports = [_run_cell(cell) for cell in cells]

    baseline = next((r for r in reports if r.system == "orig-sram"), None)
    if baseline is None:
        ref_cell = replace(base, system=system_config("orig-sram"),
                           label="baseline/orig-sram")
        baseline = _run_cell(ref_cell)

    base.out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for cell, rep in zip(cells, reports):
        cell_dir = base.out_dir / cell.label.replace("/", "_").replace("=", "-")
        _write_run_outputs(replace(cell, figures=False), rep, cell_dir)
        row = summary_row(rep, baseline)
        row["label"] = cell.label
        rows.append(row)
    write_summary_csv(base.out_dir / "sweep.csv", reports, baseline)
    if base.figures:
        from .plots import render_sweep_figure
        render_sweep_figure(rows, base.out_dir / "sweep_efficiency.png")

    for row in rows:
        print(f"{row['label']}: energy {row['energy_total_j']:.6g} J, "
              f"relative efficiency {row['relative_efficiency']:.3f}x")
    return 0


def cmd_diff(args) -> int:
    a = RunReport.load(args.report_a)
    b = RunReport.load(args.report_b)
    diff = report_diff(a, b)
    text = json.dumps(diff, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_validate(args) -> int:
    cfg = resolve_config(args)
    echo = {
        "system": cfg.system.name,
        "workload": {"n_cxt": cfg.spec.n_cxt, "decode_len": cfg.spec.decode_len,
                     "batch": cfg.spec.batch, "seed": cfg.spec.seed,
                     "channels": cfg.spec.shape.channels,
                     "heads": cfg.spec.shape.heads,
                     "layers": cfg.spec.shape.layers,
                     "trace": cfg.trace_path},
        "budget": {"n_prime": cfg.budget.n_prime,
                   "sink_count": cfg.budget.sink_count,
                   "recent_window": cfg.budget.recent_window},
        "sim_seed": cfg.sim_seed,
        "out_dir": str(cfg.out_dir),
    }
    if cfg.trace_path:
        load_trace(cfg.trace_path)
        echo["workload"]["trace_records"] = "valid"
    print(json.dumps(echo, indent=2, sort_keys=True))
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="named task geometry")
    p.add_argument("--system", choices=SYSTEM_NAMES,
                   help="system configuration to simulate")
    p.add_argument("--trace", help="drive the run from a recorded trace file")
    p.add_argument("--seed", type=int, help="simulation seed (bit flips)")
    p.add_argument("--workload-seed", type=int, help="synthetic workload seed")
    p.add_argument("--nprime", type=int, help="override the token budget")
    p.add_argument("--out", help=f"output directory (or ${OUT_DIR_ENV})")
    p.add_argument("--no-figures", action="store_true",
                   help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvedram",
        description="Trace-driven simulator for KV-cache management on "
                    "eDRAM-based edge accelerators.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one configuration")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="simulate a grid of configurations")
    _add_common(p_sweep)
    p_sweep.add_argument("--sweep", action="append", metavar="KEY=V1,V2,...",
                         help="axis to sweep: system=all|names, nprime=..., "
                              "seed=..., interval=...")
    p_sweep.add_argument("--jobs", type=int, help="parallel workers")
    p_sweep.set_defaults(func=cmd_sweep)

    p_diff = sub.add_parser("diff", help="compare two run reports")
    p_diff.add_argument("report_a")
    p_diff.add_argument("report_b")
    p_diff.add_argument("--out", help="write the diff JSON here")
    p_diff.set_defaults(func=cmd_diff)

    p_val = sub.add_parser("validate", help="validate a configuration")
    _add_common(p_val)
    p_val.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, TraceFormatError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
