"""Configuration parsing, run orchestration and CSV emission.

Verbs:
  run    -- one benchmark with one integrator configuration
  sweep  -- work-precision table over a set of configurations
  refine -- grid-convergence study with the coupled interface-width rule

Config values come from an optional flat key=value file, overridden by
command-line flags.  CSV floats carry 17 significant digits so files
round-trip exactly.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys as _sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .benchmarks import (BenchmarkReport, BlowupError, IntegratorConfig,
                         embedding_spec, refinement_width, single_grain_spec,
                         stefan_spec, triple_junction_spec, run_benchmark)
from .grid import dump_fields
from .integrators import Tolerances

OBSERVABLE_NAME = {
    "embedding": "pressure_jump",
    "triple-junction": "dihedral_angle",
    "single-grain": "area",
    "stefan": "interface_position",
    "heat": "max_abs",
}


@dataclass
class RunConfig:
    """Flat run description; field names double as config-file keys."""

    benchmark: str = "single-grain"
    integrator: str = "feuler"       # feuler|ssp2|ssp104|sts1|sts2
    dt_factor: float = None
    adaptive: bool = False
    nstages: int = 5
    tol_phi_rel: float = 1e-4
    tol_phi_abs: float = 1e-4
    tol_c_rel: float = 1e-4
    tol_c_abs: float = 1e-4
    dx: float = 1.0
    refine_width: bool = False       # couple W = 3 dx^0.4 to the spacing
    t_end: float = None
    out: str = "."
    dump_fields: bool = False
    log_steps: bool = False
    embedded_table: str = None
    seed: int = 0

    def tolerances(self):
        return Tolerances(self.tol_phi_rel, self.tol_phi_abs,
                          self.tol_c_rel, self.tol_c_abs)


def load_config_file(path):
    """Flat key=value lines; '#' comments; types from RunConfig defaults."""
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
    cfg = RunConfig()
    valid = {f.name: f for f in fields(RunConfig)}
    for key, raw in values.items():
        if key not in valid:
            raise ValueError(f"unknown config key: {key}")
        cfg = replace(cfg, **{key: _coerce(raw, getattr(cfg, key))})
    return cfg


def _coerce(raw, current):
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float) or current is None:
        try:
            return float(raw)
        except ValueError:
            return raw
    return raw


def build_spec(cfg: RunConfig):
    width = refinement_width(cfg.dx) if cfg.refine_width else None
    kw = {"dx": cfg.dx}
    if cfg.benchmark == "embedding":
        n = int(round(128 / cfg.dx))
        spec = embedding_spec(n=n, width=width or 3.0, **kw)
    elif cfg.benchmark == "triple-junction":
        spec = triple_junction_spec(long_side=int(round(192 / cfg.dx)),
                                    short_side=int(round(96 / cfg.dx)),
                                    width=width or 3.0, **kw)
    elif cfg.benchmark == "single-grain":
        spec = single_grain_spec(n=int(round(256 / cfg.dx)),
                                 width=width or 2.5, **kw)
    elif cfg.benchmark == "stefan":
        spec = stefan_spec(size=1800, width=width or 2.5, **kw)
    else:
        raise ValueError(f"unknown benchmark {cfg.benchmark!r}")
    if cfg.t_end is not None:
        spec.t_end = cfg.t_end
        spec.output_interval = cfg.t_end / 50.0
    spec.seed = cfg.seed
    return spec


def build_integrator(cfg: RunConfig):
    embedded = None
    if cfg.embedded_table:
        with open(cfg.embedded_table) as fh:
            embedded = tuple(json.load(fh)["weights"])
    return IntegratorConfig(kind=cfg.integrator, dt_factor=cfg.dt_factor,
                            adaptive=cfg.adaptive, tols=cfg.tolerances(),
                            nstages=cfg.nstages, embedded=embedded)


def table2_configs(tols=None):
    """The standard integrator configuration sweep."""
    tols = tols or Tolerances()
    configs = []
    for f in (0.5, 1.0):
        configs.append(IntegratorConfig("feuler", dt_factor=f, tols=tols))
    for f in (0.5, 1.0, 2.0, 4.0):
        configs.append(IntegratorConfig("ssp2", dt_factor=f, nstages=5,
                                        tols=tols))
    ref_tols = Tolerances(1e-14, 1e-14, 1e-14, 1e-14)
    configs.append(IntegratorConfig("ssp104", adaptive=True, tols=ref_tols))
    for kind in ("sts1", "sts2"):
        for f in (1.0, 10.0, 100.0, 200.0):
            configs.append(IntegratorConfig(kind, dt_factor=f, tols=tols))
        for a_phi in (1e-2, 1e-3, 1e-4):
            configs.append(IntegratorConfig(
                kind, adaptive=True,
                tols=Tolerances(tols.rel_phase, a_phi, tols.rel_conc,
                                tols.abs_conc)))
    return configs


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def write_series_csv(path, report: BenchmarkReport):
    name = OBSERVABLE_NAME.get(report.spec.case, "observable")
    with open(path, "w") as fh:
        fh.write(f"kind,time,{name},energy,dt,accepted\n")
        for (t, dt, acc, _err) in report.step_rows:
            fh.write(f"step,{_fmt(t)},,,{_fmt(dt)},{acc}\n")
        for t, obs, en in zip(report.times, report.observable, report.energy):
            fh.write(f"output,{_fmt(t)},{_fmt(obs)},{_fmt(en)},,1\n")


def write_summary(path, report: BenchmarkReport, cfg: RunConfig = None):
    payload = {
        "benchmark": report.spec.case,
        "integrator": report.config.label,
        "error": report.error,
        "rhs_evals": report.rhs_evals,
        "accepted_steps": report.accepted_steps,
        "rejected_steps": report.rejected_steps,
        "rejected_fraction": report.rejected_fraction,
        "equilibrated": report.equilibrated,
        "extras": report.extras,
    }
    if cfg is not None:
        payload["seed"] = cfg.seed
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=float)
        fh.write("\n")


def work_precision(specs_and_configs, reference_kind="feuler",
                   reference_factor=1.0):
    """Rows of (label, rhs evals, error, speedup vs the reference row)."""
    if len(specs_and_configs) < 2:
        raise ValueError("need at least two configurations")
    reports = [run_benchmark(spec, conf) for spec, conf in specs_and_configs]
    ref_cost = None
    for rep in reports:
        c = rep.config
        if (c.kind == reference_kind and not c.adaptive
                and c.dt_factor == reference_factor):
            ref_cost = rep.rhs_evals
    rows = []
    for rep in reports:
        speedup = ref_cost / rep.rhs_evals if ref_cost else float("nan")
        rows.append({
            "integrator": rep.config.label,
            "rhs_evals": rep.rhs_evals,
            "error": rep.error,
            "speedup": speedup,
            "rejected_fraction": rep.rejected_fraction,
        })
    return rows, reports


def refinement_study(make_spec, config, levels):
    """Error against the sharp-interface oracle per spacing level.

    ``make_spec(dx, width)`` builds the case at one level; the interface
    parameter follows W = 3 dx^0.4.
    """
    rows = []
    for dx in levels:
        width = refinement_width(dx)
        spec = make_spec(dx, width)
        rep = run_benchmark(spec, config)
        rows.append({"dx": dx, "width": width, "error": rep.error,
                     "rhs_evals": rep.rhs_evals,
                     "equilibrated": rep.equilibrated})
    return rows


# ---------------------------------------------------------------------------
# entry point


def _add_common(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--benchmark", help="embedding|triple-junction|single-grain|stefan")
    p.add_argument("--integrator", help="feuler|ssp2|ssp104|sts1|sts2")
    p.add_argument("--dt-factor", type=float, dest="dt_factor")
    p.add_argument("--adaptive", action="store_true", default=None)
    p.add_argument("--nstages", type=int)
    p.add_argument("--tol-phi-abs", type=float, dest="tol_phi_abs")
    p.add_argument("--tol-phi-rel", type=float, dest="tol_phi_rel")
    p.add_argument("--tol-c-abs", type=float, dest="tol_c_abs")
    p.add_argument("--tol-c-rel", type=float, dest="tol_c_rel")
    p.add_argument("--dx", type=float)
    p.add_argument("--t-end", type=float, dest="t_end")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dump-fields", action="store_true", default=None,
                   dest="dump_fields")
    p.add_argument("--log-steps", action="store_true", default=None,
                   dest="log_steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--embedded-table", dest="embedded_table")


def _merge(cfg, args):
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            cfg = replace(cfg, **{f.name: val})
    return cfg


def main(argv=None):
    parser = argparse.ArgumentParser(prog="phaselab")
    subs = parser.add_subparsers(dest="verb", required=True)
    for verb in ("run", "sweep", "refine"):
        sp = subs.add_parser(verb)
        _add_common(sp)
        if verb == "refine":
            sp.add_argument("--levels", default="1.0,0.5",
                            help="comma-separated spacings")
    args = parser.parse_args(argv)

    try:
        cfg = load_config_file(args.config) if args.config else RunConfig()
        cfg = _merge(cfg, args)
        os.makedirs(cfg.out, exist_ok=True)
        if args.verb == "run":
            return _run_verb(cfg)
        if args.verb == "sweep":
            return _sweep_verb(cfg)
        return _refine_verb(cfg, args.levels)
    except BlowupError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 2


def _run_verb(cfg):
    spec = build_spec(cfg)
    conf = build_integrator(cfg)
    hook = None
    if cfg.dump_fields:
        def hook(system, t):
            ph = system.state.phases
            payload = {f"phi_{g}": ph.phase_values(g)
                       for g in range(ph.nphases)}
            if system.use_chem:
                payload["c"] = system.state.conc.values
            path = os.path.join(cfg.out, f"fields_t{t:.6g}.bin")
            dump_fields(path, system.grid, payload, time=t)
    report = run_benchmark(spec, conf, log_steps=cfg.log_steps,
                           frame_hook=hook)
    write_series_csv(os.path.join(cfg.out, "series.csv"), report)
    write_summary(os.path.join(cfg.out, "summary.json"), report, cfg)
    print(f"{report.config.label}: error={report.error:.6g} "
          f"rhs={report.rhs_evals} rejected={report.rejected_fraction:.1%}")
    return 0


def _sweep_verb(cfg):
    pairs = [(build_spec(cfg), conf)
             for conf in table2_configs(cfg.tolerances())]
    rows, _ = work_precision(pairs)
    path = os.path.join(cfg.out, "work_precision.csv")
    with open(path, "w") as fh:
        fh.write("integrator,rhs_evals,error,speedup,rejected_fraction\n")
        for row in rows:
            fh.write(",".join(_fmt(row[k]) for k in
                              ("integrator", "rhs_evals", "error", "speedup",
                               "rejected_fraction")) + "\n")
    for row in rows:
        print(f"{row['integrator']:32s} rhs={row['rhs_evals']:>9d} "
              f"error={row['error']:.4g} speedup={row['speedup']:.2f}")
    return 0


def _refine_verb(cfg, levels):
    dxs = [float(tok) for tok in levels.split(",")]
    conf = build_integrator(cfg)

    def make_spec(dx, width):
        local = replace(cfg, dx=dx, refine_width=True)
        return build_spec(local)

    rows = refinement_study(make_spec, conf, dxs)
    path = os.path.join(cfg.out, "refinement.csv")
    with open(path, "w") as fh:
        fh.write("dx,width,error,rhs_evals,equilibrated\n")
        for row in rows:
            fh.write(",".join(_fmt(row[k]) for k in
                              ("dx", "width", "error", "rhs_evals",
                               "equilibrated")) + "\n")
    monotone = all(rows[i + 1]["error"] < rows[i]["error"]
                   for i in range(len(rows) - 1))
    for row in rows:
        print(f"dx={row['dx']:g} W={row['width']:.4f} error={row['error']:.6g}")
    print(f"monotone decrease: {monotone}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
