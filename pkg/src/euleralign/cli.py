"""Command-line front end: run, sweep, validate, plot.

Exit codes: 0 success (completed run or theorem-consistent blowup),
1 configuration/usage error, 2 aborted run, 3 blowup whose consistency
checks failed.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config
from .diagnostics import bkm_report, classify_outcome, conservation_report, \
    theorem_bounds
from .fields import ConstructionError, recover_velocity
from .kernels import KernelError, convolve_density
from .solver import run_simulation


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_fields_csv(path, traj, kernel, momentum):
    with open(path, "w") as fh:
        fh.write("t,x_center,rho,g,u,psi_conv\n")
        for snap in traj.snapshots:
            vel = recover_velocity(kernel, snap, momentum)
            conv = convolve_density(kernel, snap)
            xs = snap.grid.centers()
            for i in range(snap.grid.n):
                fh.write(f"{_fmt(snap.t)},{_fmt(xs[i])},{_fmt(snap.rho[i])},"
                         f"{_fmt(snap.g[i])},{_fmt(vel.centers[i])},"
                         f"{_fmt(conv[i])}\n")


def write_particles_csv(path, traj):
    with open(path, "w") as fh:
        fh.write("t,x,m,v\n")
        for ens in traj.particle_snapshots:
            for i in range(ens.n):
                fh.write(f"{_fmt(ens.t)},{_fmt(ens.x[i])},{_fmt(ens.m[i])},"
                         f"{_fmt(ens.v[i])}\n")


def write_diagnostics_csv(path, traj, kernel):
    ser = traj.series
    bkm = bkm_report(traj, kernel)
    run = bkm.running
    with open(path, "w") as fh:
        fh.write("t,min_g,max_rho,max_ux,bkm_full,bkm_g,bkm_ux,mass,momentum\n")
        for i in range(len(ser["t"])):
            fh.write(",".join(_fmt(v) for v in (
                ser["t"][i], ser["min_g"][i], ser["max_rho"][i],
                ser["max_ux"][i], run["bkm_full"][i], run["bkm_g"][i],
                run["bkm_ux"][i], ser["mass"][i], ser["momentum"][i])) + "\n")
    return bkm


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


def execute_run(cfg: RunConfig, out_dir: Path) -> dict:
    """Build, run, write artifacts; returns the manifest dictionary."""
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.time()
    scenario = cfg.build_scenario()
    solver_cfg = cfg.solver_config()
    traj = run_simulation(scenario, solver_cfg)
    bounds = theorem_bounds(scenario)

    outputs = []
    if traj.snapshots:
        write_fields_csv(out_dir / "fields.csv", traj, scenario.kernel,
                         scenario.momentum)
        outputs.append("fields.csv")
    if traj.particle_snapshots:
        write_particles_csv(out_dir / "particles.csv", traj)
        outputs.append("particles.csv")
    bkm = write_diagnostics_csv(out_dir / "diagnostics.csv", traj,
                                scenario.kernel)
    outputs.append("diagnostics.csv")

    classification = None
    class_error = None
    if traj.termination.status != "aborted":
        classification = classify_outcome(traj, bounds, scenario)
    else:
        class_error = traj.termination.reason

    report = {
        "termination": traj.termination.as_dict(),
        "bounds": bounds.as_dict(),
        "bkm": {"I_full": bkm.I_full, "I_g": bkm.I_g, "I_ux": bkm.I_ux,
                "inequality_ok": bkm.inequality_ok,
                "diverging": bkm.diverging},
        "conservation": conservation_report(
            traj, [("pair_a", "pair_b")] if "pair_a" in traj.marked_labels else []),
        "classification": classification.as_dict() if classification else None,
        "classification_withheld": class_error,
        "scenario_params": {k: v for k, v in scenario.params.items()
                            if isinstance(v, (int, float, str))},
    }
    if "pair_r" in traj.series:
        report["pair_series"] = {"t": traj.series["t"],
                                 "r": traj.series["pair_r"]}
    if "min_g" in traj.series:
        report["min_g_series"] = {"t": traj.series["t"],
                                  "min_g": traj.series["min_g"]}
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=1, default=_json_default)
    outputs.append("report.json")

    manifest = {
        "tool_version": __version__,
        "config_hash": cfg.config_hash(),
        "started_unix": start,
        "finished_unix": time.time(),
        "termination": traj.termination.as_dict(),
        "classification": classification.as_dict() if classification else None,
        "theorem_checks_passed": classification.all_passed if classification else None,
        "outputs": outputs,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, default=_json_default)
    return manifest


def _exit_code_for(manifest) -> int:
    status = manifest["termination"]["status"]
    if status == "aborted":
        return 2
    if status == "completed":
        return 0
    return 0 if manifest["theorem_checks_passed"] else 3


def cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
        if args.resolution:
            cfg.grid["n"] = args.resolution
        manifest = execute_run(cfg, Path(args.out))
    except (ConfigError, ConstructionError, KernelError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    term = manifest["termination"]
    print(f"terminated: {term['status']}"
          + (f" ({term['kind']} at t~{term['time_estimate']:.4g})"
             if term["status"] == "blowup" else ""))
    if manifest["classification"]:
        cl = manifest["classification"]
        print(f"classified: {cl['label']}/{cl['regime']}, "
              f"checks {'pass' if manifest['theorem_checks_passed'] else 'FAIL'}")
    return _exit_code_for(manifest)


def _sweep_worker(payload):
    cfg, overrides, out_sub = payload
    for full_key, value in overrides.items():
        section, key = full_key.split(".", 1)
        getattr(cfg, section)[key] = value
    manifest = execute_run(cfg, Path(out_sub))
    row = dict(overrides)
    term = manifest["termination"]
    row["status"] = term["status"]
    row["kind"] = term.get("kind")
    row["blowup_time"] = term.get("time_estimate")
    cl = manifest.get("classification")
    row["label"] = cl["label"] if cl else None
    row["regime"] = cl["regime"] if cl else None
    row["checks_passed"] = manifest.get("theorem_checks_passed")
    return row


def cmd_sweep(args) -> int:
    try:
        cfg = parse_config(args.config)
        if args.resolution:
            cfg.grid["n"] = args.resolution
        if not cfg.sweep_ranges:
            raise ConfigError("sweep needs at least one ranged key "
                              "(a [list] value)")
        keys = sorted(cfg.sweep_ranges)
        combos = list(itertools.product(*(cfg.sweep_ranges[k] for k in keys)))
        cap = cfg.sweep.get("max_runs", 64)
        if len(combos) > cap:
            raise ConfigError(f"sweep product has {len(combos)} runs, "
                              f"above the cap {cap}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payloads = []
    for i, combo in enumerate(combos):
        overrides = dict(zip(keys, combo))
        payloads.append((cfg, overrides, str(out / f"run_{i:04d}")))
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_sweep_worker, payloads))
    else:
        rows = [_sweep_worker(p) for p in payloads]

    cols = keys + ["status", "kind", "blowup_time", "label", "regime",
                   "checks_passed"]
    with open(out / "phase.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(c)) for c in cols) + "\n")

    from .svgplot import scatter_plot
    pts = []
    for row in rows:
        x = row[keys[0]]
        y = row[keys[1]] if len(keys) > 1 else (row["blowup_time"] or 0.0)
        pts.append((x, y, row.get("regime") or row["status"]))
    try:
        scatter_plot(out / "phase.svg", pts, title="phase diagram",
                     xlabel=keys[0],
                     ylabel=keys[1] if len(keys) > 1 else "blowup time")
    except ValueError:
        pass
    print(f"sweep complete: {len(rows)} runs -> {out / 'phase.csv'}")
    return 0


def cmd_validate(args) -> int:
    from .acceptance import run_acceptance
    results = run_acceptance(fast=args.fast, out_dir=Path(args.out),
                             inject_sign_error=args.inject_sign_error)
    return 0 if all(r.passed for r in results) else 1


def cmd_plot(args) -> int:
    from .svgplot import line_plot
    run_dir = Path(args.run_dir)
    made = []

    diag = run_dir / "diagnostics.csv"
    if diag.exists():
        data = np.genfromtxt(diag, delimiter=",", names=True)
        t = np.atleast_1d(data["t"])
        made.append(line_plot(run_dir / "min_g.svg",
                              [(t, np.atleast_1d(data["min_g"]), "min G")],
                              title="minimum of G", xlabel="t", ylabel="min G"))
        made.append(line_plot(run_dir / "max_rho.svg",
                              [(t, np.atleast_1d(data["max_rho"]), "max rho")],
                              title="density peak", xlabel="t", ylabel="max rho"))
        made.append(line_plot(
            run_dir / "bkm.svg",
            [(t, np.atleast_1d(data["bkm_full"]), "int(|rho|+|G|)"),
             (t, np.atleast_1d(data["bkm_g"]), "int |G|"),
             (t, np.atleast_1d(data["bkm_ux"]), "int |du/dx|")],
            title="regularity integrals", xlabel="t", ylabel="integral"))
    else:
        print("warning: diagnostics.csv missing, skipping series figures",
              file=sys.stderr)

    report_file = run_dir / "report.json"
    if report_file.exists():
        report = json.loads(report_file.read_text())
        if report.get("min_g_series") and report["bounds"].get("min_g0", 0) < 0:
            ser = report["min_g_series"]
            t = np.asarray(ser["t"])
            g0 = report["bounds"]["min_g0"]
            with np.errstate(divide="ignore"):
                ric = np.where(1 + g0 * t > 0, g0 / np.maximum(1 + g0 * t, 1e-12),
                               np.nan)
            made.append(line_plot(run_dir / "riccati.svg",
                                  [(t, np.asarray(ser["min_g"]), "computed"),
                                   (t, ric, "comparison 1/(t+1/G0)")],
                                  title="G minimum vs comparison solution",
                                  xlabel="t", ylabel="min G"))
        if report.get("pair_series"):
            ser = report["pair_series"]
            t = np.asarray(ser["t"])
            r = np.asarray(ser["r"])
            bounds = report.get("bounds", {})
            curves = [(t, r, "computed r(t)")]
            sp = report.get("scenario_params", {})
            if {"a", "b", "floor_c"} <= sp.keys() and bounds.get("t_star"):
                from .diagnostics import pair_collapse_curve
                s = report.get("kernel_s", 0.5)
                curves.append((t, pair_collapse_curve(
                    s, 1.0, sp["floor_c"], sp["b"] - sp["a"], t), "bound"))
            made.append(line_plot(run_dir / "pair_distance.svg", curves,
                                  title="marked pair separation", xlabel="t",
                                  ylabel="r"))
    fields = run_dir / "fields.csv"
    if fields.exists():
        data = np.genfromtxt(fields, delimiter=",", names=True)
        times = np.unique(data["t"])
        sel_times = times[:: max(1, len(times) // 6)]
        rho_curves, g_curves = [], []
        for tv in sel_times:
            m = data["t"] == tv
            rho_curves.append((data["x_center"][m], data["rho"][m], f"t={tv:.3g}"))
            g_curves.append((data["x_center"][m], data["g"][m], f"t={tv:.3g}"))
        made.append(line_plot(run_dir / "rho_snapshots.svg", rho_curves,
                              title="density snapshots", xlabel="x",
                              ylabel="rho"))
        made.append(line_plot(run_dir / "g_snapshots.svg", g_curves,
                              title="G snapshots", xlabel="x", ylabel="G"))
    else:
        print("warning: fields.csv missing, skipping snapshot figures",
              file=sys.stderr)
    print(f"wrote {len(made)} figures")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="euleralign",
        description="1D Euler-Alignment system: solvers, diagnostics, "
                    "threshold experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--resolution", type=int, default=0,
                       help="override grid.n")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="Cartesian parameter sweep")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", default="sweep")
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.add_argument("--resolution", type=int, default=0)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_val = sub.add_parser("validate", help="run the acceptance suite")
    p_val.add_argument("--out", default="validation")
    p_val.add_argument("--fast", action="store_true",
                       help="reduced resolution with documented looser "
                            "tolerances")
    p_val.add_argument("--inject-sign-error", action="store_true",
                       help="negative control: corrupt the convolution sign "
                            "and expect the NMP criterion to fail")
    p_val.set_defaults(fn=cmd_validate)

    p_plot = sub.add_parser("plot", help="render SVG figures for a run")
    p_plot.add_argument("run_dir")
    p_plot.set_defaults(fn=cmd_plot)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
