"""Command-line umbrella for the reduced-order-model pipeline.

Subcommands mirror the pipeline stages: fom, pod, ops, fit-closure,
train-ev, rom-run, sweep, report.  Plain-text key=value config files feed
each stage; unknown keys are rejected.  Exit codes: 0 success, 2 config
error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .closure import (IllPosednessError, default_ridge, fit_constrained,
                      fit_joint_ppe, fit_unconstrained, read_closure,
                      write_closure, _regressor)
from .evmodel import (TrainingDivergenceError, read_mlp, train_mlp, write_mlp)
from .galerkin import (assemble_operators, content_hash, read_operators,
                       slice_operators, write_operators)
from .grid import ConfigurationError, GridSpec
from .minifom import FomConfig, NumericalFailureError, run_fom
from .pod import enrich, pod, read_basis, supremizers, write_basis
from .report import (SweepConfig, emit_heatmaps, emit_report, error_series,
                     mode_sweep)
from .romsolve import (RomRunConfig, RomTrajectory, residual_corrections,
                       run_rom)
from .snapshots import CoeffSeries, FormatError, project_coeffs, read_snapshots, write_snapshots


def parse_config(path, schema: dict) -> dict:
    """Read a key=value file, coercing values per schema; unknown keys error."""
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}")
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in schema:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = schema[key](val)
    return values


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {s!r}")


_FOM_SCHEMA = {
    "nx": int, "ny": int, "lx": float, "ly": float,
    "obstacle_cx": float, "obstacle_cy": float, "obstacle_r": float,
    "nu": float, "u_in": float, "dt_fom": float, "sample_every": int,
    "n_samples": int, "smagorinsky_cs": float, "spin_up_fraction": float,
    "projection_tol": float, "perturbation": float,
}

_ROM_SCHEMA = {
    "formulation": str, "nu": float, "dt": float, "n_steps": int,
    "u_bc": float, "c_u": int, "c_p": int, "c_t": int, "scheme": str,
    "newton_tol": float, "newton_max_iter": int, "t0": float,
    "train_fraction": float, "ridge_scale": float, "ev_epochs": int,
    "ev_lr": float, "constrained": _parse_bool, "r": int, "q": int,
    "n_max": int, "tau": float,
}


def _grid_from_cfg(values: dict) -> GridSpec:
    return GridSpec(
        nx=values["nx"], ny=values["ny"], lx=values["lx"], ly=values["ly"],
        obstacle_center=(values.get("obstacle_cx", 0.0), values.get("obstacle_cy", 0.0)),
        obstacle_radius=values.get("obstacle_r", 0.0),
    )


def cmd_fom(args) -> int:
    values = parse_config(args.config, _FOM_SCHEMA)
    grid = _grid_from_cfg(values)
    fom_keys = ("nu", "u_in", "dt_fom", "sample_every", "n_samples",
                "smagorinsky_cs", "spin_up_fraction", "projection_tol", "perturbation")
    cfg = FomConfig(**{k: values[k] for k in fom_keys if k in values})
    snaps = run_fom(grid, cfg)
    write_snapshots(snaps, args.out)
    print(f"wrote {len(snaps.frames)} frames to {args.out}")
    return 0


def cmd_pod(args) -> int:
    snaps = read_snapshots(args.snapshots)
    try:
        basis = pod(snaps, args.kind, args.n)
    except ValueError as exc:
        raise ConfigurationError(str(exc))
    if args.kind == "velocity" and args.supremizers:
        pres = read_basis(args.supremizers)
        sup = supremizers(pres, snaps.grid, snaps.weights, basis)
        basis = enrich(basis, sup)
    write_basis(basis, args.out)
    print(f"wrote {basis.n_modes}-mode {args.kind} basis to {args.out}")
    return 0


def cmd_ops(args) -> int:
    snaps = read_snapshots(args.snapshots)
    vel = read_basis(args.velocity_basis)
    pres = read_basis(args.pressure_basis)
    nut = read_basis(args.nut_basis)
    values = parse_config(args.config, _ROM_SCHEMA) if args.config else {}
    tau = values.get("tau", 1000.0)
    ops = assemble_operators(vel, pres, nut, snaps.grid, snaps.weights, tau=tau)
    digest = content_hash(vel, pres, nut, snaps.grid, None, tau)
    write_operators(ops, args.out, digest)
    print(f"wrote operators (r={ops.r}, q={ops.q}) to {args.out}")
    return 0


def _load_pipeline(args):
    snaps = read_snapshots(args.snapshots)
    vel = read_basis(args.velocity_basis)
    pres = read_basis(args.pressure_basis)
    return snaps, vel, pres


def cmd_fit_closure(args) -> int:
    snaps, vel, pres = _load_pipeline(args)
    ops_fine = read_operators(args.ops)
    values = parse_config(args.config, _ROM_SCHEMA)
    r = values.get("r", ops_fine.r)
    q = values.get("q", ops_fine.q)
    formulation = values.get("formulation", "ppe")
    ops = slice_operators(ops_fine, r, q) if (r, q) != (ops_fine.r, ops_fine.q) else ops_fine
    a_d = project_coeffs(snaps, vel)
    b_d = project_coeffs(snaps, pres)
    m = max(2, int(round(values.get("train_fraction", 0.25) * len(snaps.frames))))
    times = a_d.times[:m]
    ar = CoeffSeries(times, a_d.values[:m, :r])
    bq = CoeffSeries(times, b_d.values[:m, :q])
    base = RomRunConfig(formulation=formulation, nu=values["nu"], dt=snaps.dt_snap,
                        n_steps=1, u_bc=(values.get("u_bc", 1.0),),
                        scheme=values.get("scheme", "order2"), t0=times[0])
    corr = residual_corrections(ops, base, ar, bq, d=vel.n_modes)
    ridge_scale = values.get("ridge_scale", 1e-4)
    if formulation == "ppe":
        ab = CoeffSeries(times, np.hstack([ar.values, bq.values]))
        ridge = default_ridge(_regressor(ab.values)) * (ridge_scale / 1e-8)
        model = fit_joint_ppe(corr, ab, ridge=ridge)
    else:
        ridge = default_ridge(_regressor(ar.values)) * (ridge_scale / 1e-8)
        if values.get("constrained", False):
            model = fit_constrained(corr, ar, ridge=ridge)
        else:
            model = fit_unconstrained(corr, ar, ridge=ridge)
    write_closure(model, args.out)
    print(f"wrote {model.variant} closure (residual {model.residual:.3e}) to {args.out}")
    return 0


def cmd_train_ev(args) -> int:
    snaps = read_snapshots(args.snapshots)
    vel = read_basis(args.velocity_basis)
    nut = read_basis(args.nut_basis)
    values = parse_config(args.config, _ROM_SCHEMA) if args.config else {}
    r = values.get("r", vel.n_modes - vel.n_sup)
    a_d = project_coeffs(snaps, vel)
    g_d = project_coeffs(snaps, nut)
    m = max(2, int(round(values.get("train_fraction", 0.25) * len(snaps.frames))))
    model = train_mlp(
        CoeffSeries(a_d.times[:m], a_d.values[:m, :r]),
        CoeffSeries(g_d.times[:m], g_d.values[:m]),
        epochs=values.get("ev_epochs", 2000), lr=values.get("ev_lr", 1e-3),
        adam=True, seed=args.seed,
    )
    write_mlp(model, args.out)
    print(f"wrote eddy-viscosity model (final loss {model.final_loss:.3e}) to {args.out}")
    return 0


def cmd_rom_run(args) -> int:
    snaps, vel, pres = _load_pipeline(args)
    ops_fine = read_operators(args.ops)
    values = parse_config(args.config, _ROM_SCHEMA)
    r = values.get("r", ops_fine.r)
    q = values.get("q", ops_fine.q)
    ops = slice_operators(ops_fine, r, q) if (r, q) != (ops_fine.r, ops_fine.q) else ops_fine
    cfg = RomRunConfig(
        formulation=values.get("formulation", "ppe"), nu=values["nu"],
        dt=values.get("dt", snaps.dt_snap), n_steps=values["n_steps"],
        u_bc=(values.get("u_bc", 1.0),),
        c_u=values.get("c_u", 0), c_p=values.get("c_p", 0), c_t=values.get("c_t", 0),
        scheme=values.get("scheme", "order2"),
        newton_tol=values.get("newton_tol", 1e-10),
        newton_max_iter=values.get("newton_max_iter", 25),
        t0=values.get("t0", float(snaps.times[0])),
    )
    closure = read_closure(args.closure) if args.closure else None
    ev = read_mlp(args.ev) if args.ev else None
    a_d = project_coeffs(snaps, vel)
    b_d = project_coeffs(snaps, pres)
    traj = run_rom(ops, cfg, a_d.values[0, :ops.r], init_b=b_d.values[0, :ops.q],
                   closure=closure, ev=ev)
    traj.to_csv(args.out)
    if traj.failed:
        print(f"trajectory failed: {traj.message}", file=sys.stderr)
        raise NumericalFailureError(traj.message)
    print(f"wrote {len(traj.times)}-step trajectory to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    snaps, vel, pres = _load_pipeline(args)
    nut = read_basis(args.nut_basis)
    ops = read_operators(args.ops)
    values = parse_config(args.config, _ROM_SCHEMA)
    cfg = SweepConfig(
        nu=values["nu"], u_bc=(values.get("u_bc", 1.0),),
        scheme=values.get("scheme", "order2"),
        train_fraction=values.get("train_fraction", 0.25),
        ridge_scale=values.get("ridge_scale", 1e-4),
        ev_epochs=values.get("ev_epochs", 2000), ev_lr=values.get("ev_lr", 1e-3),
        seed=args.seed,
    )
    n_max = values.get("n_max", min(6, ops.r, ops.q))
    result = mode_sweep(snaps, vel, pres, nut, ops, cfg, range(1, n_max + 1))
    paths = emit_report(result, args.out_dir, prefix="sweep")
    for (label, n), msg in sorted(result.failures.items()):
        print(f"cell ({label}, n={n}) failed: {msg}", file=sys.stderr)
    print("\n".join(paths))
    return 0


def cmd_report(args) -> int:
    snaps, vel, pres = _load_pipeline(args)
    traj = RomTrajectory.from_csv(args.trajectory)
    series = error_series(traj, snaps, vel, pres)
    paths = emit_report(series, args.out_dir, prefix="rom")
    mid = len(traj.times) // 2
    k = int(np.argmin(np.abs(snaps.times - traj.times[mid])))
    paths.append(emit_heatmaps(snaps, vel, pres, traj.a[mid], traj.b[mid],
                               k, args.out_dir, prefix="rom"))
    print("\n".join(paths))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="romforge",
                                 description="hybrid data-driven ROM closure pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        p.add_argument("--config", default=None)
        p.add_argument("--out-dir", default=".")
        p.add_argument("--seed", type=int, default=0)
        for flag, required in flags.items():
            p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, required=required)
        return p

    add("fom", cmd_fom, out=True)
    p = add("pod", cmd_pod, snapshots=True, out=True, supremizers=False)
    p.add_argument("--kind", required=True,
                   choices=("velocity", "pressure", "eddy_viscosity"))
    p.add_argument("--n", type=int, required=True)
    add("ops", cmd_ops, snapshots=True, velocity_basis=True, pressure_basis=True,
        nut_basis=True, out=True)
    add("fit-closure", cmd_fit_closure, snapshots=True, velocity_basis=True,
        pressure_basis=True, ops=True, out=True)
    add("train-ev", cmd_train_ev, snapshots=True, velocity_basis=True,
        nut_basis=True, out=True)
    add("rom-run", cmd_rom_run, snapshots=True, velocity_basis=True,
        pressure_basis=True, ops=True, out=True, closure=False, ev=False)
    add("sweep", cmd_sweep, snapshots=True, velocity_basis=True,
        pressure_basis=True, nut_basis=True, ops=True)
    add("report", cmd_report, snapshots=True, velocity_basis=True,
        pressure_basis=True, trajectory=True)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if getattr(args, "config", None) is None and args.command in ("fom", "fit-closure", "rom-run", "sweep"):
            raise ConfigurationError(f"{args.command} requires --config")
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IllPosednessError, TrainingDivergenceError, NumericalFailureError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
