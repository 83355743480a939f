"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria cover POD correctness, operator oracle equivalence, exact-correction
identities, plant-and-recover closure fits, time-scheme orders, the
full-rank consistency limit, MLP gradients, the reference-dataset mode sweep,
closure switch algebra, and end-to-end determinism.
"""

import filecmp
import time
import warnings

import numpy as np
import pytest

from romforge.cli import main as cli_main
from romforge.closure import (ClosureModel, CorrectionSnapshots, FitWarning,
                              exact_pressure_correction,
                              exact_velocity_correction, fit_constrained,
                              fit_unconstrained, quad_form, sym6)
from romforge.evmodel import gradcheck_mlp, init_mlp
from romforge.galerkin import RomOperators, assemble_operators, slice_operators
from romforge.grid import GridSpec
from romforge.minifom import FieldFrame, SnapshotSet
from romforge.pod import PodBasis, pod
from romforge.report import SweepConfig, check_lower_bound, mode_sweep
from romforge.romsolve import RomRunConfig, run_rom
from romforge.snapshots import CoeffSeries, field_weights, ip, project_coeffs

from oracles import NaiveOps


def _verdict(label, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"\n[{status}] {label}" + (f" ({detail})" if detail else ""))
    assert ok, f"{label}: {detail}"


def test_criterion_01_pod_matches_dense_svd():
    """Method of snapshots vs a dense SVD oracle on a 16x8 grid, 12 frames."""
    start = time.time()
    grid = GridSpec(nx=16, ny=8, lx=2.0, ly=1.0)
    rng = np.random.default_rng(42)
    n = grid.n_cells
    frames = [FieldFrame(t=0.1 * j, u=rng.standard_normal(n),
                         v=rng.standard_normal(n), p=rng.standard_normal(n),
                         nu_t=rng.random(n)) for j in range(12)]
    snaps = SnapshotSet(grid=grid, frames=frames, weights=grid.weights())
    basis = pod(snaps, "velocity", 10)
    S = snaps.field_matrix("u")
    wf = field_weights(snaps.weights, S.shape[0])
    _, svals, vt = np.linalg.svd(np.sqrt(wf)[:, None] * S, full_matrices=False)
    sv_ok = np.allclose(basis.singular_values, svals[:10], rtol=1e-9)
    modes_oracle = S @ (vt[:10].T / svals[:10])
    mode_ok = all(
        abs(abs(ip(basis.modes[:, i], modes_oracle[:, i], snaps.weights)) - 1.0) < 1e-9
        for i in range(10)
    )
    elapsed = time.time() - start
    _verdict("criterion 1: POD matches dense SVD oracle",
             sv_ok and mode_ok and elapsed < 1.0,
             f"runtime {elapsed:.2f}s")


def test_criterion_02_operator_oracle(tiny_grid):
    """All reduced operators match naive cell-loop quadrature to 1e-12."""
    start = time.time()
    rng = np.random.default_rng(7)
    n = tiny_grid.n_cells
    w = tiny_grid.weights()
    wf2 = field_weights(w, 2 * n)

    def ortho(raw, wts):
        cols = []
        for i in range(raw.shape[1]):
            v = raw[:, i]
            for m in cols:
                v = v - np.dot(wts * m, v) * m
            cols.append(v / np.sqrt(np.dot(wts * v, v)))
        return np.column_stack(cols)

    vel_raw = rng.standard_normal((2 * n, 2))
    vel_raw[np.concatenate([~tiny_grid.fluid, ~tiny_grid.fluid])] = 0.0
    pres_raw = rng.standard_normal((n, 2))
    pres_raw[~tiny_grid.fluid] = 0.0
    nut_raw = rng.random((n, 2))
    nut_raw[~tiny_grid.fluid] = 0.0
    vel = PodBasis(ortho(vel_raw, wf2), np.ones(2), "velocity")
    pres = PodBasis(ortho(pres_raw, w), np.ones(2), "pressure")
    nut = PodBasis(nut_raw, np.ones(2), "eddy_viscosity")
    ops = assemble_operators(vel, pres, nut, tiny_grid)
    naive = NaiveOps(tiny_grid, vel.modes, pres.modes, nut.modes).assemble()
    worst = 0.0
    for name in ("M", "B", "BT", "H", "P", "C", "D", "G", "N", "L",
                 "CT1", "CT2", "CT3", "CT4"):
        worst = max(worst, float(np.max(np.abs(getattr(ops, name) - naive[name]))))
    worst = max(worst, float(np.max(np.abs(ops.Dk[0] - naive["Dk"][0]))))
    worst = max(worst, float(np.max(np.abs(ops.Ek[0] - naive["Ek"][0]))))
    elapsed = time.time() - start
    _verdict("criterion 2: operator oracle equivalence",
             worst <= 1e-12 and elapsed < 10.0,
             f"max abs diff {worst:.2e}, runtime {elapsed:.1f}s")


def test_criterion_03_exact_corrections_vanish():
    """tau_u and tau_p are <= 1e-12 when the fine and coarse orders match."""
    start = time.time()
    rng = np.random.default_rng(3)
    r, q = 4, 3
    C = rng.standard_normal((r, r, r))
    D = rng.standard_normal((q, q))
    G = rng.standard_normal((q, r, r))
    a = CoeffSeries(times=np.arange(15) * 0.1, values=rng.standard_normal((15, r)))
    b = CoeffSeries(times=a.times, values=rng.standard_normal((15, q)))
    tau_u = exact_velocity_correction(a, C, C)
    tau_p = exact_pressure_correction(a, b, D, D, G, G)
    worst = max(float(np.max(np.abs(tau_u))), float(np.max(np.abs(tau_p))))
    elapsed = time.time() - start
    _verdict("criterion 3: exact corrections vanish at d = r",
             worst <= 1e-12 and elapsed < 1.0, f"max {worst:.2e}")


def test_criterion_04_plant_and_recover():
    """Unconstrained fit to 1e-8, constrained feasible plant to 1e-6,
    constraint postconditions to 1e-10."""
    start = time.time()
    rng = np.random.default_rng(14)
    r = 3
    A0 = rng.standard_normal((r, r))
    B0 = rng.standard_normal((r, r, r))
    B0 = 0.5 * (B0 + B0.transpose(0, 2, 1))
    a = CoeffSeries(times=np.arange(80) * 0.1, values=rng.standard_normal((80, r)))
    tau = np.array([A0 @ x + quad_form(B0, x) for x in a.values])
    corr = CorrectionSnapshots(times=a.times, tau_u=tau, tau_p=None, d=r + 1, r=r)
    m_u = fit_unconstrained(corr, a, ridge=0.0)
    unc_ok = (np.max(np.abs(m_u.A_tilde - A0)) < 1e-8
              and np.max(np.abs(m_u.B_tilde - B0)) < 1e-8)

    S = rng.standard_normal((r, r))
    Af = -(S @ S.T) - 0.1 * np.eye(r)
    W = rng.standard_normal((r, r))
    Af = Af + 0.5 * (W - W.T)
    Bf = rng.standard_normal((r, r, r))
    Bf = 0.5 * (Bf + Bf.transpose(0, 2, 1))
    Bf = Bf - sym6(Bf)
    tau_f = np.array([Af @ x + quad_form(Bf, x) for x in a.values])
    corr_f = CorrectionSnapshots(times=a.times, tau_u=tau_f, tau_p=None, d=r + 1, r=r)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FitWarning)
        m_c = fit_constrained(corr_f, a, ridge=1e-10)
    con_ok = (np.max(np.abs(m_c.A_tilde - Af)) < 1e-6
              and np.max(np.abs(m_c.B_tilde - Bf)) < 1e-6)
    lam_max = np.linalg.eigvalsh(0.5 * (m_c.A_tilde + m_c.A_tilde.T))[-1]
    post_ok = lam_max <= 1e-10 and np.max(np.abs(sym6(m_c.B_tilde))) <= 1e-10
    elapsed = time.time() - start
    _verdict("criterion 4: plant-and-recover closure fits",
             unc_ok and con_ok and post_ok and elapsed < 30.0,
             f"runtime {elapsed:.1f}s")


def test_criterion_05_time_scheme_orders():
    """Measured convergence slopes 1.0 and 2.0 (each +-0.15) on da/dt = -a."""
    start = time.time()
    z = np.zeros
    ops = RomOperators(
        M=np.eye(1), B=-np.eye(1), BT=z((1, 1)), H=z((1, 1)), P=z((1, 1)),
        C=z((1, 1, 1)), Dk=[z(1)], Ek=[z((1, 1))], D=np.eye(1), G=z((1, 1, 1)),
        N=z((1, 1)), L=z(1), CT1=z((1, 1, 1)), CT2=z((1, 1, 1)),
        CT3=z((1, 1, 1)), CT4=z((1, 1, 1)),
        r=1, q=1, n_sup=0, n_nut=1, n_bc=1, tau=0.0,
    )
    slopes = {}
    for scheme, expected in (("order1", 1.0), ("order2", 2.0)):
        errs, dts = [], [0.02, 0.01, 0.005, 0.0025]
        for dt in dts:
            cfg = RomRunConfig(formulation="ppe", nu=1.0, dt=dt,
                               n_steps=int(round(1.0 / dt)), u_bc=(0.0,),
                               scheme=scheme, newton_tol=1e-13)
            traj = run_rom(ops, cfg, init_a=np.array([1.0]))
            errs.append(abs(traj.a[-1, 0] - np.exp(-1.0)))
        slopes[scheme] = float(np.mean(np.diff(np.log(errs)) / np.diff(np.log(dts))))
    ok = (abs(slopes["order1"] - 1.0) <= 0.15 and abs(slopes["order2"] - 2.0) <= 0.15)
    elapsed = time.time() - start
    _verdict("criterion 5: time-scheme convergence orders",
             ok and elapsed < 5.0,
             f"slopes {slopes['order1']:.3f} / {slopes['order2']:.3f}")


def test_criterion_06_consistency_limit(reference_data):
    """Full-rank closure-off run tracks the projected velocity coefficients
    within 5% max relative deviation over 20 steps."""
    start = time.time()
    snaps = reference_data["snaps"]
    cfg = reference_data["cfg"]
    ops = reference_data["ops"]
    a_d = project_coeffs(snaps, reference_data["vel"])
    b_d = project_coeffs(snaps, reference_data["pres"])
    rcfg = RomRunConfig(formulation="ppe", nu=cfg.nu, dt=snaps.dt_snap,
                        n_steps=20, u_bc=(cfg.u_in,), scheme="order2",
                        t0=float(snaps.times[0]))
    traj = run_rom(ops, rcfg, a_d.values[0], init_b=b_d.values[0])
    ok = not traj.failed
    dev = 0.0
    if ok:
        dev = max(
            float(np.linalg.norm(traj.a[j] - a_d.values[j])
                  / np.linalg.norm(a_d.values[j]))
            for j in range(21)
        )
        ok = dev <= 0.05
    elapsed = time.time() - start
    _verdict("criterion 6: full-rank consistency limit",
             ok and elapsed < 120.0,
             f"max rel deviation {100 * dev:.2f}%, runtime {elapsed:.1f}s")


def test_criterion_07_mlp_gradcheck():
    """Backprop vs central differences on a [2, 3, 2] network, <= 1e-6."""
    start = time.time()
    rng = np.random.default_rng(21)
    model = init_mlp([2, 3, 2], seed=9)
    for b in model.biases[:-1]:
        b += 0.5  # keep preactivations away from the ReLU kink
    X = rng.standard_normal((8, 2))
    Y = rng.standard_normal((8, 2))
    worst = gradcheck_mlp(model, X, Y, h=1e-5)
    elapsed = time.time() - start
    _verdict("criterion 7: MLP gradient check",
             worst <= 1e-6 and elapsed < 1.0, f"max discrepancy {worst:.2e}")


def test_criterion_08_reference_sweep(reference_data):
    """Reference-dataset sweep: projection is a lower bound everywhere and
    the hybrid run beats the no-closure baseline by >= 10% on both error
    integrals at r = q = 5.  The hybrid-beats-both-singles claim is a soft
    check (warning only)."""
    start = time.time()
    cfg = reference_data["cfg"]
    result = mode_sweep(reference_data["snaps"], reference_data["vel"],
                        reference_data["pres"], reference_data["nut"],
                        reference_data["ops"],
                        SweepConfig(nu=cfg.nu, u_bc=(cfg.u_in,)),
                        n_range=range(1, 7))
    no_failures = not result.failures
    bound_ok = check_lower_bound(result)
    idx = {lab: k for k, lab in enumerate(result.labels)}
    col = int(np.where(result.n_values == 5)[0][0])
    none_u, none_p = result.int_u[idx["none"], col], result.int_p[idx["none"], col]
    hyb_u, hyb_p = result.int_u[idx["hybrid"], col], result.int_p[idx["hybrid"], col]
    impr_u = 1.0 - hyb_u / none_u
    impr_p = 1.0 - hyb_p / none_p
    hybrid_ok = impr_u >= 0.10 and impr_p >= 0.10
    corr_u = result.int_u[idx["correction"], col]
    ev_u = result.int_u[idx["eddy_viscosity"], col]
    if not (hyb_u <= corr_u and hyb_u <= ev_u):
        warnings.warn(
            "soft check: hybrid does not beat both single strategies at n=5 "
            f"(hybrid {hyb_u:.4g}, correction {corr_u:.4g}, eddy {ev_u:.4g})"
        )
    elapsed = time.time() - start
    _verdict("criterion 8: reference-dataset mode sweep",
             no_failures and bound_ok and hybrid_ok and elapsed < 900.0,
             f"hybrid vs none improvement {100 * impr_u:.0f}% / {100 * impr_p:.0f}%, "
             f"runtime {elapsed:.0f}s")


def test_criterion_09_switch_algebra(small_data):
    """Zero-operator closure and zero-output EV model are bit-identical to
    the corresponding flag-off runs."""
    start = time.time()
    cfg = small_data["cfg"]
    snaps = small_data["snaps"]
    ops = slice_operators(small_data["ops"], 3, 3)
    a_d = project_coeffs(snaps, small_data["vel"])
    b_d = project_coeffs(snaps, small_data["pres"])
    a0, b0 = a_d.values[0, :3], b_d.values[0, :3]
    zero_closure = ClosureModel.zeros("ppe_joint", 3, 3)
    zero_ev = init_mlp([3, 4, ops.n_nut], seed=0)
    for W in zero_ev.weights:
        W[...] = 0.0

    def run(c_u, c_p, c_t, closure=None, ev=None):
        rcfg = RomRunConfig(formulation="ppe", nu=cfg.nu, dt=snaps.dt_snap,
                            n_steps=5, u_bc=(cfg.u_in,), c_u=c_u, c_p=c_p,
                            c_t=c_t, t0=float(snaps.times[0]))
        return run_rom(ops, rcfg, a0, init_b=b0, closure=closure, ev=ev)

    off = run(0, 0, 0)
    on_closure = run(1, 1, 0, closure=zero_closure)
    on_ev = run(0, 0, 1, ev=zero_ev)
    ok = (not off.failed
          and np.array_equal(off.a, on_closure.a)
          and np.array_equal(off.b, on_closure.b)
          and np.array_equal(off.a, on_ev.a)
          and np.array_equal(off.b, on_ev.b))
    elapsed = time.time() - start
    _verdict("criterion 9: switch algebra", ok and elapsed < 60.0,
             f"runtime {elapsed:.1f}s")


def test_criterion_10_pipeline_determinism(tmp_path):
    """The full pipeline with a fixed seed reruns to byte-identical files."""
    start = time.time()

    def pipeline(out):
        out.mkdir()
        fom_cfg = out / "fom.cfg"
        fom_cfg.write_text(
            "nx=16\nny=8\nlx=3.0\nly=1.5\n"
            "obstacle_cx=0.75\nobstacle_cy=0.75\nobstacle_r=0.15\n"
            "nu=0.004\nu_in=1.0\ndt_fom=0.01\nsample_every=3\n"
            "n_samples=12\nspin_up_fraction=0.25\n"
        )
        rom_cfg = out / "rom.cfg"
        rom_cfg.write_text("nu=0.004\nr=3\nq=3\nn_steps=4\ntrain_fraction=0.5\n"
                           "ridge_scale=1e-4\nev_epochs=50\nc_u=1\nc_p=1\nc_t=1\n")
        snap = out / "d.romsnap"
        assert cli_main(["fom", "--config", str(fom_cfg), "--out", str(snap)]) == 0
        vel, pres, nut = out / "v.rombas", out / "p.rombas", out / "n.rombas"
        for kind, n, path in (("velocity", 6, vel), ("pressure", 6, pres),
                              ("eddy_viscosity", 2, nut)):
            assert cli_main(["pod", "--snapshots", str(snap), "--kind", kind,
                             "--n", str(n), "--out", str(path)]) == 0
        ops = out / "ops.romops"
        assert cli_main(["ops", "--snapshots", str(snap),
                         "--velocity-basis", str(vel), "--pressure-basis", str(pres),
                         "--nut-basis", str(nut), "--out", str(ops)]) == 0
        closure = out / "m.romcls"
        assert cli_main(["fit-closure", "--config", str(rom_cfg),
                         "--snapshots", str(snap), "--velocity-basis", str(vel),
                         "--pressure-basis", str(pres), "--ops", str(ops),
                         "--out", str(closure)]) == 0
        ev = out / "ev.rommlp"
        assert cli_main(["train-ev", "--config", str(rom_cfg), "--seed", "0",
                         "--snapshots", str(snap), "--velocity-basis", str(vel),
                         "--nut-basis", str(nut), "--out", str(ev)]) == 0
        traj = out / "traj.csv"
        assert cli_main(["rom-run", "--config", str(rom_cfg),
                         "--snapshots", str(snap), "--velocity-basis", str(vel),
                         "--pressure-basis", str(pres), "--ops", str(ops),
                         "--closure", str(closure), "--ev", str(ev),
                         "--out", str(traj)]) == 0
        return ["d.romsnap", "v.rombas", "p.rombas", "n.rombas",
                "ops.romops", "m.romcls", "ev.rommlp", "traj.csv"]

    files = pipeline(tmp_path / "run1")
    pipeline(tmp_path / "run2")
    identical = [f for f in files
                 if filecmp.cmp(tmp_path / "run1" / f, tmp_path / "run2" / f,
                                shallow=False)]
    ok = identical == files
    elapsed = time.time() - start
    _verdict("criterion 10: pipeline determinism",
             ok, f"{len(identical)}/{len(files)} files identical, "
                 f"runtime {elapsed:.0f}s")
