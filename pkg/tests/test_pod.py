"""POD correctness against dense-SVD oracles, supremizers, basis I/O."""

import numpy as np
import pytest

from romforge.grid import GridSpec, diff_ops
from romforge.minifom import FieldFrame, SnapshotSet
from romforge.pod import (DegenerateModeError, PodBasis, RankDeficiencyError,
                          enrich, pod, read_basis, supremizers, write_basis)
from romforge.snapshots import field_weights, ip


def _snapset(grid, u_list, seed=0):
    rng = np.random.default_rng(seed)
    n = grid.n_cells
    frames = []
    for j, u in enumerate(u_list):
        frames.append(FieldFrame(t=float(j), u=u[:n], v=u[n:], p=rng.standard_normal(n),
                                 nu_t=rng.random(n)))
    return SnapshotSet(grid=grid, frames=frames, weights=grid.weights())


def test_two_orthogonal_snapshots_hand_gramian():
    grid = GridSpec(nx=8, ny=8, lx=1.0, ly=1.0)
    n = grid.n_cells
    wf = field_weights(grid.weights(), 2 * n)
    f1 = np.zeros(2 * n)
    f2 = np.zeros(2 * n)
    f1[0] = 2.0 / np.sqrt(wf[0])       # norm 2
    f2[n + 5] = 1.0 / np.sqrt(wf[n + 5])  # norm 1, orthogonal
    snaps = _snapset(grid, [f1, f2])
    basis = pod(snaps, "velocity", 2)
    assert np.allclose(basis.singular_values, [2.0, 1.0], rtol=1e-12)
    for i, f in enumerate((f1, f2)):
        mode = basis.modes[:, i]
        overlap = abs(ip(mode, f / np.sqrt(ip(f, f, grid.weights())), grid.weights()))
        assert overlap == pytest.approx(1.0, abs=1e-12)


def test_repeated_snapshot_single_mode():
    grid = GridSpec(nx=8, ny=8, lx=1.0, ly=1.0)
    rng = np.random.default_rng(2)
    f = rng.standard_normal(2 * grid.n_cells)
    snaps = _snapset(grid, [f, f, f])
    basis = pod(snaps, "velocity", 1)
    w = grid.weights()
    norm = np.sqrt(ip(f, f, w))
    overlap = abs(ip(basis.modes[:, 0], f / norm, w))
    assert overlap == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(RankDeficiencyError):
        pod(snaps, "velocity", 2)


def test_method_of_snapshots_matches_dense_svd_oracle():
    grid = GridSpec(nx=16, ny=8, lx=2.0, ly=1.0)
    rng = np.random.default_rng(3)
    snaps = _snapset(grid, [rng.standard_normal(2 * grid.n_cells) for _ in range(12)])
    basis = pod(snaps, "velocity", 8)
    # dense oracle: SVD of sqrt(W) S
    S = snaps.field_matrix("u")
    wf = field_weights(snaps.weights, S.shape[0])
    _, svals, vt = np.linalg.svd(np.sqrt(wf)[:, None] * S, full_matrices=False)
    assert np.allclose(basis.singular_values, svals[:8], rtol=1e-9)
    modes_oracle = S @ (vt[:8].T / svals[:8])
    for i in range(8):
        ratio = ip(basis.modes[:, i], modes_oracle[:, i], snaps.weights)
        assert abs(abs(ratio) - 1.0) < 1e-9  # match within sign


def test_reconstruction_error_matches_spectrum_tail():
    grid = GridSpec(nx=16, ny=8, lx=2.0, ly=1.0)
    rng = np.random.default_rng(4)
    snaps = _snapset(grid, [rng.standard_normal(2 * grid.n_cells) for _ in range(10)])
    full = pod(snaps, "velocity", 10)
    n_keep = 4
    S = snaps.field_matrix("u")
    wf = field_weights(snaps.weights, S.shape[0])
    coeffs = (full.modes[:, :n_keep] * wf[:, None]).T @ S
    resid = S - full.modes[:, :n_keep] @ coeffs
    err = np.sqrt(np.sum(wf[:, None] * resid**2))
    tail = np.sqrt(np.sum(full.singular_values[n_keep:] ** 2))
    assert err == pytest.approx(tail, rel=1e-9)


def test_modes_are_orthonormal(small_data):
    basis = small_data["vel"]
    w = small_data["snaps"].weights
    wf = field_weights(w, basis.modes.shape[0])
    G = (basis.modes * wf[:, None]).T @ basis.modes
    # trailing modes carry tiny singular values, so allow some rounding
    assert np.allclose(G, np.eye(basis.n_modes), atol=1e-5)
    assert np.allclose(G[:8, :8], np.eye(8), atol=1e-10)


def test_supremizers_orthogonal_and_positive_pairing(small_data):
    grid = small_data["grid"]
    w = small_data["snaps"].weights
    pres = small_data["pres"].truncated(4)
    vel = small_data["vel"].truncated(6)
    sup = supremizers(pres, grid, w, vel)
    enriched = enrich(vel, sup)
    assert enriched.n_modes == vel.n_modes + 4
    assert enriched.n_sup == 4
    wf = field_weights(w, enriched.modes.shape[0])
    G = (enriched.modes * wf[:, None]).T @ enriched.modes
    assert np.allclose(G, np.eye(enriched.n_modes), atol=1e-10)
    # raw supremizer pairing ip(chi_i, div(s_i_raw)) > 0
    Dx, Dy = diff_ops(grid)
    n = grid.n_cells
    for i in range(4):
        chi = pres.modes[:, i]
        su = np.where(grid.fluid, Dx.T @ chi, 0.0)
        sv = np.where(grid.fluid, Dy.T @ chi, 0.0)
        pairing = ip(chi, Dx @ su + Dy @ sv, w)
        assert pairing > 0.0


def test_duplicate_pressure_mode_degenerates():
    grid = GridSpec(nx=8, ny=8, lx=1.0, ly=1.0)
    w = grid.weights()
    xc, _ = grid.cell_centers()
    chi = xc - xc.mean()
    chi /= np.sqrt(ip(chi, chi, w))
    pres = PodBasis(modes=np.column_stack([chi, chi]),
                    singular_values=np.array([1.0, 1.0]), kind="pressure")
    with pytest.raises(DegenerateModeError):
        supremizers(pres, grid, w)


def test_zero_pressure_mode_degenerates():
    grid = GridSpec(nx=8, ny=8, lx=1.0, ly=1.0)
    w = grid.weights()
    pres = PodBasis(modes=np.zeros((grid.n_cells, 1)),
                    singular_values=np.array([1.0]), kind="pressure")
    with pytest.raises(DegenerateModeError):
        supremizers(pres, grid, w)


def test_enrich_with_empty_list_is_identity(small_data):
    vel = small_data["vel"]
    same = enrich(vel, None)
    assert same.n_modes == vel.n_modes
    assert same.n_sup == vel.n_sup
    assert np.array_equal(same.modes, vel.modes)


def test_basis_io_roundtrip(tmp_path, small_data):
    for key in ("vel", "pres", "nut"):
        basis = small_data[key]
        path = tmp_path / f"{key}.rombas"
        write_basis(basis, path)
        back = read_basis(path)
        assert back.kind == basis.kind
        assert back.n_sup == basis.n_sup
        assert np.array_equal(back.modes, basis.modes)
        assert np.array_equal(back.singular_values, basis.singular_values)
