"""Error metrics, mode sweep invariants, and report artifacts."""

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from romforge.grid import ConfigurationError
from romforge.report import (CONFIGURATIONS, ErrorSeries, SweepConfig,
                             SweepResult, check_lower_bound, emit_heatmaps,
                             emit_report, error_integral, error_series,
                             mode_sweep)
from romforge.snapshots import project_coeffs


class _Traj:
    """Minimal stand-in trajectory for error evaluation."""

    def __init__(self, times, a, b):
        self.times = np.asarray(times)
        self.a = np.atleast_2d(a)
        self.b = np.atleast_2d(b)


def test_projected_trajectory_has_zero_error(small_data):
    """Replaying full-rank projected coefficients gives ~0 percent error."""
    snaps = small_data["snaps"]
    vel, pres = small_data["vel"], small_data["pres"]
    a_d = project_coeffs(snaps, vel)
    b_d = project_coeffs(snaps, pres)
    traj = _Traj(a_d.times[:5], a_d.values[:5], b_d.values[:5])
    series = error_series(traj, snaps, vel, pres)
    assert np.max(series.eps_u) < 1e-6
    assert np.max(series.eps_p) < 1e-6


def test_zero_trajectory_is_hundred_percent(small_data):
    snaps = small_data["snaps"]
    vel, pres = small_data["vel"], small_data["pres"]
    times = snaps.times[:4]
    traj = _Traj(times, np.zeros((4, vel.n_modes)), np.zeros((4, pres.n_modes)))
    series = error_series(traj, snaps, vel, pres)
    assert np.allclose(series.eps_u, 100.0, atol=1e-9)
    assert np.allclose(series.eps_p, 100.0, atol=1e-9)


def test_truncation_error_decreases_with_more_modes(small_data):
    """Keeping more projected modes cannot increase the velocity error."""
    snaps = small_data["snaps"]
    vel, pres = small_data["vel"], small_data["pres"]
    a_d = project_coeffs(snaps, vel)
    b_d = project_coeffs(snaps, pres)
    means = []
    for n in (2, 4, 8):
        traj = _Traj(a_d.times[:6], a_d.values[:6, :n], b_d.values[:6, :n])
        series = error_series(traj, snaps, vel, pres)
        means.append(series.eps_u.mean())
    assert means[0] >= means[1] >= means[2]


def test_time_matching_beyond_half_interval_raises(small_data):
    snaps = small_data["snaps"]
    vel, pres = small_data["vel"], small_data["pres"]
    bad_t = snaps.times[-1] + 0.6 * snaps.dt_snap
    traj = _Traj([bad_t], np.zeros((1, vel.n_modes)), np.zeros((1, pres.n_modes)))
    with pytest.raises(ValueError):
        error_series(traj, snaps, vel, pres)


def test_constant_error_integral():
    """Constant 5 percent error over a 2 s window integrates to 0.1."""
    times = np.arange(0.0, 2.0, 0.05)
    series = ErrorSeries(times=times, eps_u=np.full(len(times), 5.0),
                         eps_p=np.full(len(times), 5.0), d=10)
    iu, ipp = error_integral(series, 0.0, 2.0)
    assert iu == pytest.approx(0.1, rel=1e-12)
    assert ipp == pytest.approx(0.1, rel=1e-12)


def test_error_integral_window_selection():
    times = np.array([0.0, 0.1, 0.2, 0.3])
    series = ErrorSeries(times=times, eps_u=np.array([10.0, 20.0, 30.0, 40.0]),
                         eps_p=np.zeros(4), d=4)
    iu, _ = error_integral(series, 0.1, 0.3)  # picks samples at 0.1 and 0.2
    assert iu == pytest.approx((0.2 + 0.3) * 0.1, rel=1e-12)
    with pytest.raises(ValueError):
        error_integral(series, 5.0, 6.0)


def test_error_series_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        ErrorSeries(times=[0.0, 0.1], eps_u=[1.0], eps_p=[1.0, 2.0], d=3)
    with pytest.raises(ValueError):
        ErrorSeries(times=[0.0], eps_u=[-1.0], eps_p=[0.0], d=3)
    series = ErrorSeries(times=[0.0, 0.1], eps_u=[1.5, 2.5], eps_p=[0.5, 0.25], d=7)
    path = tmp_path / "s.csv"
    series.to_csv(path)
    back = ErrorSeries.from_csv(path, d=7)
    assert np.allclose(back.times, series.times, rtol=1e-15)
    assert np.allclose(back.eps_u, series.eps_u, rtol=1e-15)
    assert np.allclose(back.eps_p, series.eps_p, rtol=1e-15)


def test_sweep_config_validation():
    with pytest.raises(ConfigurationError):
        SweepConfig(nu=-1.0)
    with pytest.raises(ConfigurationError):
        SweepConfig(nu=0.01, train_fraction=0.0)
    with pytest.raises(ConfigurationError):
        SweepConfig(nu=0.01, ridge_scale=-1.0)


def test_sweep_result_csv_roundtrip(tmp_path):
    result = SweepResult(
        n_values=np.array([1, 2, 3]),
        labels=("projection", "none"),
        int_u=np.array([[0.01, 0.005, 0.002], [0.05, 0.03, 0.01]]),
        int_p=np.array([[0.02, 0.01, 0.004], [0.2, 0.1, 0.05]]),
    )
    path = tmp_path / "sweep.csv"
    result.to_csv(path)
    back = SweepResult.from_csv(path)
    assert back.labels == result.labels
    assert np.array_equal(back.n_values, result.n_values)
    assert np.allclose(back.int_u, result.int_u, rtol=1e-3)
    assert np.allclose(back.int_p, result.int_p, rtol=1e-3)


def test_check_lower_bound():
    good = SweepResult(n_values=np.array([1, 2]), labels=("projection", "none"),
                       int_u=np.array([[0.01, 0.005], [0.02, 0.01]]),
                       int_p=np.array([[0.01, 0.005], [0.02, 0.01]]))
    assert check_lower_bound(good)
    bad = SweepResult(n_values=np.array([1, 2]), labels=("projection", "none"),
                      int_u=np.array([[0.01, 0.005], [0.005, 0.01]]),
                      int_p=good.int_p)
    assert not check_lower_bound(bad)


def test_mode_sweep_small_dataset(small_data):
    """Two-point sweep on the small dataset: finishes, bound holds."""
    result = mode_sweep(small_data["snaps"], small_data["vel"],
                        small_data["pres"], small_data["nut"], small_data["ops"],
                        SweepConfig(nu=small_data["cfg"].nu, ev_epochs=300),
                        n_range=[2, 3],
                        configurations=("none", "correction"))
    assert result.labels == ("projection", "none", "correction")
    assert not result.failures
    assert np.all(np.isfinite(result.int_u))
    assert check_lower_bound(result)


def test_mode_sweep_rejects_bad_inputs(small_data):
    cfg = SweepConfig(nu=small_data["cfg"].nu)
    with pytest.raises(ConfigurationError):
        mode_sweep(small_data["snaps"], small_data["vel"], small_data["pres"],
                   small_data["nut"], small_data["ops"], cfg, n_range=[0, 2])
    with pytest.raises(ConfigurationError):
        mode_sweep(small_data["snaps"], small_data["vel"], small_data["pres"],
                   small_data["nut"], small_data["ops"], cfg, n_range=[2],
                   configurations=("bogus",))


def test_emit_report_artifacts(tmp_path):
    result = SweepResult(
        n_values=np.array([1, 2]), labels=("projection", "none"),
        int_u=np.array([[0.01, 0.005], [0.02, 0.01]]),
        int_p=np.array([[0.01, 0.004], [0.03, 0.02]]),
    )
    paths = emit_report(result, tmp_path, prefix="tbl")
    assert len(paths) == 3
    for p in paths:
        assert str(p).endswith((".csv", ".svg"))
        if str(p).endswith(".svg"):
            ET.parse(p)  # valid XML
    series = ErrorSeries(times=[0.0, 0.1], eps_u=[1.0, 2.0], eps_p=[3.0, 4.0], d=5)
    paths = emit_report(series, tmp_path, prefix="ser")
    assert len(paths) == 2
    ET.parse(paths[1])
    with pytest.raises(TypeError):
        emit_report("not a result", tmp_path)
    with pytest.raises(ValueError):
        emit_report(ErrorSeries(times=[], eps_u=[], eps_p=[], d=1), tmp_path)


def test_emit_heatmaps(tmp_path, small_data):
    snaps = small_data["snaps"]
    vel, pres = small_data["vel"], small_data["pres"]
    a_d = project_coeffs(snaps, vel)
    b_d = project_coeffs(snaps, pres)
    path = emit_heatmaps(snaps, vel, pres, a_d.values[2], b_d.values[2], 2, tmp_path)
    assert str(path).endswith(".svg")
    ET.parse(path)
