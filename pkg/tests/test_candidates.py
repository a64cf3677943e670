import math

import numpy as np
import pytest

from riftsim.candidates import GenerationConfig, generate_candidates, longitudinal_profiles
from riftsim.dynamics import VehicleState
from riftsim.worldmap import ReferenceLine, resample_polyline


def _line(angle=0.0, origin=(0.0, 0.0), length=300.0):
    d = np.array([math.cos(angle), math.sin(angle)])
    o = np.asarray(origin, float)
    return resample_polyline(np.array([o, o + length * d]), length)


def _arc_line(radius=40.0):
    a = np.linspace(0, math.pi, 400)
    pts = np.column_stack([radius * np.sin(a), radius * (1 - np.cos(a))])
    return resample_polyline(pts, 500.0)


def test_profile_targets_evenly_spaced():
    p = longitudinal_profiles(20.0, n_lon=12, v_max=20.0, T=400)
    assert np.allclose(p[:, -1], np.linspace(0, 20, 12))
    assert np.allclose(np.diff(p[:, -1]), 20 / 11)


def test_profile_constant_at_target():
    p = longitudinal_profiles(20.0, n_lon=12, v_max=20.0, T=80)
    assert np.all(p[-1] == 20.0)


def test_profile_ramp_reaches_target_at_step_50():
    p = longitudinal_profiles(0.0, n_lon=3, v_max=20.0, T=80, dt=0.1, a_limit=2.0)
    mid = p[1]  # target 10
    assert mid[50] == pytest.approx(10.0) and mid[49] < 10.0
    assert np.all(mid[50:] == 10.0)
    assert np.all(np.abs(np.diff(p, axis=1)) <= 2.0 * 0.1 + 1e-12)
    assert np.all(p >= 0)


def test_profile_rejects_bad_args():
    with pytest.raises(ValueError):
        longitudinal_profiles(1.0, n_lon=0)
    with pytest.raises(ValueError):
        longitudinal_profiles(1.0, v_max=0.0)


def test_group_size_and_order():
    cs = generate_candidates(VehicleState(0, 0, 0, 5.0), [_line(), _line(origin=(0, 3.5))], n_lon=3)
    assert len(cs) == 6
    assert list(cs.ref_index) == [0, 0, 0, 1, 1, 1]
    assert list(cs.lon_index) == [0, 1, 2, 0, 1, 2]


def test_zero_speed_profile_holds_anchor():
    cs = generate_candidates(VehicleState(2.0, 1.0, 0.0, 0.0), [_line()])
    zero = cs[0]
    assert np.all(zero.points[:, 0] == 2.0) and np.all(zero.points[:, 1] == 1.0)
    assert np.all(zero.speeds == 0.0)


def test_arclength_integration_on_centreline():
    cfg = GenerationConfig(n_lon=2, v_max=5.0)
    cs = generate_candidates(VehicleState(0.0, 0.0, 0.0, 5.0), [_line()], cfg)
    pts = cs[1].points  # constant 5 m/s
    t = np.arange(len(pts))
    assert np.max(np.abs(pts[:, 0] - 0.5 * t)) < 1e-9
    assert np.max(np.abs(pts[:, 1])) < 1e-9


def test_spacing_bounded_by_vmax():
    cs = generate_candidates(VehicleState(0.0, 1.2, 0.1, 7.0), [_arc_line(), _line()])
    step = np.hypot(np.diff(cs.points[..., 0], axis=1), np.diff(cs.points[..., 1], axis=1))
    assert np.all(step <= cs.config.v_max * cs.config.dt + 1e-9)


def test_rigid_transform_invariance():
    ang, off = 0.7, np.array([13.0, -4.0])
    rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])

    def moved(line: ReferenceLine):
        return ReferenceLine(line.xy @ rot.T + off, line.heading + ang, line.s.copy())

    st = VehicleState(1.0, 0.8, 0.05, 6.0)
    p = (rot @ np.array([st.x, st.y])) + off
    st2 = VehicleState(p[0], p[1], st.heading + ang, st.speed)
    lines = [_arc_line(), _line(origin=(0, 3.5))]
    a = generate_candidates(st, lines).points
    b = generate_candidates(st2, [moved(ln) for ln in lines]).points
    xy = a[..., :2] @ rot.T + off
    assert np.max(np.abs(xy - b[..., :2])) < 1e-9
    for k in (2, 4):
        vec = np.stack([a[..., k], a[..., k + 1]], -1) @ rot.T
        assert np.max(np.abs(vec - b[..., k:k + 2])) < 1e-9


def test_deterministic_and_truncation_flag():
    st = VehicleState(0, 0, 0, 5.0)
    short = _line(length=20.0)
    a = generate_candidates(st, [short])
    b = generate_candidates(st, [short])
    assert np.array_equal(a.points, b.points)
    assert a[-1].truncated and not a[0].truncated
    assert np.max(a[-1].points[:, 0]) <= 20.0 + 1e-9
    with pytest.raises(ValueError):
        generate_candidates(st, [])
