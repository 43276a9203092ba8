import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dopplerloc.acoustic import add_interferer, phase_oracle, synthesize_scene
from dopplerloc.direction import (DirectionError, TiltWarning, direction_3d, normalize_angle,
                                  regress_direction, relative_angle, simple_rectangle_direction,
                                  to_2d_angle, write_direction_csv)
from dopplerloc.harness import estimate_directions, get_profile, noise_level, simulate_imu
from dopplerloc.imu import FrameEstimate, MotionIntegrals, integrate_motion, synthesize_imu, true_frame
from dopplerloc.motion import gen_trajectory
from dopplerloc.scenario import AnchorNode, MotionPatternSpec, Scene, WorldConfig

W = WorldConfig()
K = 19000.0 / 340.0


def planar_case(lam=(1.0, 0.0), bias=(0.0, 0.0), v0=(0.0, 0.0), n=800, rate=200.0):
    """Integrals of a two-tone planar shake and the shifts a source along ``lam`` produces."""
    t = np.arange(n) / rate
    a_x = 3.0 * np.sin(2 * np.pi * 1.3 * t) + 1.5 * np.cos(2 * np.pi * 0.7 * t)
    a_y = 2.0 * np.cos(2 * np.pi * 1.1 * t) - 1.0 * np.sin(2 * np.pi * 2.3 * t)
    T = np.full(n, 1.0 / rate)
    w_x = np.concatenate([[0.0], np.cumsum(T[:-1] * a_x[:-1])])
    w_y = np.concatenate([[0.0], np.cumsum(T[:-1] * a_y[:-1])])
    vx = v0[0] + w_x + bias[0] * t
    vy = v0[1] + w_y + bias[1] * t
    f = K * (lam[0] * vx + lam[1] * vy)
    return MotionIntegrals(t, a_x, a_y, w_x, w_y, T), f


def pipeline_alpha_r(bearing_deg, L=8.0, profile="noiseless", seed=0, interferer=None, volume=0.0):
    b = math.radians(bearing_deg)
    spec = MotionPatternSpec(pattern="A_mixed", seed=seed)
    scene = Scene(W, (AnchorNode("S", L * math.cos(b), L * math.sin(b), 19000.0),), spec, pass_band=224.0)
    if interferer is not None:
        bi = math.radians(interferer)
        scene = add_interferer(scene, AnchorNode("I", L * math.cos(bi), L * math.sin(bi), 19000.0), volume)
    traj = gen_trajectory(spec, W)
    rng = np.random.default_rng(seed)
    prof = get_profile(profile)
    pcm = synthesize_scene(traj, scene, noise_level(scene, prof, L), rng)
    imu = simulate_imu(traj, prof, rng)
    return math.degrees(estimate_directions(pcm, imu, scene, 0.0)["S"].alpha_r)


# --------------------------------------------------------------------------- regression

def test_source_on_x_axis():
    integ, f = planar_case()
    est = regress_direction(integ, f, W, 19000.0)
    assert est.lambda_x == pytest.approx(1.0, abs=1e-9)
    assert est.lambda_y == pytest.approx(0.0, abs=1e-9)
    assert est.alpha == pytest.approx(0.0, abs=1e-9)
    assert est.residual_rms < 1e-9
    assert est.n == 800


def test_bias_and_initial_velocity_absorbed():
    lam = (math.cos(0.7), math.sin(0.7))
    clean = regress_direction(*planar_case(lam), W, 19000.0)
    shifted = regress_direction(*planar_case(lam, bias=(0.05, -0.03), v0=(0.1, -0.2)), W, 19000.0)
    assert shifted.lambda_x == pytest.approx(clean.lambda_x, abs=1e-9)
    assert shifted.lambda_y == pytest.approx(clean.lambda_y, abs=1e-9)
    # the nuisance columns carry lambda . v0 and lambda . e
    assert shifted.lambda_0 == pytest.approx(lam[0] * 0.1 - lam[1] * 0.2, abs=1e-9)
    assert shifted.lambda_1 == pytest.approx(lam[0] * 0.05 - lam[1] * 0.03, abs=1e-9)


def test_window_selects_samples():
    integ, f = planar_case()
    est = regress_direction(integ, f, W, 19000.0, window=(1.0, 2.0))
    assert est.n == 201
    assert est.lambda_x == pytest.approx(1.0, abs=1e-9)


def test_one_axis_shake_is_rank_deficient():
    integ, f = planar_case()
    integ.w_y[:] = 0.0
    with pytest.raises(DirectionError, match="w_y"):
        regress_direction(integ, f, W, 19000.0)


def test_regression_input_errors():
    integ, f = planar_case()
    with pytest.raises(DirectionError, match="aligned"):
        regress_direction(integ, f[:-1], W, 19000.0)
    with pytest.raises(DirectionError, match="four"):
        regress_direction(integ, f, W, 19000.0, window=(0.0, 0.01))


@given(st.floats(-math.pi, math.pi), st.floats(-0.5, 0.5).filter(lambda e: abs(e) > 1e-6))
def test_scale_consistency(angle, eps):
    integ, f = planar_case((math.cos(angle), math.sin(angle)), bias=(0.02, 0.01), v0=(0.3, 0.1))
    base = regress_direction(integ, f, W, 19000.0)
    scaled = regress_direction(integ, f * (1 + eps), W, 19000.0)
    for name in ("lambda_x", "lambda_y", "lambda_0", "lambda_1"):
        assert getattr(scaled, name) == pytest.approx(getattr(base, name) * (1 + eps), abs=1e-9)
    assert scaled.alpha == pytest.approx(base.alpha, abs=1e-9)


@given(st.floats(-math.pi, math.pi), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_projection_bound(angle, elevation, seed):
    """A source out of the plane shortens (lx, ly); shift noise is covered by the residual."""
    lam = (math.cos(elevation) * math.cos(angle), math.cos(elevation) * math.sin(angle))
    integ, f = planar_case(lam)
    f = f + np.random.default_rng(seed).normal(0.0, 0.5, len(f))
    est = regress_direction(integ, f, W, 19000.0)
    # standard error of (lx, ly) from the residual and the design matrix
    X = np.column_stack([integ.w_x, integ.w_y, np.ones(len(f)), integ.t])
    cov = (est.residual_rms / K) ** 2 * np.linalg.inv(X.T @ X)
    tol = math.sqrt(cov[0, 0] + cov[1, 1])
    assert est.norm <= 1.0 + 3.0 * tol


# --------------------------------------------------------------------------- 3D and angles

def test_direction_3d_exact():
    rng = np.random.default_rng(3)
    u = rng.normal(size=(300, 3))
    lam = np.array([0.3, -0.5, 0.6])
    lam /= np.linalg.norm(lam)
    got = direction_3d(u, K * (u @ lam), W, 19000.0)
    np.testing.assert_allclose(got, lam, atol=1e-9)


def test_direction_3d_planar_names_z():
    u = np.random.default_rng(4).normal(size=(100, 3))
    u[:, 2] = 0.0
    with pytest.raises(DirectionError, match="z"):
        direction_3d(u, np.ones(100), W, 19000.0)


def test_direction_3d_shape_error():
    with pytest.raises(DirectionError):
        direction_3d(np.zeros((5, 2)), np.zeros(5), W, 19000.0)


def test_elevated_source_projects():
    spec = MotionPatternSpec(pattern="A_mixed")
    traj = gen_trajectory(spec, W)
    L = 200.0
    a = AnchorNode("S", L * math.cos(math.radians(30)) * math.cos(0.4),
                   L * math.cos(math.radians(30)) * math.sin(0.4), 19000.0,
                   height=L * math.sin(math.radians(30)))
    imu = synthesize_imu(traj)
    integ = integrate_motion(imu, true_frame(traj, imu))
    f = phase_oracle(traj, [a], W, imu.t)["S"].f_shift_true
    est = regress_direction(integ, f, W, 19000.0, window=(0.6, traj.t[-1] - 0.3))
    assert est.norm == pytest.approx(math.cos(math.radians(30)), abs=2e-3)
    assert est.alpha == pytest.approx(0.4, abs=2e-3)


@pytest.mark.parametrize("lx, ly, expected", [(1.0, 0.0, 0.0), (0.0, 1.0, math.pi / 2),
                                              (-math.sqrt(0.5), -math.sqrt(0.5), 5 * math.pi / 4),
                                              (-1.0, 0.0, math.pi), (0.0, -1.0, -math.pi / 2)])
def test_to_2d_angle_examples(lx, ly, expected):
    assert to_2d_angle(lx, ly) == pytest.approx(expected, abs=1e-12)


def test_to_2d_angle_quadrant_sweep():
    for a in np.linspace(-math.pi / 2, 3 * math.pi / 2, 3601, endpoint=False):
        r = 0.3 + (a % 1.0)
        got = to_2d_angle(r * math.cos(a), r * math.sin(a))
        oracle = math.atan2(math.sin(a), math.cos(a))
        if oracle < -math.pi / 2:
            oracle += 2 * math.pi
        assert -math.pi / 2 <= got < 3 * math.pi / 2
        assert got == pytest.approx(oracle, abs=1e-9)


def test_to_2d_angle_zero():
    with pytest.raises(DirectionError):
        to_2d_angle(0.0, 0.0)


def test_relative_angle_examples():
    assert relative_angle(math.pi / 2, 0.0) == pytest.approx(0.0)
    assert relative_angle(0.0, 0.0) == pytest.approx(math.pi / 2)
    assert relative_angle(math.pi, math.pi / 2) == pytest.approx(math.pi)
    assert -math.pi < relative_angle(3 * math.pi / 2, 0.0) <= math.pi


@given(st.floats(-math.pi / 2, 3 * math.pi / 2 - 1e-9), st.floats(-math.pi, math.pi),
       st.floats(-10.0, 10.0))
def test_relative_angle_frame_invariance(alpha, alpha0, delta):
    a = relative_angle(alpha, alpha0)
    b = relative_angle(alpha - delta, alpha0 + delta)
    assert abs(normalize_angle(a - b)) < 1e-9


def test_relative_angle_tilt_warning():
    frame = FrameEstimate(np.zeros(1), None, 0.2, 9.81, math.radians(15))
    with pytest.warns(TiltWarning):
        relative_angle(0.5, frame)


def test_normalize_angle_range():
    assert normalize_angle(-math.pi) == math.pi
    assert normalize_angle(3 * math.pi) == pytest.approx(math.pi)
    assert normalize_angle(0.1 + 4 * math.pi) == pytest.approx(0.1)


# --------------------------------------------------------------------------- rectangle case

def test_rectangle_forward_values():
    a = math.radians(30)
    f = K * np.array([math.sin(a), math.cos(a), -math.sin(a), -math.cos(a)])
    # two-decimal published values; 48.3955 is truncated rather than rounded there
    np.testing.assert_allclose(f, [27.94, 48.39, -27.94, -48.39], atol=0.01)
    assert math.degrees(simple_rectangle_direction(np.ones(4), f, W, 19000.0)) == pytest.approx(30.0, abs=1e-6)


def test_rectangle_ordering_bounds_angle():
    # f2 > f1 > 0 > f3 > f4
    alpha = simple_rectangle_direction(np.ones(4), [20.0, 40.0, -21.0, -39.0], W, 19000.0)
    assert 0.0 < math.degrees(alpha) < 45.0


@given(st.floats(-math.pi, math.pi), st.lists(st.floats(0.3, 2.0), min_size=4, max_size=4))
def test_rectangle_inverts_forward_model(alpha, speeds):
    u = np.array(speeds)
    f = K * u * np.array([math.sin(alpha), math.cos(alpha), -math.sin(alpha), -math.cos(alpha)])
    got = simple_rectangle_direction(u, f, W, 19000.0)
    assert abs(normalize_angle(got - alpha)) < 1e-6


def test_rectangle_errors():
    with pytest.raises(DirectionError, match="indeterminate"):
        simple_rectangle_direction(np.ones(4), np.zeros(4), W, 19000.0)
    with pytest.raises(DirectionError, match="signs"):
        simple_rectangle_direction(np.ones(4), [10.0, 5.0, 10.0, -5.0], W, 19000.0)
    with pytest.raises(DirectionError, match="positive"):
        simple_rectangle_direction([1.0, 0.0, 1.0, 1.0], [1.0, 1.0, -1.0, -1.0], W, 19000.0)


# --------------------------------------------------------------------------- pipeline

def test_pipeline_recovers_45_degrees():
    errs = [pipeline_alpha_r(45.0, profile="paper-like", seed=s) - 45.0 for s in range(4)]
    assert max(abs(e) for e in errs) <= 3.0


def test_small_interferer_has_little_effect():
    clean = pipeline_alpha_r(30.0)
    for volume in (0.1, 0.2):
        assert abs(pipeline_alpha_r(30.0, interferer=75.0, volume=volume) - clean) <= 2.0


def test_equal_interferer_lands_between():
    # primary at 30 deg world bearing (alpha_r 60), interferer at 75 deg (alpha_r 15)
    got = pipeline_alpha_r(30.0, interferer=75.0, volume=1.0)
    assert 15.0 < got < 60.0


def test_direction_csv(tmp_path):
    integ, f = planar_case()
    est = regress_direction(integ, f, W, 19000.0, anchor_id="S")
    est.alpha_r = 0.25
    path = tmp_path / "d.csv"
    write_direction_csv(path, [(0, est), (1, est)])
    lines = path.read_text().splitlines()
    assert lines[0] == "trial,anchor_id,lambda_x,lambda_y,lambda_0,lambda_1,alpha_deg,alpha_r_deg,residual_hz,n"
    assert len(lines) == 3
    assert lines[1].split(",")[7] == f"{math.degrees(0.25):.4f}"
