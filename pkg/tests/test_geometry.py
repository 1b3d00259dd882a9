import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ondevice_ft import geometry as G
from ondevice_ft.geometry import Pose4

from oracles import angle_gap, matrix_pose, numeric_grad, pose_matrix

finite = st.floats(-50, 50, allow_nan=False)
angles = st.floats(-10, 10, allow_nan=False)
poses = st.builds(Pose4, finite, finite, finite, angles)


def close(a: Pose4, b, tol=1e-9):
    a, b = np.asarray(a.as_array()), np.asarray(b)
    return np.allclose(a[:3], b[:3], atol=tol) and angle_gap(a[3], b[3]) <= tol


def test_compose_example():
    out = G.compose(Pose4(1, 0, 0, np.pi / 2), Pose4(1, 0, 0, 0))
    assert close(out, [1, 1, 0, np.pi / 2])


def test_invert_example():
    assert close(G.invert(Pose4(1, 2, 0, np.pi / 2)), [-2, 1, 0, -np.pi / 2])


def test_delta_example_wraps_angle():
    assert G.delta(Pose4(0, 0, 0, np.pi - 0.1), Pose4(0, 0, 0, -np.pi + 0.1)) == pytest.approx(0.2)


def test_wrap_range():
    phi = np.linspace(-20, 20, 10001)
    w = G.wrap_angle(phi)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    assert G.wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert np.allclose(np.cos(w), np.cos(phi)) and np.allclose(np.sin(w), np.sin(phi))


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        Pose4(np.nan, 0, 0, 0)
    with pytest.raises(ValueError):
        Pose4(0, 0, 0, np.inf)


def test_matrix_oracle_1000_cases():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        a = np.r_[rng.uniform(-20, 20, 3), rng.uniform(-2 * np.pi, 2 * np.pi)]
        b = np.r_[rng.uniform(-20, 20, 3), rng.uniform(-2 * np.pi, 2 * np.pi)]
        want = matrix_pose(pose_matrix(a) @ pose_matrix(b))
        got = G.compose_arrays(a, b)
        worst = max(worst, np.abs(got[:3] - want[:3]).max(), angle_gap(got[3], want[3]))
        want = matrix_pose(np.linalg.inv(pose_matrix(a)))
        got = G.invert_arrays(a)
        worst = max(worst, np.abs(got[:3] - want[:3]).max(), angle_gap(got[3], want[3]))
    assert worst <= 1e-6


def test_array_and_scalar_forms_agree():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(50, 4)), rng.normal(size=(50, 4))
    batched = G.compose_arrays(a, b)
    for k in range(50):
        assert close(G.compose(Pose4.from_array(a[k]), Pose4.from_array(b[k])), batched[k])


def test_to_from_matrix_roundtrip():
    p = np.array([1.5, -2.0, 0.3, 2.9])
    m = G.to_matrix(p)
    assert np.allclose(m, pose_matrix(p))
    assert np.allclose(G.from_matrix(m), p)


@settings(max_examples=200, deadline=None)
@given(poses, poses, poses)
def test_associativity(a, b, c):
    assert close((a @ b) @ c, (a @ (b @ c)).as_array(), tol=1e-7)


@settings(max_examples=200, deadline=None)
@given(poses)
def test_inverse_is_identity(a):
    assert close(a @ a.inverse(), [0, 0, 0, 0], tol=1e-7)
    assert close(a.inverse() @ a, [0, 0, 0, 0], tol=1e-7)


@settings(max_examples=200, deadline=None)
@given(poses, poses)
def test_delta_is_a_symmetric_nonnegative_distance(a, b):
    d = G.delta(a, b)
    assert d >= 0
    assert d == pytest.approx(G.delta(b, a))
    assert G.delta(a, a) == 0


def test_delta_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(50):
        t1, t2 = rng.normal(size=4), rng.normal(size=4)
        if np.min(np.abs(t1 - t2)) < 1e-2:
            continue
        num = numeric_grad(lambda v: G.delta_arrays(v, t2), t1, 1e-6)
        assert np.allclose(list(num.values()), G.delta_gradient_arrays(t1, t2), atol=1e-6)


def test_delta_gradient_zero_at_ties():
    assert np.array_equal(G.delta_gradient_arrays(np.ones(4), np.ones(4)), np.zeros(4))
