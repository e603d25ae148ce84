import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from sweeplio.geometry import (
    IDENTITY_QUAT, Pose, State, TimingError, interpolate_state, quat_conj, quat_exp, quat_left,
    quat_log, quat_mul, quat_right, quat_to_rot, rot_to_quat, skew, slerp,
)
from conftest import random_state, unit_quats, vec3


def rz(deg):
    h = np.radians(deg) / 2
    return np.array([np.cos(h), 0, 0, np.sin(h)])


def same_rotation(a, b, tol=1e-10):
    return min(np.abs(a - b).max(), np.abs(a + b).max()) < tol


def scipy_quat(q):
    # scipy uses scalar-last
    return Rotation.from_quat([q[1], q[2], q[3], q[0]])


# -- skew ---------------------------------------------------------------------

def test_skew_examples():
    assert np.array_equal(skew([0, 0, 0]), np.zeros((3, 3)))
    np.testing.assert_allclose(skew([1, 0, 0]) @ [0, 1, 0], [0, 0, 1])


@given(vec3(), vec3())
def test_skew_is_cross_product_and_antisymmetric(v, u):
    S = skew(v)
    np.testing.assert_allclose(S @ u, np.cross(v, u), atol=1e-9)
    np.testing.assert_array_equal(S.T, -S)


# -- quaternion products --------------------------------------------------------

def test_quat_left_identity():
    np.testing.assert_array_equal(quat_left(IDENTITY_QUAT), np.eye(4))


def test_hamilton_product_matches_scipy(rng):
    for _ in range(200):
        a, b = (rng.normal(size=4) for _ in range(2))
        a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
        ab = quat_mul(a, b)
        ref = (scipy_quat(a) * scipy_quat(b)).as_matrix()
        np.testing.assert_allclose(quat_to_rot(ab), ref, atol=1e-12)
        np.testing.assert_allclose(quat_left(a) @ b, ab, atol=1e-12)
        np.testing.assert_allclose(quat_right(b) @ a, ab, atol=1e-12)


@given(unit_quats(), unit_quats(), unit_quats())
def test_left_right_associativity(a, b, c):
    np.testing.assert_allclose(quat_left(a) @ quat_right(c) @ b, quat_mul(quat_mul(a, b), c), atol=1e-12)


# -- conversions ------------------------------------------------------------------

def test_quat_to_rot_matches_scipy(rng):
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        np.testing.assert_allclose(quat_to_rot(q), scipy_quat(q).as_matrix(), atol=1e-12)


@given(unit_quats(), st.lists(vec3(), min_size=10, max_size=10))
def test_matrix_round_trip_preserves_action(q, vs):
    q2 = rot_to_quat(quat_to_rot(q))
    assert abs(np.linalg.norm(q2) - 1) < 1e-9
    assert q2[0] >= 0
    for v in vs:
        np.testing.assert_allclose(quat_to_rot(q2) @ v, quat_to_rot(q) @ v, atol=1e-9 * (1 + np.linalg.norm(v)))


def test_exp_log_match_rotation_vector(rng):
    for _ in range(100):
        v = rng.normal(size=3)
        v *= rng.uniform(0, 3.1) / np.linalg.norm(v)
        q = quat_exp(v)
        np.testing.assert_allclose(quat_to_rot(q), Rotation.from_rotvec(v).as_matrix(), atol=1e-12)
        np.testing.assert_allclose(quat_log(q), v, atol=1e-10)
    np.testing.assert_allclose(quat_exp(np.zeros(3)), IDENTITY_QUAT)


# -- slerp ------------------------------------------------------------------------

def test_slerp_examples(rng):
    q = rz(37)
    np.testing.assert_allclose(slerp(q, q, 0.5), q, atol=1e-12)
    assert same_rotation(slerp(IDENTITY_QUAT, rz(90), 0.5), rz(45))


def test_slerp_matches_exp_log_oracle(rng):
    for _ in range(200):
        qa, qb = (scipy_quat(rng.normal(size=4)) for _ in range(2))
        rel = (qa.inv() * qb).as_rotvec()
        ref = (qa * Rotation.from_rotvec(0.3 * rel)).as_matrix()
        a = qa.as_quat()
        b = qb.as_quat()
        q = slerp(np.r_[a[3], a[:3]], np.r_[b[3], b[:3]], 0.3)
        np.testing.assert_allclose(quat_to_rot(q), ref, atol=1e-10)


@given(unit_quats(), unit_quats(), st.floats(0, 1))
def test_slerp_angle_is_proportional(q0, q1, alpha):
    q = slerp(q0, q1, alpha)
    assert abs(np.linalg.norm(q) - 1) < 1e-9
    total = np.linalg.norm(quat_log(quat_mul(quat_conj(q0), q1)))
    part = np.linalg.norm(quat_log(quat_mul(quat_conj(q0), q)))
    # shortest branch, so the total angle is at most pi
    assert total <= np.pi + 1e-9
    assert abs(part - alpha * total) < 1e-9


def test_slerp_near_identical_inputs_is_stable():
    q0 = rz(10)
    q1 = quat_mul(q0, quat_exp([1e-10, 0, 0]))
    q = slerp(q0, q1, 0.5)
    assert np.all(np.isfinite(q)) and abs(np.linalg.norm(q) - 1) < 1e-12


# -- pose / state -------------------------------------------------------------------

@given(unit_quats(), vec3())
def test_pose_inverse_composition(q, t):
    P = Pose(q, t)
    I = P.compose(P.inverse())
    assert same_rotation(I.rotation, IDENTITY_QUAT, 1e-9)
    np.testing.assert_allclose(I.translation, 0, atol=1e-9)


def test_state_is_canonical():
    x = State(rotation=[-2.0, 0, 0, 0])
    np.testing.assert_allclose(x.rotation, IDENTITY_QUAT)
    with pytest.raises(ValueError):
        State(timestamp=float("nan"))


def test_interpolate_state_examples(rng):
    xb = random_state(rng, t=1.0)
    xe = random_state(rng, t=2.0)
    x = interpolate_state(xb, xe, 1.0)
    for f in ("translation", "rotation", "velocity", "accel_bias", "gyro_bias"):
        np.testing.assert_array_equal(getattr(x, f), getattr(xb, f))
    mid = interpolate_state(xb.replace(velocity=np.zeros(3)), xe.replace(velocity=np.array([2.0, 0, 0])), 1.5)
    np.testing.assert_allclose(mid.velocity, [1, 0, 0])
    x = interpolate_state(xb, xe, 1.7)
    for f in ("translation", "velocity", "accel_bias", "gyro_bias"):
        np.testing.assert_allclose(getattr(x, f), 0.3 * getattr(xb, f) + 0.7 * getattr(xe, f), atol=1e-12)
    assert x.timestamp == 1.7


def test_interpolate_state_degenerate_interval(rng):
    xb = random_state(rng, t=1.0)
    with pytest.raises(TimingError):
        interpolate_state(xb, xb, 1.0)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
def test_interpolate_state_affine(a1, a2, seed):
    rng = np.random.default_rng(seed)
    xb, xe = random_state(rng, 0.0), random_state(rng, 0.1)
    x1, x2 = interpolate_state(xb, xe, 0.1 * a1), interpolate_state(xb, xe, 0.1 * a2)
    xm = interpolate_state(xb, xe, 0.1 * (a1 + a2) / 2)
    np.testing.assert_allclose(xm.translation, (x1.translation + x2.translation) / 2, atol=1e-9)
    np.testing.assert_allclose(xm.velocity, (x1.velocity + x2.velocity) / 2, atol=1e-9)
    end = interpolate_state(xb, xe, 0.1)
    np.testing.assert_array_equal(end.translation, xe.translation)
