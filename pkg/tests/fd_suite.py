"""Finite-difference checks of every analytic residual Jacobian.

Each ``check_*`` function draws ``n`` random configurations and returns the
worst violation ratio ``max |J - J_fd| / (1e-5 |J_fd| + 1e-8)``; a value
at most 1 means every entry is within 1e-5 relative / 1e-8 absolute.
"""

import numpy as np

from sweeplio.geometry import State, quat_exp, quat_mul, quat_normalize
from sweeplio.imu import ImuData, NoiseParams, preintegrate, propagate_state
from sweeplio.optimizer import (
    additional_point_to_plane_residual, consistency_residual, imu_residual, point_to_plane_residual,
)

EPS = 1e-6
REL, ABS = 1e-5, 1e-8
G_W = np.array([0.0, 0.0, 9.81])


def fd_state(fn, states, k, eps=EPS, columns=range(15)):
    """Central differences of ``fn(states)`` under right perturbations of state ``k``.

    Columns not listed come back as zero.
    """
    cols = [None] * 15
    m = len(np.atleast_1d(fn(states)))
    for i in range(15):
        if i not in columns:
            cols[i] = np.zeros(m)
            continue
        e = np.zeros(15)
        e[i] = eps
        plus = list(states)
        minus = list(states)
        plus[k] = states[k].retract(e)
        minus[k] = states[k].retract(-e)
        cols[i] = (np.asarray(fn(plus)) - np.asarray(fn(minus))) / (2 * eps)
    return np.column_stack(cols)


def moves_with_non_pose(fn, states, k, rng) -> bool:
    """True if a unit-scale change of velocity and biases of state ``k`` changes ``fn``."""
    moved = list(states)
    x = states[k]
    moved[k] = x.replace(velocity=x.velocity + rng.normal(size=3),
                         accel_bias=x.accel_bias + rng.normal(size=3),
                         gyro_bias=x.gyro_bias + rng.normal(size=3))
    # re-normalizing the quaternion may move the last bit, nothing more
    return not np.allclose(fn(moved), fn(states), rtol=1e-13, atol=1e-13)


def violation(J, Jfd) -> float:
    return float(np.max(np.abs(J - Jfd) / (REL * np.abs(Jfd) + ABS)))


def random_state(rng, t, scale=3.0):
    return State(rng.normal(size=3) * scale, quat_normalize(rng.normal(size=4)),
                 rng.normal(size=3), rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.01, t)


def check_point(rng, n=1000, additional=False):
    worst = 0.0
    res = additional_point_to_plane_residual if additional else point_to_plane_residual
    for _ in range(n):
        t0 = rng.uniform(0, 10)
        t1 = t0 + rng.uniform(0.01, 0.2)
        xs = random_state(rng, t0)
        # end rotation within about a radian of the start
        xe = State(xs.translation + rng.normal(size=3) * 0.5,
                   quat_mul(xs.rotation, quat_exp(rng.normal(size=3) * 0.4)),
                   rng.normal(size=3), xs.accel_bias, xs.gyro_bias, t1)
        p = rng.normal(size=3) * 10
        tp = rng.uniform(t0, t1) if rng.uniform() > 0.1 else rng.choice([t0, t1])
        nrm = rng.normal(size=3)
        nrm /= np.linalg.norm(nrm)
        d, w = rng.normal() * 5, rng.uniform(0.1, 1.0)

        def f(st):
            return res(p, tp, st[0], st[1], nrm, d, w, jacobians=False).value

        blk = res(p, tp, xs, xe, nrm, d, w)
        for k in (0, 1):
            # the residual reads only poses: finite differences on the six pose
            # columns, and an exact invariance check standing in for the rest
            if moves_with_non_pose(f, [xs, xe], k, rng):
                return np.inf
            Jfd = fd_state(f, [xs, xe], k, columns=range(6))
            worst = max(worst, violation(blk.jacobians[k], Jfd))
    return worst


def random_imu(rng, t0, T=0.033, rate=100.0):
    t = np.concatenate(([t0], t0 + np.arange(1, int(T * rate) + 1) / rate, [t0 + T]))
    t = np.unique(np.round(t, 12))
    acc = G_W + rng.normal(size=(len(t), 3)) * 2.0
    gyro = rng.normal(size=(len(t), 3)) * 0.8
    return ImuData(t, acc, gyro)


def imu_config(rng):
    t0 = rng.uniform(0, 100)
    imu = random_imu(rng, t0, rng.uniform(0.02, 0.05))
    xi = random_state(rng, t0)
    pre = preintegrate(imu, xi.accel_bias + rng.normal(size=3) * 0.02,
                       xi.gyro_bias + rng.normal(size=3) * 0.002, NoiseParams())
    xj = propagate_state(xi, imu, G_W)
    xj = xj.retract(rng.normal(size=15) * 0.01)
    return xi, xj, pre


def check_imu(rng, n=1000):
    worst = 0.0
    for _ in range(n):
        xi, xj, pre = imu_config(rng)

        def f(st):
            return imu_residual(st[0], st[1], pre, G_W, jacobians=False).value

        blk = imu_residual(xi, xj, pre, G_W)
        for k in (0, 1):
            worst = max(worst, violation(blk.jacobians[k], fd_state(f, [xi, xj], k)))
    return worst


def check_consistency(rng, n=1000):
    worst = 0.0
    for _ in range(n):
        a = random_state(rng, 1.0)
        xb = a.retract(rng.normal(size=15) * rng.choice([1e-3, 0.1, 0.5]))

        def f(st):
            return consistency_residual(st[0], a).value

        blk = consistency_residual(xb, a)
        worst = max(worst, violation(blk.jacobians[0], fd_state(f, [xb], 0)))
    return worst
