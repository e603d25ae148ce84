"""Multi-segment LiDAR-inertial window optimization.

A window holds four states ``x_b, x_e1, x_e2, x_e3`` bounding the three
segments of one reconstructed sweep, plus a fixed ``anchor`` (the previous
window's solution at ``x_b``'s timestamp).  The cost combines

* per-point point-to-plane residuals, once with segment-local
  interpolation and once over the whole sweep interval,
* one IMU pre-integration residual per segment,
* a consistency residual tying ``x_b`` to the anchor,

and is minimized by damped Gauss-Newton over the 60 state parameters.

Jacobian columns follow the state error ordering (dt, dtheta, dv, dba, dbw).
IMU residual rows follow the pre-integration error ordering
(alpha, beta, theta, ba, bw) so the propagated covariance applies directly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .geometry import (
    Extrinsics,
    State,
    TimingError,
    interpolate_state,
    left_jacobian_inv,
    quat_conj,
    quat_left,
    quat_mul,
    quat_right,
    quat_to_rot,
    right_jacobian_along,
    right_jacobian_inv,
    skew,
    so3_exp_along,
    so3_log,
)
from .imu import ImuData, NoiseParams, Preintegration, preintegrate, propagate_state
from .sweep import ReconstructedSweep
from .voxel_map import VoxelMap, fit_planes_batch

log = logging.getLogger(__name__)

STATE_DIM = 15
N_STATES = 4
POSE_COLS = np.r_[0:6]
# bias change (m/s^2, rad/s) beyond which a carried pre-integration is redone
REINTEGRATE_BA = 0.1
REINTEGRATE_BW = 0.01
_TIME_TOL = 1e-6


class SolverError(RuntimeError):
    """The damped normal equations could not be solved."""

    def __init__(self, message, window=None):
        super().__init__(message)
        self.window = window


class DegenerateWindowError(RuntimeError):
    """Too few valid point-to-plane residuals to constrain the window."""

    def __init__(self, message, window=None, n_valid=0):
        super().__init__(message)
        self.window = window
        self.n_valid = n_valid


@dataclass
class SolverConfig:
    registrations: int = 5
    iterations: int = 5
    huber_delta: float = 0.3
    p_l: float = 0.001
    tol: float = 1e-4
    # pose change (m or rad) below which a converged round skips re-association
    reassociate_tol: float = 1e-3
    min_points: int = 50
    knn: int = 20
    min_planarity: float = 0.9
    max_leverage: float = 0.95
    max_fit_error: float = 0.01
    max_plane_distance: float = 0.1
    max_points: int | None = 1500
    weight_mode: str = "planarity"  # or "constant"
    use_imu: bool = True
    multi_segment: bool = True
    # pose-only registration of x_b and x_e3 with every point interpolated
    # over the whole sweep; IMU terms are disabled
    lidar_only: bool = False
    max_damping_steps: int = 10
    # consistency weighting: "unit" scales the identity by consistency_weight,
    # "marginal" uses the previous window's marginal information on the anchor
    consistency: str = "unit"
    consistency_weight: float = 1.0

    def __post_init__(self):
        if self.registrations < 1 or self.iterations < 1:
            raise ValueError("registrations and iterations must be >= 1")
        if not (self.huber_delta > 0 and self.p_l > 0 and self.tol >= 0):
            raise ValueError("huber_delta and p_l must be positive, tol non-negative")
        if self.weight_mode not in ("planarity", "constant"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.consistency not in ("unit", "marginal"):
            raise ValueError(f"unknown consistency mode {self.consistency!r}")
        if not self.consistency_weight > 0:
            raise ValueError("consistency_weight must be positive")
        if self.min_points < 1 or self.knn < 3:
            raise ValueError("min_points >= 1 and knn >= 3 required")


@dataclass
class ResidualBlock:
    """One residual term with Jacobians keyed by window state index."""

    kind: str
    value: np.ndarray
    jacobians: dict
    weight: np.ndarray | float = 1.0


@dataclass
class SolveReport:
    registrations: int = 0
    iterations: int = 0
    n_points: int = 0
    costs: list = field(default_factory=list)
    converged: bool = False
    mean_abs_residual: float = 0.0


@dataclass
class OptWindow:
    x_b: State
    x_e1: State
    x_e2: State
    x_e3: State
    anchor: State
    preints: list
    gravity_w: np.ndarray
    report: SolveReport | None = None
    # information of the anchor (15x15) used to weight the consistency
    # residual in "marginal" mode, and the solved window's own marginal
    # information on x_e1, which becomes the next window's anchor weight
    anchor_information: np.ndarray | None = None
    e1_information: np.ndarray | None = None

    def __post_init__(self):
        self.gravity_w = np.asarray(self.gravity_w, dtype=float).reshape(3)
        ts = [x.timestamp for x in self.states]
        if not all(a < b for a, b in zip(ts, ts[1:])):
            raise TimingError(f"window timestamps not strictly increasing: {ts}")
        if abs(self.anchor.timestamp - self.x_b.timestamp) > _TIME_TOL:
            raise TimingError("x_b and the anchor must share a timestamp")
        if len(self.preints) != 3:
            raise ValueError("a window needs exactly three pre-integrations")
        for k, p in enumerate(self.preints):
            if abs(p.t_start - ts[k]) > _TIME_TOL or abs(p.t_end - ts[k + 1]) > _TIME_TOL:
                raise TimingError(f"pre-integration {k} does not span segment {k}")

    @property
    def states(self) -> tuple:
        return (self.x_b, self.x_e1, self.x_e2, self.x_e3)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([x.timestamp for x in self.states])

    def with_states(self, states, report=None) -> "OptWindow":
        x_b, x_e1, x_e2, x_e3 = states
        return replace(self, x_b=x_b, x_e1=x_e1, x_e2=x_e2, x_e3=x_e3,
                       report=report if report is not None else self.report)


# ---------------------------------------------------------------------------
# point-to-plane residuals

def _point_terms(pts, alpha, normals, d, weights, xs: State, xe: State, jac=True):
    """Residuals ``w (n . p_w + d)`` with ``p_w`` from the slerp/lerp pose.

    Returns ``r`` of shape (N,) and, if requested, Jacobians (N, 12) over
    ``[t_s, theta_s, t_e, theta_e]``.  The rotation blocks are exact for the
    interpolated rotation ``R_s Exp(alpha Log(R_s^T R_e))``.
    """
    Rs, Re = xs.R, xe.R
    phi = so3_log(Rs.T @ Re)
    a = alpha[:, None]
    Ea = so3_exp_along(phi, alpha)
    Rp = Rs @ Ea
    tp = (1.0 - a) * xs.translation + a * xe.translation
    pw = np.einsum("nij,nj->ni", Rp, pts) + tp
    r = weights * (np.einsum("ni,ni->n", normals, pw) + d)
    if not jac:
        return r, None
    g = np.einsum("nji,nj->ni", Rp, normals)            # Rp^T n
    c = weights[:, None] * np.cross(pts, g)             # dr/d(delta p)
    Jra = right_jacobian_along(phi, alpha) * a[:, :, None]
    Ms = np.swapaxes(Ea, 1, 2) - Jra @ left_jacobian_inv(phi)
    Me = Jra @ right_jacobian_inv(phi)
    J = np.empty((len(r), 12))
    wn = weights[:, None] * normals
    J[:, 0:3] = (1.0 - a) * wn
    J[:, 3:6] = np.einsum("ni,nij->nj", c, Ms)
    J[:, 6:9] = a * wn
    J[:, 9:12] = np.einsum("ni,nij->nj", c, Me)
    return r, J


def _single_point_block(kind, p, t_p, xs, xe, normal, d, weight, jacobians=True):
    span = xe.timestamp - xs.timestamp
    if not span > 0:
        raise TimingError("empty interpolation interval")
    alpha = (t_p - xs.timestamp) / span
    if alpha < -1e-9 or alpha > 1 + 1e-9:
        raise TimingError(f"point time {t_p} outside [{xs.timestamp}, {xe.timestamp}]")
    r, J = _point_terms(np.asarray(p, float).reshape(1, 3), np.array([alpha]),
                        np.asarray(normal, float).reshape(1, 3), np.array([float(d)]),
                        np.array([float(weight)]), xs, xe, jac=jacobians)
    if not jacobians:
        return ResidualBlock(kind, r, {}, 1.0)
    Js = np.zeros((1, STATE_DIM))
    Je = np.zeros((1, STATE_DIM))
    Js[:, :6] = J[:, :6]
    Je[:, :6] = J[:, 6:]
    return ResidualBlock(kind, r, {0: Js, 1: Je}, 1.0)


def point_to_plane_residual(p, t_p, x_s: State, x_e: State, normal, d, weight=1.0,
                            jacobians: bool = True) -> ResidualBlock:
    """Segment-local point-to-plane residual of a body-frame point.

    Jacobians are keyed 0 (segment start state) and 1 (segment end state);
    ``jacobians=False`` evaluates the value only.
    """
    return _single_point_block("point_to_plane", p, t_p, x_s, x_e, normal, d, weight, jacobians)


def additional_point_to_plane_residual(p, t_p, x_b: State, x_e3: State, normal, d,
                                       weight=1.0, jacobians: bool = True) -> ResidualBlock:
    """Same form as the segment residual, interpolated over the whole sweep."""
    return _single_point_block("point_to_plane_additional", p, t_p, x_b, x_e3, normal, d, weight,
                               jacobians)


# ---------------------------------------------------------------------------
# IMU and consistency residuals

_CONJ = np.diag([1.0, -1.0, -1.0, -1.0])


def imu_residual(x_i: State, x_j: State, preint: Preintegration, gravity_w,
                 jacobians: bool = True) -> ResidualBlock:
    """Pre-integration residual between two states, bias-corrected at ``x_i``.

    Rows are (alpha, beta, theta, ba, bw).  The weight is the information
    matrix of the residual (inverse covariance with the rotation block
    expressed in the residual's frame); ``jacobians=False`` skips both the
    Jacobians and the weight.
    """
    if (abs(preint.t_start - x_i.timestamp) > _TIME_TOL
            or abs(preint.t_end - x_j.timestamp) > _TIME_TOL):
        raise TimingError("pre-integration interval does not match the state timestamps")
    g = np.asarray(gravity_w, dtype=float)
    dt = preint.dt_total
    Ri = x_i.R
    RiT = Ri.T
    dba = x_i.accel_bias - preint.lin_accel_bias
    dbw = x_i.gyro_bias - preint.lin_gyro_bias
    Jg = preint.J_gamma_bw
    alpha_c = preint.alpha + preint.J_alpha_ba @ dba + preint.J_alpha_bw @ dbw
    beta_c = preint.beta + preint.J_beta_ba @ dba + preint.J_beta_bw @ dbw
    u = np.concatenate(([1.0], 0.5 * Jg @ dbw))
    nu = math.sqrt(float(u @ u))
    c = u / nu
    gc = quat_mul(preint.gamma, c)
    A = quat_mul(quat_conj(x_i.rotation), x_j.rotation)
    E = quat_mul(A, quat_conj(gc))
    s = 1.0 if E[0] >= 0 else -1.0

    dp = x_j.translation - x_i.translation - x_i.velocity * dt + 0.5 * g * dt * dt
    dv = x_j.velocity - x_i.velocity + g * dt
    r = np.concatenate((
        RiT @ dp - alpha_c,
        RiT @ dv - beta_c,
        2.0 * s * E[1:],
        x_j.accel_bias - x_i.accel_bias,
        x_j.gyro_bias - x_i.gyro_bias,
    ))
    if not jacobians:
        return ResidualBlock("imu_preint", r, {}, None)

    I3 = np.eye(3)
    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    Ji[0:3, 0:3] = -RiT
    Ji[0:3, 3:6] = skew(RiT @ dp)
    Ji[0:3, 6:9] = -RiT * dt
    Ji[0:3, 9:12] = -preint.J_alpha_ba
    Ji[0:3, 12:15] = -preint.J_alpha_bw
    Ji[3:6, 3:6] = skew(RiT @ dv)
    Ji[3:6, 6:9] = -RiT
    Ji[3:6, 9:12] = -preint.J_beta_ba
    Ji[3:6, 12:15] = -preint.J_beta_bw
    Ji[6:9, 3:6] = -s * quat_right(E)[1:, 1:]
    dc = (np.eye(4) - np.outer(c, c)) / nu @ np.vstack((np.zeros(3), 0.5 * Jg))
    Ji[6:9, 12:15] = 2.0 * s * (quat_left(A) @ quat_right(quat_conj(preint.gamma)) @ _CONJ @ dc)[1:]
    Ji[9:12, 9:12] = -I3
    Ji[12:15, 12:15] = -I3
    Jj[0:3, 0:3] = RiT
    Jj[3:6, 6:9] = RiT
    Jj[6:9, 3:6] = s * (quat_left(A) @ quat_right(quat_conj(gc)))[1:, 1:]
    Jj[9:12, 9:12] = I3
    Jj[12:15, 12:15] = I3

    return ResidualBlock("imu_preint", r, {0: Ji, 1: Jj}, imu_information(preint))


def imu_information(preint: Preintegration) -> np.ndarray:
    T = np.eye(15)
    T[6:9, 6:9] = quat_to_rot(preint.gamma)
    cov = T @ preint.covariance @ T.T
    cov = 0.5 * (cov + cov.T) + 1e-18 * np.eye(15)
    info = np.linalg.inv(cov)
    return 0.5 * (info + info.T)


def consistency_residual(x_b: State, anchor: State) -> ResidualBlock:
    """Difference between ``x_b`` and the previous solution at its timestamp."""
    E = quat_mul(quat_conj(anchor.rotation), x_b.rotation)
    s = 1.0 if E[0] >= 0 else -1.0
    r = np.concatenate((
        x_b.translation - anchor.translation,
        2.0 * s * E[1:],
        x_b.velocity - anchor.velocity,
        x_b.accel_bias - anchor.accel_bias,
        x_b.gyro_bias - anchor.gyro_bias,
    ))
    J = np.eye(15)
    J[3:6, 3:6] = s * quat_left(E)[1:, 1:]
    return ResidualBlock("consistency", r, {0: J}, 1.0)


# ---------------------------------------------------------------------------
# window construction

def build_window(anchor: State, imu: ImuData, boundaries, gravity_w,
                 noise: NoiseParams | None = None) -> OptWindow:
    """Initial window from an anchor and the four boundary timestamps.

    ``x_b`` copies the anchor; later states are IMU-propagated.
    """
    T = [float(t) for t in boundaries]
    if abs(T[0] - anchor.timestamp) > _TIME_TOL:
        raise TimingError("anchor timestamp must equal the first boundary")
    states = [anchor.replace(timestamp=T[0])]
    for k in range(3):
        states.append(propagate_state(states[-1], imu.window(T[k], T[k + 1]), gravity_w))
    preints = _window_preints(states, imu, noise)
    return OptWindow(*states, anchor=anchor, preints=preints, gravity_w=gravity_w)


def _window_preints(states, imu: ImuData, noise):
    return [preintegrate(imu.window(states[k].timestamp, states[k + 1].timestamp),
                         states[k].accel_bias, states[k].gyro_bias, noise)
            for k in range(3)]


def shift_window(prev: OptWindow, imu: ImuData, t_next: float,
                 noise: NoiseParams | None = None) -> OptWindow:
    """Advance a solved window by one segment.

    The new anchor is the solved ``x_e1`` and ``x_b`` starts as a copy of it;
    ``x_e1``/``x_e2`` carry over the solved ``x_e2``/``x_e3``; the new
    ``x_e3`` is predicted from the solved ``x_e3`` through the IMU.
    The two carried-over pre-integrations are kept (the residual corrects
    them to first order in the bias) unless the bias moved past
    ``REINTEGRATE_BA``/``REINTEGRATE_BW``; the new one is integrated at the
    current bias estimate.
    """
    if not t_next > prev.x_e3.timestamp:
        raise TimingError("next boundary must follow the window's last state")
    anchor = prev.x_e1
    x_e3 = propagate_state(prev.x_e3, imu.window(prev.x_e3.timestamp, t_next), prev.gravity_w)
    states = [anchor, prev.x_e2, prev.x_e3, x_e3]
    preints = []
    for k, p in enumerate(prev.preints[1:]):
        x = states[k]
        if (np.max(np.abs(x.accel_bias - p.lin_accel_bias)) > REINTEGRATE_BA
                or np.max(np.abs(x.gyro_bias - p.lin_gyro_bias)) > REINTEGRATE_BW):
            p = preintegrate(imu.window(x.timestamp, states[k + 1].timestamp),
                             x.accel_bias, x.gyro_bias, noise)
        preints.append(p)
    preints.append(preintegrate(imu.window(prev.x_e3.timestamp, t_next),
                                prev.x_e3.accel_bias, prev.x_e3.gyro_bias, noise))
    return OptWindow(*states, anchor=anchor, preints=preints, gravity_w=prev.gravity_w,
                     anchor_information=prev.e1_information)


# ---------------------------------------------------------------------------
# solver

def undistort_points(states, pts, alpha_seg, seg) -> np.ndarray:
    """World coordinates of body-frame points, each interpolated within its segment."""
    out = np.empty_like(pts)
    for k in range(3):
        m = seg == k
        if not m.any():
            continue
        xs, xe = states[k], states[k + 1]
        phi = so3_log(xs.R.T @ xe.R)
        a = alpha_seg[m][:, None]
        Rp = xs.R @ so3_exp_along(phi, alpha_seg[m])
        out[m] = np.einsum("nij,nj->ni", Rp, pts[m]) + (1 - a) * xs.translation + a * xe.translation
    return out


def sweep_to_world(sweep: ReconstructedSweep, states, extrinsics: Extrinsics | None = None) -> np.ndarray:
    """Undistort a reconstructed sweep into the world frame with the window states."""
    pts = sweep.points
    if extrinsics is not None:
        pts = extrinsics.lidar_to_imu.apply(pts)
    T = np.array([x.timestamp for x in states])
    seg = sweep.segment_ids
    alpha = (sweep.times - T[seg]) / (T[seg + 1] - T[seg])
    return undistort_points(states, pts, alpha, seg)


def huber(r, delta):
    """Huber loss on residuals (``r^2`` inside the threshold) and IRLS weights."""
    a = np.abs(r)
    inside = a <= delta
    loss = np.where(inside, r * r, 2.0 * delta * a - delta * delta)
    w = np.where(inside, 1.0, delta / np.maximum(a, 1e-300))
    return loss, w


class _Problem:
    """Residual assembly for one window with fixed plane associations."""

    def __init__(self, window: OptWindow, times, pts, seg, cfg: SolverConfig):
        self.window = window
        self.cfg = cfg
        self.times = times
        self.pts = pts
        self.seg = seg
        T = window.timestamps
        self.T = T
        self.alpha_seg = (times - T[seg]) / (T[seg + 1] - T[seg])
        self.alpha_full = (times - T[0]) / (T[3] - T[0])
        self.normals = None
        self.d = None
        self.weights = None
        self.valid = None
        if cfg.lidar_only:
            # begin/end poses only; the middle states follow by interpolation
            self.active = np.concatenate((POSE_COLS, 3 * STATE_DIM + POSE_COLS))
        elif not cfg.use_imu:
            # without IMU terms only x_b's velocity and biases see any residual
            self.active = np.concatenate([np.arange(STATE_DIM)]
                                         + [STATE_DIM * k + POSE_COLS for k in (1, 2, 3)])
        else:
            self.active = np.arange(STATE_DIM * N_STATES)
        self.imu_blocks = []
        if cfg.use_imu and not cfg.lidar_only:
            first = 0 if cfg.multi_segment else 1
            self.imu_blocks = list(range(first, 3))

    def consistency_info(self):
        W = self.window.anchor_information
        if self.cfg.consistency != "marginal" or W is None:
            W = self.cfg.consistency_weight * np.eye(STATE_DIM)
        return W[:6, :6] if self.cfg.lidar_only else W

    def world_points(self, states):
        if self.cfg.lidar_only:
            return undistort_points((states[0], states[3]), self.pts, self.alpha_full,
                                    np.zeros(len(self.pts), dtype=int))
        return undistort_points(states, self.pts, self.alpha_seg, self.seg)

    def associate(self, states, vmap: VoxelMap):
        cfg = self.cfg
        pw = self.world_points(states)
        nbrs, _, valid = vmap.nearest_neighbors_batch(pw, cfg.knn)
        n, d, planarity, ok = fit_planes_batch(nbrs, valid, min_points=min(5, cfg.knn),
                                               min_planarity=cfg.min_planarity,
                                               max_leverage=cfg.max_leverage,
                                               max_fit_error=cfg.max_fit_error)
        dist = np.einsum("ni,ni->n", n, pw) + d
        ok &= np.abs(dist) <= cfg.max_plane_distance
        self.valid = ok
        self.normals = n[ok]
        self.d = d[ok]
        if cfg.weight_mode == "planarity":
            self.weights = np.clip(planarity[ok], 0.0, 1.0)
        else:
            self.weights = np.ones(int(ok.sum()))
        return int(ok.sum())

    def _point_groups(self):
        v = self.valid
        seg = self.seg[v]
        pts = self.pts[v]
        for k in range(0 if self.cfg.lidar_only else 3):
            m = seg == k
            if m.any():
                yield k, k + 1, pts[m], self.alpha_seg[v][m], self.normals[m], self.d[m], self.weights[m]
        yield 0, 3, pts, self.alpha_full[v], self.normals, self.d, self.weights

    def point_residuals(self, states):
        return np.concatenate([
            _point_terms(p, a, n, d, w, states[i], states[j], jac=False)[0]
            for i, j, p, a, n, d, w in self._point_groups()])

    def cost(self, states, include_consistency=True):
        cfg = self.cfg
        total = 0.0
        for i, j, p, a, n, d, w in self._point_groups():
            r, _ = _point_terms(p, a, n, d, w, states[i], states[j], jac=False)
            # the kernel acts on the whitened residual r / sqrt(P_L)
            total += huber(r / np.sqrt(cfg.p_l), cfg.huber_delta)[0].sum()
        for k in self.imu_blocks:
            blk = imu_residual(states[k], states[k + 1], self.window.preints[k], self.window.gravity_w)
            total += blk.value @ blk.weight @ blk.value
        if include_consistency:
            rc = consistency_residual(states[0], self.window.anchor).value
            if self.cfg.lidar_only:
                rc = rc[:6]
            total += rc @ self.consistency_info() @ rc
        return float(total)

    def linearize(self, states, include_consistency=True):
        cfg = self.cfg
        n = STATE_DIM * N_STATES
        H = np.zeros((n, n))
        b = np.zeros(n)
        for i, j, p, a, nrm, d, w in self._point_groups():
            r, J = _point_terms(p, a, nrm, d, w, states[i], states[j])
            _, hw = huber(r / np.sqrt(cfg.p_l), cfg.huber_delta)
            W = hw / cfg.p_l
            idx = np.r_[STATE_DIM * i:STATE_DIM * i + 6, STATE_DIM * j:STATE_DIM * j + 6]
            H[np.ix_(idx, idx)] += (J * W[:, None]).T @ J
            b[idx] += J.T @ (W * r)
        for k in self.imu_blocks:
            blk = imu_residual(states[k], states[k + 1], self.window.preints[k], self.window.gravity_w)
            J = np.hstack((blk.jacobians[0], blk.jacobians[1]))
            idx = np.r_[STATE_DIM * k:STATE_DIM * (k + 2)]
            JW = J.T @ blk.weight
            H[np.ix_(idx, idx)] += JW @ J
            b[idx] += JW @ blk.value
        if include_consistency:
            blk = consistency_residual(states[0], self.window.anchor)
            J, r = blk.jacobians[0], blk.value
            if cfg.lidar_only:
                J, r = J[:6], r[:6]
            JW = J.T @ self.consistency_info()
            H[:STATE_DIM, :STATE_DIM] += JW @ J
            b[:STATE_DIM] += JW @ r
        return H, b


def _body_points(sweep: ReconstructedSweep, extrinsics: Extrinsics | None, max_points):
    times, pts, seg = sweep.times, sweep.points, sweep.segment_ids
    if max_points is not None and len(times) > max_points:
        keep = np.unique(np.linspace(0, len(times) - 1, max_points).round().astype(int))
        times, pts, seg = times[keep], pts[keep], seg[keep]
    if extrinsics is not None:
        pts = extrinsics.lidar_to_imu.apply(pts)
    return times, pts, seg


def _retract(states, delta):
    return [x.retract(delta[STATE_DIM * k:STATE_DIM * (k + 1)]) for k, x in enumerate(states)]


def _max_pose_change(a, b) -> float:
    return max(max(float(np.linalg.norm(x.translation - y.translation)),
                   float(np.linalg.norm(so3_log(x.R.T @ y.R)))) for x, y in zip(a, b))


def _check_sweep_matches(window: OptWindow, sweep: ReconstructedSweep):
    if np.max(np.abs(np.asarray(sweep.boundaries) - window.timestamps)) > _TIME_TOL:
        raise TimingError("reconstructed sweep boundaries do not match the window states")


def information_matrix(window: OptWindow, vmap: VoxelMap, sweep: ReconstructedSweep,
                       cfg: SolverConfig | None = None, extrinsics: Extrinsics | None = None,
                       include_consistency: bool = False) -> np.ndarray:
    """Gauss-Newton information matrix (60x60) at the window's current states."""
    cfg = cfg or SolverConfig()
    _check_sweep_matches(window, sweep)
    times, pts, seg = _body_points(sweep, extrinsics, cfg.max_points)
    prob = _Problem(window, times, pts, seg, cfg)
    prob.associate(window.states, vmap)
    H, _ = prob.linearize(window.states, include_consistency=include_consistency)
    return H


def solve_window(window: OptWindow, vmap: VoxelMap, sweep: ReconstructedSweep,
                 cfg: SolverConfig | None = None, extrinsics: Extrinsics | None = None) -> OptWindow:
    """Optimize the four window states against the map and the IMU.

    Runs ``cfg.registrations`` rounds of (re-association, up to
    ``cfg.iterations`` damped Gauss-Newton steps).  The returned window
    carries a :class:`SolveReport`.
    """
    cfg = cfg or SolverConfig()
    _check_sweep_matches(window, sweep)
    times, pts, seg = _body_points(sweep, extrinsics, cfg.max_points)
    prob = _Problem(window, times, pts, seg, cfg)
    states = list(window.states)
    act = prob.active
    report = SolveReport()
    lam = 1e-4

    for reg in range(cfg.registrations):
        at_association = states
        n_valid = prob.associate(states, vmap)
        report.registrations = reg + 1
        report.n_points = n_valid
        if n_valid < cfg.min_points:
            raise DegenerateWindowError(
                f"only {n_valid} valid point residuals (< {cfg.min_points}) at t={window.x_e3.timestamp:.6f}",
                window=window.with_states(states), n_valid=n_valid)
        cost = prob.cost(states)
        report.costs.append(cost)
        small_step = False
        for _ in range(cfg.iterations):
            H, b = prob.linearize(states)
            Ha, ba = H[np.ix_(act, act)], b[act]
            diag = np.maximum(np.diag(Ha), 1e-12)
            accepted = False
            solved = False
            for _ in range(cfg.max_damping_steps):
                try:
                    step = scipy.linalg.solve(Ha + lam * np.diag(diag), -ba, assume_a="pos")
                except (np.linalg.LinAlgError, ValueError):
                    step = None
                if step is None or not np.all(np.isfinite(step)):
                    lam *= 10.0
                    continue
                solved = True
                delta = np.zeros(STATE_DIM * N_STATES)
                delta[act] = step
                trial = _retract(states, delta)
                new_cost = prob.cost(trial)
                if new_cost <= cost:
                    states, cost = trial, new_cost
                    lam = max(lam / 10.0, 1e-12)
                    accepted = True
                    break
                lam *= 10.0
            if not solved:
                raise SolverError(f"normal equations unsolvable after damping (lambda={lam:.1e})",
                                  window=window.with_states(states))
            if not accepted:
                break
            report.iterations += 1
            report.costs.append(cost)
            pose_step = np.concatenate([delta[STATE_DIM * k:STATE_DIM * k + 6] for k in range(N_STATES)])
            if np.linalg.norm(pose_step) < cfg.tol:
                small_step = True
                break
        # re-associating after a negligible pose change would find the same planes
        if small_step and (reg > 0 or _max_pose_change(at_association, states) < cfg.reassociate_tol):
            report.converged = True
            break
    if cfg.lidar_only:
        states[1] = interpolate_state(states[0], states[3], states[1].timestamp)
        states[2] = interpolate_state(states[0], states[3], states[2].timestamp)
    r = prob.point_residuals(states)
    report.mean_abs_residual = float(np.mean(np.abs(r))) if len(r) else 0.0
    out = window.with_states(states, report=report)
    if not cfg.lidar_only:
        # the prior is left out so information does not compound across windows
        H_own, _ = prob.linearize(states, include_consistency=False)
        out.e1_information = marginal_information(H_own, 1)
    return out


def marginal_information(H: np.ndarray, k: int) -> np.ndarray:
    """Schur complement of the window information onto state ``k``."""
    keep = np.arange(STATE_DIM * k, STATE_DIM * (k + 1))
    rest = np.setdiff1d(np.arange(H.shape[0]), keep)
    Hoo = H[np.ix_(rest, rest)]
    Hok = H[np.ix_(rest, keep)]
    try:
        X = scipy.linalg.solve(Hoo, Hok, assume_a="pos")
    except (np.linalg.LinAlgError, ValueError):
        X = np.linalg.pinv(Hoo) @ Hok
    M = H[np.ix_(keep, keep)] - Hok.T @ X
    M = 0.5 * (M + M.T)
    # clip tiny negative eigenvalues from round-off
    w, V = np.linalg.eigh(M)
    return (V * np.maximum(w, 0.0)) @ V.T
