"""Static and motion initialization of gravity, biases and velocities.

Static: average a stationary IMU window.  Motion: track the first 20
reconstructed sweeps with LiDAR-only registration, then fit the gyroscope
bias to the LiDAR rotations and solve a linear system for the per-sweep
velocities and gravity, finally constraining gravity to magnitude ``G``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Extrinsics, State, quat_conj, quat_exp, quat_log, quat_mul
from .imu import ImuData, NoiseParams, Preintegration, preintegrate
from .optimizer import OptWindow, SolverConfig, solve_window, sweep_to_world
from .voxel_map import DEFAULT_MIN_GAP, VoxelMap

log = logging.getLogger(__name__)

BOOTSTRAP_SWEEPS = 20
ACCEL_VAR_MAX = 0.05**2
GYRO_VAR_MAX = 0.01**2

# Registration without IMU has no prior to outvote points associated with
# the wrong surface, so the bootstrap fits planes to more neighbors.
BOOTSTRAP_KNN = 10


class InitError(RuntimeError):
    """Initialization could not produce a trustworthy estimate."""


class StationarityError(InitError):
    """The platform moved during the static initialization window."""


@dataclass
class InitResult:
    gravity_w: np.ndarray
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    velocities: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    initial_states: list = field(default_factory=list)


def static_init(imu: ImuData, G: float = 9.81, window: float = 1.0, t0: float | None = None,
                accel_var_max: float = ACCEL_VAR_MAX, gyro_var_max: float = GYRO_VAR_MAX) -> InitResult:
    """Biases and gravity from a stationary window starting at ``t0``.

    The initial state sits at the identity pose with zero velocity, stamped
    at ``t0``.
    """
    t0 = float(imu.t[0]) if t0 is None else float(t0)
    m = (imu.t >= t0 - 1e-12) & (imu.t <= t0 + window + 1e-12)
    if m.sum() < 2:
        raise InitError(f"static window [{t0}, {t0 + window}] holds fewer than two IMU samples")
    acc, gyro = imu.acc[m], imu.gyro[m]
    av, gv = acc.var(axis=0, ddof=1).max(), gyro.var(axis=0, ddof=1).max()
    if av > accel_var_max or gv > gyro_var_max:
        raise StationarityError(
            f"motion detected during static init: accel var {av:.3g} (max {accel_var_max:.3g}), "
            f"gyro var {gv:.3g} (max {gyro_var_max:.3g})")
    a_mean = acc.mean(axis=0)
    bw = gyro.mean(axis=0)
    g = a_mean / np.linalg.norm(a_mean) * G
    ba = a_mean - g
    x0 = State(accel_bias=ba, gyro_bias=bw, timestamp=t0)
    return InitResult(g, ba, bw, np.zeros((1, 3)), [x0])


# ---------------------------------------------------------------------------
# motion initialization

def _extrapolate(x_prev: State, x_last: State, t_next: float) -> State:
    """Constant-twist extrapolation of the pose to ``t_next``."""
    dt0 = x_last.timestamp - x_prev.timestamp
    s = (t_next - x_last.timestamp) / dt0
    dq = quat_mul(quat_conj(x_prev.rotation), x_last.rotation)
    rel_t = x_prev.R.T @ (x_last.translation - x_prev.translation)
    step_q = quat_exp(s * quat_log(dq))
    return x_last.replace(
        rotation=quat_mul(x_last.rotation, step_q),
        translation=x_last.translation + x_last.R @ (s * rel_t),
        timestamp=float(t_next))


def lidar_only_bootstrap(sweeps, vmap: VoxelMap, cfg: SolverConfig | None = None,
                         extrinsics: Extrinsics | None = None, n_sweeps: int = BOOTSTRAP_SWEEPS,
                         max_mean_residual: float = 0.2, min_gap: float = DEFAULT_MIN_GAP,
                         seed_velocity=None):
    """Track consecutive reconstructed sweeps with pose-only registration.

    The map is seeded with the first sweep at the identity pose (optionally
    undistorted with ``seed_velocity``, a constant world velocity).  Returns
    the solved states at the window boundaries ``T_0 .. T_{n+2}``; entries
    ``0 .. n-1`` are final.
    """
    sweeps = list(sweeps)
    if len(sweeps) < n_sweeps:
        raise InitError(f"motion init needs {n_sweeps} reconstructed sweeps, got {len(sweeps)}")
    cfg = cfg or SolverConfig(knn=BOOTSTRAP_KNN)
    cfg = SolverConfig(**{**cfg.__dict__, "lidar_only": True, "use_imu": False})
    first = sweeps[0]
    T = first.boundaries
    v0 = np.zeros(3) if seed_velocity is None else np.asarray(seed_velocity, float)
    states = [State(translation=v0 * (t - T[0]), timestamp=float(t)) for t in T]
    vmap.insert_sweep(sweep_to_world(first, states, extrinsics), now=first.t_end, min_gap=min_gap)
    track = list(states)
    for j in range(1, n_sweeps):
        sw = sweeps[j]
        Tj = sw.boundaries
        if abs(Tj[0] - track[j].timestamp) > 1e-6:
            raise InitError("bootstrap sweeps are not consecutive reconstructed sweeps")
        guess = [track[j], track[j + 1], track[j + 2], _extrapolate(track[j + 1], track[j + 2], Tj[3])]
        pre = [Preintegration(t_start=Tj[k], t_end=Tj[k + 1], dt_total=Tj[k + 1] - Tj[k]) for k in range(3)]
        win = OptWindow(*guess, anchor=track[j], preints=pre, gravity_w=np.zeros(3))
        solved = solve_window(win, vmap, sw, cfg, extrinsics)
        if solved.report.mean_abs_residual > max_mean_residual:
            raise InitError(f"LiDAR-only registration diverged at t={Tj[3]:.6f} "
                            f"(mean residual {solved.report.mean_abs_residual:.3f} m)")
        track[j + 1:j + 3] = [solved.x_e1, solved.x_e2]
        track.append(solved.x_e3)
        vmap.insert_sweep(sweep_to_world(sw, solved.states, extrinsics), now=sw.t_end, min_gap=min_gap)
    return track


def init_gyro_bias_motion(states, preints, iterations: int = 2, return_preints: bool = False):
    """Gyroscope bias from LiDAR rotations via the linearized rotation residual.

    Each step solves the normal equations ``sum(J^T J) db = sum(J^T r)`` with
    ``J = J^gamma_bw`` and ``r = 2 vec(gamma^-1 q_i^-1 q_j)``, then
    re-propagates the pre-integrations at the new bias.
    """
    preints = list(preints)
    if len(preints) != len(states) - 1:
        raise ValueError("need one pre-integration per consecutive state pair")
    bw = np.array(preints[0].lin_gyro_bias, dtype=float)
    for _ in range(iterations):
        A = np.zeros((3, 3))
        b = np.zeros(3)
        for x_i, x_j, p in zip(states[:-1], states[1:], preints):
            q_rel = quat_mul(quat_conj(x_i.rotation), x_j.rotation)
            e = quat_mul(quat_conj(p.gamma), q_rel)
            r = 2.0 * (e[1:] if e[0] >= 0 else -e[1:])
            J = p.J_gamma_bw
            A += J.T @ J
            b += J.T @ r
        if np.linalg.eigvalsh(A).min() < 1e-12:
            raise InitError("gyro bias normal matrix is singular; use static initialization")
        bw = bw + np.linalg.solve(A, b)
        preints = [p.repropagate(p.lin_accel_bias, bw) if p.samples is not None else p for p in preints]
    return (bw, preints) if return_preints else bw


def gyro_bias_objective(states, preints) -> float:
    total = 0.0
    for x_i, x_j, p in zip(states[:-1], states[1:], preints):
        e = quat_mul(quat_conj(p.gamma), quat_mul(quat_conj(x_i.rotation), x_j.rotation))
        total += float(np.sum((2.0 * e[1:]) ** 2))
    return total


def _tangent_basis(g):
    n = g / np.linalg.norm(g)
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(n, a)
    b1 /= np.linalg.norm(b1)
    return np.column_stack((b1, np.cross(n, b1)))


def _stack(states, preints):
    """Rows ``H x = z`` for x = [v_0 .. v_{n-1}, g] (world frame)."""
    n = len(states)
    H = np.zeros((6 * (n - 1), 3 * n + 3))
    z = np.zeros(6 * (n - 1))
    I3 = np.eye(3)
    for i, (x_i, x_j, p) in enumerate(zip(states[:-1], states[1:], preints)):
        dt = p.dt_total
        R = x_i.R
        r0 = 6 * i
        # R alpha - (p_j - p_i) = -dt v_i + dt^2/2 g
        H[r0:r0 + 3, 3 * i:3 * i + 3] = -dt * I3
        H[r0:r0 + 3, 3 * n:] = 0.5 * dt * dt * I3
        z[r0:r0 + 3] = R @ p.alpha - (x_j.translation - x_i.translation)
        # R beta = v_j - v_i + dt g
        H[r0 + 3:r0 + 6, 3 * i:3 * i + 3] = -I3
        H[r0 + 3:r0 + 6, 3 * i + 3:3 * i + 6] = I3
        H[r0 + 3:r0 + 6, 3 * n:] = dt * I3
        z[r0 + 3:r0 + 6] = R @ p.beta
    return H, z


def init_velocity_gravity(states, preints, G: float = 9.81, refine_iterations: int = 4,
                          accel_bias=None) -> InitResult:
    """Per-state velocities and gravity from LiDAR poses and pre-integrations."""
    n = len(states)
    if len(preints) != n - 1:
        raise ValueError("need one pre-integration per consecutive state pair")
    H, z = _stack(states, preints)
    sol, _, rank, _ = np.linalg.lstsq(H, z, rcond=None)
    if rank < H.shape[1]:
        raise InitError(f"velocity/gravity system is rank deficient ({rank} < {H.shape[1]})")
    g = sol[3 * n:]
    if np.linalg.norm(g) < 1e-9:
        raise InitError("gravity estimate vanished")
    # magnitude-constrained refinement in the 2-DOF tangent space
    g = g / np.linalg.norm(g) * G
    for _ in range(refine_iterations):
        B = _tangent_basis(g)
        Hr = np.hstack((H[:, :3 * n], H[:, 3 * n:] @ B))
        zr = z - H[:, 3 * n:] @ g
        s, *_ = np.linalg.lstsq(Hr, zr, rcond=None)
        g = g + B @ s[3 * n:]
        g = g / np.linalg.norm(g) * G
    Hv = H[:, :3 * n]
    v, *_ = np.linalg.lstsq(Hv, z - H[:, 3 * n:] @ g, rcond=None)
    v = v.reshape(n, 3)
    ba = np.zeros(3) if accel_bias is None else np.asarray(accel_bias, float)
    bw = np.asarray(preints[0].lin_gyro_bias, float)
    out = [x.replace(velocity=v[k], accel_bias=ba, gyro_bias=bw) for k, x in enumerate(states)]
    return InitResult(g, ba, bw, v, out)


def window_preints(states, imu: ImuData, bias_a, bias_w, noise: NoiseParams | None = None):
    return [preintegrate(imu.window(a.timestamp, b.timestamp), bias_a, bias_w, noise)
            for a, b in zip(states[:-1], states[1:])]


def motion_init(sweeps, imu: ImuData, vmap: VoxelMap, cfg: SolverConfig | None = None,
                G: float = 9.81, noise: NoiseParams | None = None,
                extrinsics: Extrinsics | None = None, n_sweeps: int = BOOTSTRAP_SWEEPS,
                min_gap: float = DEFAULT_MIN_GAP, reseed: bool = True):
    """Full motion initialization; returns ``(InitResult, track)``.

    With ``reseed`` the bootstrap runs twice: the first pass yields a
    velocity used to undistort the seed sweep for the second pass, whose
    map replaces ``vmap``'s content.
    """
    def one_pass(seed_velocity, target_map):
        track = lidar_only_bootstrap(sweeps, target_map, cfg, extrinsics, n_sweeps,
                                     min_gap=min_gap, seed_velocity=seed_velocity)
        poses = track[:n_sweeps]
        pre = window_preints(poses, imu, np.zeros(3), np.zeros(3), noise)
        bw, pre = init_gyro_bias_motion(poses, pre, return_preints=True)
        return init_velocity_gravity(poses, pre, G), track

    if not reseed:
        return one_pass(None, vmap)
    res, _ = one_pass(None, VoxelMap(vmap.voxel_size, vmap.max_points, vmap.min_point_spacing))
    return one_pass(res.velocities[0], vmap)
