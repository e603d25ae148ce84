"""Synthetic spinning-LiDAR and IMU data with exact ground truth.

Trajectories are analytic (position, yaw and their derivatives), the world
is a set of bounded planes, and every LiDAR return is ray-cast from the
sensor pose at its own firing instant, so motion distortion is reproduced.

Random numbers come from Philox4x64-10 keyed by ``(seed, stream)`` with
Box-Muller Gaussians on top, which any language can reproduce bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Extrinsics, Pose, State, quat_to_rot_batch
from .imu import ImuData, NoiseParams
from .sweep import RawSweep

STREAM_ACCEL = 1
STREAM_GYRO = 2
STREAM_RANGE = 3


class CounterRNG:
    """Counter-based Gaussian stream: Philox raw words, then Box-Muller."""

    def __init__(self, seed: int, stream: int):
        key = np.array([seed & (2**64 - 1), stream], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)

    def uniform(self, n: int) -> np.ndarray:
        raw = self._bits.random_raw(n).astype(np.uint64)
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u1, u2 = self.uniform(2 * m).reshape(2, m)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate((rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)))
        return z[:n]


# ---------------------------------------------------------------------------
# trajectories

def _yaw_quat(yaw):
    yaw = np.asarray(yaw, dtype=float)
    q = np.zeros(yaw.shape + (4,))
    q[..., 0] = np.cos(0.5 * yaw)
    q[..., 3] = np.sin(0.5 * yaw)
    return q


@dataclass
class TrajectorySpec:
    """Planar analytic trajectory with heading along the direction of travel.

    ``kind`` is one of static, constant_velocity, circle, figure_eight.
    ``z_amplitude``/``z_frequency`` add an optional vertical oscillation.
    """

    kind: str = "constant_velocity"
    speed: float = 1.0
    radius: float = 10.0
    duration: float = 30.0
    start: tuple = (0.0, 0.0, 0.0)
    z_amplitude: float = 0.0
    z_frequency: float = 0.5
    hold: float = 0.0
    ramp: float = 0.0

    def __post_init__(self):
        if self.kind not in ("static", "constant_velocity", "circle", "figure_eight"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.duration <= 0 or self.speed < 0 or self.radius <= 0:
            raise ValueError("duration and radius must be positive, speed non-negative")
        if self.hold < 0 or self.ramp < 0:
            raise ValueError("hold and ramp must be non-negative")
        self._check_derivatives()

    def _warp(self, t):
        """Path time ``s(t)`` and its first two derivatives.

        The platform rests for ``hold`` seconds, then the path speed rises
        along a quintic smoothstep over ``ramp`` seconds (continuous
        acceleration), after which ``s = t - hold - ramp / 2``.
        """
        t = np.asarray(t, dtype=float)
        if self.hold == 0 and self.ramp == 0:
            return t, np.ones_like(t), np.zeros_like(t)
        T = max(self.ramp, 1e-300)
        tau = np.clip((t - self.hold) / T, 0.0, 1.0)
        in_ramp = (t > self.hold) & (t < self.hold + self.ramp)
        s = np.where(t <= self.hold, 0.0,
                     np.where(in_ramp, self.ramp * (2.5 * tau**4 - 3 * tau**5 + tau**6),
                              t - self.hold - 0.5 * self.ramp))
        sd = np.where(t <= self.hold, 0.0, np.where(in_ramp, tau**3 * (10 - 15 * tau + 6 * tau**2), 1.0))
        sdd = np.where(in_ramp, 30 * tau**2 * (1 - tau) ** 2 / T, 0.0)
        return s, sd, sdd

    # path-time kinematics, each returns arrays broadcast over s
    def _path(self, s):
        z = np.zeros_like(s)
        v, r = self.speed, self.radius
        if self.kind == "static":
            return (z, z, z, z, z, z)
        if self.kind == "constant_velocity":
            return (v * s, z, v + z, z, z, z)
        w = v / r
        if self.kind == "circle":
            return (r * np.sin(w * s), r * (1 - np.cos(w * s)),
                    v * np.cos(w * s), v * np.sin(w * s),
                    -v * w * np.sin(w * s), v * w * np.cos(w * s))
        # Gerono lemniscate
        return (r * np.sin(w * s), 0.5 * r * np.sin(2 * w * s),
                r * w * np.cos(w * s), r * w * np.cos(2 * w * s),
                -r * w * w * np.sin(w * s), -2 * r * w * w * np.sin(2 * w * s))

    def _xy(self, t):
        s, sd, sdd = self._warp(t)
        x, y, vx, vy, ax, ay = self._path(s)
        return (x, y, vx * sd, vy * sd, ax * sd**2 + vx * sdd, ay * sd**2 + vy * sdd)

    def _z(self, t):
        s, sd, sdd = self._warp(t)
        A, f = self.z_amplitude, 2 * np.pi * self.z_frequency
        dz = A * f * np.cos(f * s)
        return A * np.sin(f * s), dz * sd, -A * f * f * np.sin(f * s) * sd**2 + dz * sdd

    def position(self, t) -> np.ndarray:
        x, y, *_ = self._xy(t)
        z = self._z(t)[0]
        return np.stack((x, y, z), axis=-1) + np.asarray(self.start, dtype=float)

    def velocity(self, t) -> np.ndarray:
        _, _, vx, vy, _, _ = self._xy(t)
        return np.stack((vx, vy, self._z(t)[1]), axis=-1)

    def acceleration(self, t) -> np.ndarray:
        *_, ax, ay = self._xy(t)
        return np.stack((ax, ay, self._z(t)[2]), axis=-1)

    def yaw(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind in ("static", "constant_velocity"):
            return np.zeros_like(t)
        s = self._warp(t)[0]
        if self.kind == "circle":
            return self.speed / self.radius * s
        _, _, vx, vy, _, _ = self._path(s)
        return np.arctan2(vy, vx)

    def yaw_rate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind in ("static", "constant_velocity"):
            return np.zeros_like(t)
        s, sd, _ = self._warp(t)
        if self.kind == "circle":
            return self.speed / self.radius * sd
        _, _, vx, vy, ax, ay = self._path(s)
        return (vx * ay - vy * ax) / (vx * vx + vy * vy) * sd

    def orientation(self, t) -> np.ndarray:
        return _yaw_quat(self.yaw(t))

    def angular_rate(self, t) -> np.ndarray:
        """Body-frame angular velocity (yaw only, so body z = world z)."""
        wz = self.yaw_rate(t)
        z = np.zeros_like(wz)
        return np.stack((z, z, wz), axis=-1)

    def state(self, t: float) -> State:
        return State(self.position(t), self.orientation(t), self.velocity(t), timestamp=float(t))

    def _check_derivatives(self, h: float = 1e-5):
        t = np.concatenate((np.linspace(0.1, max(0.2, self.duration - 0.1), 7),
                            self.hold + self.ramp * np.array([0.3, 0.7])))
        checks = [
            (self.position, self.velocity),
            (self.velocity, self.acceleration),
            (lambda s: np.atleast_1d(self.yaw(s))[..., None], lambda s: np.atleast_1d(self.yaw_rate(s))[..., None]),
        ]
        for i, (f, df) in enumerate(checks):
            diff = [f(s + h) - f(s - h) for s in t]
            if i == 2:
                diff = [np.angle(np.exp(1j * x)) for x in diff]
            num = np.array(diff) / (2 * h)
            ana = np.array([df(s) for s in t])
            if not np.allclose(num, ana, atol=1e-5 * (1 + np.abs(ana).max())):
                raise AssertionError(f"analytic derivative mismatch for {self.kind}")


# ---------------------------------------------------------------------------
# world

@dataclass
class Plane:
    """Rectangle ``center + a u + b v`` with ``|a| <= half_u``, ``|b| <= half_v``."""

    normal: np.ndarray
    center: np.ndarray
    u: np.ndarray
    half_u: float
    half_v: float

    def __post_init__(self):
        self.normal = np.asarray(self.normal, float)
        self.normal = self.normal / np.linalg.norm(self.normal)
        self.center = np.asarray(self.center, float)
        u = np.asarray(self.u, float)
        u = u - (u @ self.normal) * self.normal
        self.u = u / np.linalg.norm(u)

    @property
    def v(self) -> np.ndarray:
        return np.cross(self.normal, self.u)

    @property
    def d(self) -> float:
        return float(-self.normal @ self.center)


def _axis_rect(axis: int, value: float, lo, hi) -> Plane:
    """Axis-aligned rectangle at coordinate ``value`` along ``axis``."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    n = np.zeros(3)
    n[axis] = 1.0
    c = 0.5 * (lo + hi)
    c[axis] = value
    others = [a for a in range(3) if a != axis]
    u = np.zeros(3)
    u[others[0]] = 1.0
    return Plane(n, c, u, 0.5 * (hi - lo)[others[0]], 0.5 * (hi - lo)[others[1]])


def _box_faces(lo, hi, skip=()) -> list:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    faces = []
    for axis in range(3):
        if axis in skip:
            continue
        for val in (lo[axis], hi[axis]):
            faces.append(_axis_rect(axis, val, lo, hi))
    return faces


@dataclass
class WorldModel:
    planes: list = field(default_factory=list)
    name: str = "custom"

    def __post_init__(self):
        for p in self.planes:
            if abs(np.linalg.norm(p.normal) - 1.0) > 1e-12:
                raise ValueError("plane normals must be unit length")

    @classmethod
    def corridor(cls, length: float = 60.0, width: float = 6.0, floor: float = -1.5,
                 ceiling: float = 2.5, x0: float = -10.0, pillar_spacing: float = 6.0,
                 pillar_size: float = 0.5):
        """Long corridor along +x with floor, ceiling, end walls and box pillars.

        Pillars alternate between the two side walls; their faces across the
        corridor axis make translation along it observable.
        """
        y0, y1, x1 = -width / 2, width / 2, x0 + length
        planes = _box_faces([x0, y0, floor], [x1, y1, ceiling])
        s = pillar_size
        for i, x in enumerate(np.arange(x0 + 2.0, x1 - 2.0, pillar_spacing)):
            y = y0 + 0.4 if i % 2 == 0 else y1 - 0.4 - s
            planes += _box_faces([x, y, floor], [x + s, y + s, ceiling], skip=(2,))
        return cls(planes, "corridor")

    @classmethod
    def box_room(cls, size=(30.0, 30.0, 6.0), floor: float = -1.5):
        sx, sy, sz = size
        planes = _box_faces([-sx / 2, -sy / 2, floor], [sx / 2, sy / 2, floor + sz])
        for cx, cy in ((-6.0, -6.0), (6.0, 5.0), (-5.0, 7.0), (7.0, -7.0)):
            planes += _box_faces([cx, cy, floor], [cx + 1.0, cy + 1.5, floor + 2.0], skip=())
        return cls(planes, "box_room")

    def raycast(self, origins, dirs, max_range=np.inf, min_range=0.0):
        """Nearest hit distance per ray (``inf`` on a miss)."""
        best = np.full(len(dirs), np.inf)
        for p in self.planes:
            denom = dirs @ p.normal
            num = -(origins @ p.normal + p.d)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = num / denom
            ok = (np.abs(denom) > 1e-12) & (t > min_range) & (t < best) & (t <= max_range)
            if not ok.any():
                continue
            idx = np.nonzero(ok)[0]
            rel = origins[idx] + t[idx, None] * dirs[idx] - p.center
            inside = (np.abs(rel @ p.u) <= p.half_u) & (np.abs(rel @ p.v) <= p.half_v)
            best[idx[inside]] = t[idx[inside]]
        return best


# ---------------------------------------------------------------------------
# sensors

@dataclass
class SensorSpec:
    rings: int = 32
    azimuth_steps: int = 360
    rev_rate: float = 10.0
    max_range: float = 100.0
    min_range: float = 0.5
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 15.0
    imu_rate: float = 100.0
    noise: NoiseParams = field(default_factory=NoiseParams)
    imu_noise: bool = False
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    range_sigma: float = 0.0
    extrinsics: Extrinsics = field(default_factory=Extrinsics)

    def __post_init__(self):
        if not (self.rev_rate > 0 and self.imu_rate > 0):
            raise ValueError("rev_rate and imu_rate must be positive")
        if self.rings < 1 or self.azimuth_steps < 3:
            raise ValueError("need at least one ring and three azimuth steps")

    def ray_directions(self) -> np.ndarray:
        """Unit rays (azimuth_steps, rings, 3) in the sensor frame."""
        el = np.deg2rad(np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.rings))
        az = 2 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps
        ce, se = np.cos(el)[None, :], np.sin(el)[None, :]
        ca, sa = np.cos(az)[:, None], np.sin(az)[:, None]
        return np.stack((ce * ca, ce * sa, np.broadcast_to(se, (len(az), len(el)))), axis=-1)


def simulate_imu(traj: TrajectorySpec, spec: SensorSpec, gravity_w=(0.0, 0.0, 9.81),
                 seed: int = 0) -> ImuData:
    """IMU samples ``a = R^T (a_w + g) + b_a + n_a``, ``w = w_b + b_w + n_w``."""
    n = int(np.floor(traj.duration * spec.imu_rate + 1e-9)) + 1
    t = np.arange(n) / spec.imu_rate
    R = quat_to_rot_batch(traj.orientation(t))
    f_w = traj.acceleration(t) + np.asarray(gravity_w, float)
    acc = np.einsum("nji,nj->ni", R, f_w) + np.asarray(spec.accel_bias, float)
    gyro = traj.angular_rate(t) + np.asarray(spec.gyro_bias, float)
    if spec.imu_noise:
        acc = acc + spec.noise.sigma_a * CounterRNG(seed, STREAM_ACCEL).normal(3 * n).reshape(n, 3)
        gyro = gyro + spec.noise.sigma_w * CounterRNG(seed, STREAM_GYRO).normal(3 * n).reshape(n, 3)
    return ImuData(t, acc, gyro)


def sensor_pose(traj: TrajectorySpec, spec: SensorSpec, t):
    """World rotation matrices (N, 3, 3) and origins (N, 3) of the LiDAR."""
    t = np.atleast_1d(np.asarray(t, float))
    ex = spec.extrinsics.lidar_to_imu
    Rb = quat_to_rot_batch(traj.orientation(t))
    R = Rb @ ex.R
    o = traj.position(t) + Rb @ ex.translation
    return R, o


def simulate_lidar(traj: TrajectorySpec, world: WorldModel, spec: SensorSpec,
                   seed: int = 0) -> list:
    """Raw sweeps with per-point timestamps, points in the sensor frame at firing time."""
    n_sweeps = int(np.floor(traj.duration * spec.rev_rate + 1e-9))
    dirs = spec.ray_directions()
    A, K = dirs.shape[:2]
    period = 1.0 / spec.rev_rate
    rng = CounterRNG(seed, STREAM_RANGE) if spec.range_sigma > 0 else None
    sweeps = []
    for s in range(n_sweeps):
        t0 = s * period
        tf = t0 + np.arange(A) * period / A
        R, o = sensor_pose(traj, spec, tf)
        dw = np.einsum("aij,akj->aki", R, dirs).reshape(-1, 3)
        ow = np.repeat(o, K, axis=0)
        rng_hit = world.raycast(ow, dw, spec.max_range, spec.min_range)
        hit = np.isfinite(rng_hit)
        if rng is not None:
            rng_hit = rng_hit + spec.range_sigma * rng.normal(len(rng_hit))
        pts = (dirs.reshape(-1, 3) * rng_hit[:, None])[hit]
        times = np.repeat(tf, K)[hit]
        sweeps.append(RawSweep(times, pts, t0, t0 + period))
    return sweeps


def ground_truth(traj: TrajectorySpec, rate: float = 100.0):
    """``(t, positions, quaternions)`` sampled over ``[0, duration]``."""
    n = int(np.floor(traj.duration * rate + 1e-9)) + 1
    t = np.arange(n) / rate
    return t, traj.position(t), traj.orientation(t)


# ---------------------------------------------------------------------------
# scenarios and export

@dataclass
class Scenario:
    name: str
    trajectory: TrajectorySpec
    world_preset: str
    sensor: SensorSpec
    seed: int = 0
    gravity: float = 9.81
    gt_rate: float = 100.0

    @property
    def world(self) -> WorldModel:
        return getattr(WorldModel, self.world_preset)()

    @property
    def gravity_w(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.gravity])

    def imu(self) -> ImuData:
        return simulate_imu(self.trajectory, self.sensor, self.gravity_w, self.seed)

    def sweeps(self) -> list:
        return simulate_lidar(self.trajectory, self.world, self.sensor, self.seed)

    def manifest(self) -> dict:
        s = self.sensor
        return {
            "name": self.name,
            "seed": self.seed,
            "rng": "philox4x64-10 key=(seed, stream); gaussian=box-muller; streams accel=1 gyro=2 range=3",
            "units": {"time": "s", "length": "m", "angle": "rad", "accel": "m/s^2", "gyro": "rad/s"},
            "gravity": self.gravity,
            "gt_rate": self.gt_rate,
            "world": self.world_preset,
            "trajectory": {k: v for k, v in asdict(self.trajectory).items()},
            "sensor": {
                "rings": s.rings, "azimuth_steps": s.azimuth_steps, "rev_rate": s.rev_rate,
                "max_range": s.max_range, "min_range": s.min_range,
                "elevation_min_deg": s.elevation_min_deg, "elevation_max_deg": s.elevation_max_deg,
                "imu_rate": s.imu_rate, "imu_noise": s.imu_noise,
                "noise": asdict(s.noise),
                "accel_bias": list(s.accel_bias), "gyro_bias": list(s.gyro_bias),
                "range_sigma": s.range_sigma,
                "extrinsics": {
                    "rotation_wxyz": s.extrinsics.lidar_to_imu.rotation.tolist(),
                    "translation": s.extrinsics.lidar_to_imu.translation.tolist(),
                },
            },
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "Scenario":
        s = dict(m["sensor"])
        ex = s.pop("extrinsics")
        s["noise"] = NoiseParams(**s["noise"])
        s["accel_bias"] = tuple(s["accel_bias"])
        s["gyro_bias"] = tuple(s["gyro_bias"])
        s["extrinsics"] = Extrinsics(Pose(ex["rotation_wxyz"], ex["translation"]))
        traj = dict(m["trajectory"])
        traj["start"] = tuple(traj["start"])
        return cls(m["name"], TrajectorySpec(**traj), m["world"], SensorSpec(**s),
                   int(m["seed"]), float(m["gravity"]), float(m.get("gt_rate", 100.0)))


# Moving presets rest for one second (static initialization window) and then
# reach cruise speed over one second; cruise distance is speed * (T - 1.5).
START_HOLD = 1.0
START_RAMP = 1.0


def preset(name: str, seed: int = 0, duration: float | None = None, noisy: bool | None = None) -> Scenario:
    """Named scenarios: corridor, corridor_noisy, static, circle, figure_eight."""
    realistic = NoiseParams(sigma_a=0.02, sigma_w=0.002)
    if name in ("corridor", "corridor_noisy"):
        noisy = (name == "corridor_noisy") if noisy is None else noisy
        sensor = SensorSpec(imu_noise=noisy, noise=realistic,
                            accel_bias=(0.02, -0.01, 0.03) if noisy else (0.0, 0.0, 0.0),
                            gyro_bias=(0.001, -0.002, 0.0015) if noisy else (0.0, 0.0, 0.0))
        traj = TrajectorySpec("constant_velocity", speed=1.0, duration=duration or 31.5,
                              hold=START_HOLD, ramp=START_RAMP)
        return Scenario(name, traj, "corridor", sensor, seed)
    if name == "static":
        sensor = SensorSpec(imu_noise=bool(noisy), noise=realistic)
        return Scenario(name, TrajectorySpec("static", duration=duration or 5.0), "box_room", sensor, seed)
    if name in ("circle", "figure_eight"):
        sensor = SensorSpec(imu_noise=bool(noisy), noise=realistic)
        traj = TrajectorySpec(name, speed=1.0, radius=5.0, duration=duration or 21.5,
                              hold=START_HOLD, ramp=START_RAMP)
        return Scenario(name, traj, "box_room", sensor, seed)
    raise ValueError(f"unknown scenario preset {name!r}")


PRESETS = ("corridor", "corridor_noisy", "static", "circle", "figure_eight")


def export_scenario(scenario: Scenario, out_dir) -> dict:
    """Write points.csv, sweeps.csv, imu.csv, gt.tum and scenario.json.

    Returns the manifest, which includes a SHA-256 digest of every data file.
    """
    from . import io as sio

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    sweeps = scenario.sweeps()
    sio.write_points_csv(out / "points.csv", sweeps)
    sio.write_sweeps_csv(out / "sweeps.csv", sweeps)
    sio.write_imu_csv(out / "imu.csv", scenario.imu())
    t, pos, quat = ground_truth(scenario.trajectory, scenario.gt_rate)
    sio.write_tum(out / "gt.tum", t, pos, quat)
    manifest = scenario.manifest()
    manifest["files"] = {
        name: hashlib.sha256((out / name).read_bytes()).hexdigest()
        for name in ("points.csv", "sweeps.csv", "imu.csv", "gt.tum")
    }
    try:
        (out / "scenario.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {out / 'scenario.json'}: {exc}") from exc
    return manifest
