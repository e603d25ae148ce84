import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import fine_preintegration
from sweeplio import io as sio
from sweeplio.geometry import Extrinsics, Pose, quat_exp, quat_to_rot
from sweeplio.simulator import (
    PRESETS, CounterRNG, Scenario, SensorSpec, TrajectorySpec, WorldModel, export_scenario,
    ground_truth, preset, sensor_pose, simulate_imu, simulate_lidar,
)

G_W = np.array([0.0, 0.0, 9.81])


def plane_distance(world: WorldModel, pts):
    """Distance of each world point to the nearest (bounded) plane."""
    best = np.full(len(pts), np.inf)
    for p in world.planes:
        rel = pts - p.center
        on = (np.abs(rel @ p.u) <= p.half_u + 1e-9) & (np.abs(rel @ p.v) <= p.half_v + 1e-9)
        d = np.where(on, np.abs(pts @ p.normal + p.d), np.inf)
        best = np.minimum(best, d)
    return best


def world_points(traj, spec, sweep):
    R, o = sensor_pose(traj, spec, sweep.times)
    return np.einsum("nij,nj->ni", R, sweep.points) + o


# ---------------------------------------------------------------------------
# trajectories and IMU

@pytest.mark.parametrize("kind", ["static", "constant_velocity", "circle", "figure_eight"])
def test_trajectory_derivatives_are_consistent(kind):
    traj = TrajectorySpec(kind, speed=1.2, radius=4.0, duration=6.0, z_amplitude=0.2, hold=1.0, ramp=1.0)
    h = 1e-5
    for t in np.linspace(0.2, 5.8, 15):
        v_fd = (traj.position(t + h) - traj.position(t - h)) / (2 * h)
        a_fd = (traj.velocity(t + h) - traj.velocity(t - h)) / (2 * h)
        assert traj.velocity(t) == pytest.approx(v_fd, abs=1e-6)
        assert traj.acceleration(t) == pytest.approx(a_fd, abs=1e-5)


def test_invalid_trajectory_rejected():
    with pytest.raises(ValueError):
        TrajectorySpec("spiral")
    with pytest.raises(ValueError):
        TrajectorySpec(duration=0.0)


def test_static_imu_reads_gravity_only():
    imu = simulate_imu(TrajectorySpec("static", duration=1.0), SensorSpec(), G_W)
    assert np.all(imu.gyro == 0.0)
    assert imu.acc == pytest.approx(np.tile(G_W, (len(imu.t), 1)), abs=1e-12)


def test_circle_centripetal_acceleration():
    traj = TrajectorySpec("circle", speed=1.0, radius=10.0, duration=5.0)
    imu = simulate_imu(traj, SensorSpec(), G_W)
    R = np.array([quat_to_rot(q) for q in traj.orientation(imu.t)])
    dyn = imu.acc - np.einsum("nji,j->ni", R, G_W)
    assert np.linalg.norm(dyn, axis=1) == pytest.approx(0.1, abs=1e-12)
    assert imu.gyro[:, 2] == pytest.approx(0.1, abs=1e-12)


def test_biases_are_added():
    traj = TrajectorySpec("static", duration=1.0)
    imu = simulate_imu(traj, SensorSpec(accel_bias=(0.1, 0, 0), gyro_bias=(0, 0.01, 0)), G_W)
    assert imu.acc[:, 0] == pytest.approx(0.1)
    assert imu.gyro[:, 1] == pytest.approx(0.01)


def test_noisy_imu_is_deterministic_per_seed():
    sc = preset("corridor_noisy", duration=2.0)
    a, b = sc.imu(), sc.imu()
    assert np.array_equal(a.acc, b.acc) and np.array_equal(a.gyro, b.gyro)
    c = preset("corridor_noisy", duration=2.0, seed=1).imu()
    assert not np.array_equal(a.acc, c.acc)


def test_counter_rng_statistics_and_addressability():
    z = CounterRNG(5, 1).normal(200_000)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1.0) < 0.01
    assert np.array_equal(CounterRNG(5, 1).normal(10), CounterRNG(5, 1).normal(10))
    assert not np.array_equal(CounterRNG(5, 1).normal(10), CounterRNG(5, 2).normal(10))


@pytest.mark.parametrize("kind", ["constant_velocity", "circle", "figure_eight"])
def test_noiseless_imu_integrates_to_the_trajectory(kind):
    traj = TrajectorySpec(kind, speed=1.0, radius=5.0, duration=3.0)
    imu = simulate_imu(traj, SensorSpec(), G_W)
    t0, t1 = 1.0, 2.0
    m = (imu.t >= t0 - 1e-12) & (imu.t <= t1 + 1e-12)
    alpha, beta, _ = fine_preintegration(imu.t[m], imu.acc[m], imu.gyro[m], np.zeros(3), np.zeros(3))
    x0 = traj.state(t0)
    T = t1 - t0
    p1 = x0.translation + x0.velocity * T + x0.R @ alpha - 0.5 * G_W * T * T
    v1 = x0.velocity + x0.R @ beta - G_W * T
    assert np.linalg.norm(p1 - traj.position(t1)) < 1e-5
    assert np.linalg.norm(v1 - traj.velocity(t1)) < 1e-4


# ---------------------------------------------------------------------------
# LiDAR

def test_ray_count_per_sweep_in_closed_room():
    spec = SensorSpec()
    sweeps = simulate_lidar(TrajectorySpec("static", duration=0.2), WorldModel.box_room(), spec)
    assert len(sweeps) == 2
    assert all(len(s.times) == 360 * 32 for s in sweeps)
    assert sweeps[0].t_begin == 0.0 and sweeps[0].t_end == pytest.approx(0.1)


def test_static_points_lie_on_planes():
    traj = TrajectorySpec("static", duration=0.1, start=(1.0, -2.0, 0.3))
    spec = SensorSpec(extrinsics=Extrinsics(Pose(quat_exp([0.02, -0.01, 0.3]), [0.1, 0.0, 0.2])))
    world = WorldModel.box_room()
    sw = simulate_lidar(traj, world, spec)[0]
    assert plane_distance(world, world_points(traj, spec, sw)).max() < 1e-9


def test_motion_distortion_is_present():
    traj = TrajectorySpec("circle", speed=2.0, radius=4.0, duration=0.3)
    spec = SensorSpec()
    world = WorldModel.box_room()
    sw = simulate_lidar(traj, world, spec)[1]
    assert plane_distance(world, world_points(traj, spec, sw)).max() < 1e-9
    # one pose for the whole sweep leaves points off the walls
    R, o = sensor_pose(traj, spec, sw.t_begin)
    fixed = sw.points @ R[0].T + o[0]
    assert plane_distance(world, fixed).max() > 0.05


@settings(max_examples=10, deadline=None)
@given(st.floats(-12, 12), st.floats(-12, 12), st.floats(-1.0, 3.0))
def test_raycast_hits_satisfy_plane_equations(x, y, z):
    world = WorldModel.box_room()
    rng = np.random.default_rng(int(abs(x * 1000 + y)))
    dirs = rng.normal(size=(200, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    o = np.tile([x, y, z], (200, 1))
    r = world.raycast(o, dirs)
    hit = np.isfinite(r)
    pts = o[hit] + r[hit, None] * dirs[hit]
    assert plane_distance(world, pts).max() < 1e-9


def test_range_noise_is_seeded():
    traj = TrajectorySpec("static", duration=0.1)
    spec = SensorSpec(range_sigma=0.01)
    a = simulate_lidar(traj, WorldModel.box_room(), spec, seed=3)[0]
    b = simulate_lidar(traj, WorldModel.box_room(), spec, seed=3)[0]
    assert np.array_equal(a.points, b.points)


# ---------------------------------------------------------------------------
# scenarios and export

def test_presets_exist():
    for name in PRESETS:
        assert preset(name).name == name
    with pytest.raises(ValueError):
        preset("mars")


def test_ground_truth_covers_duration():
    traj = TrajectorySpec("circle", duration=2.0)
    t, p, q = ground_truth(traj, rate=50.0)
    assert t[0] == 0.0 and t[-1] == pytest.approx(2.0)
    assert np.diff(t) == pytest.approx(0.02)
    assert p.shape == (101, 3) and q.shape == (101, 4)


def test_manifest_round_trip():
    sc = preset("figure_eight", seed=4, duration=3.0)
    m = json.loads(json.dumps(sc.manifest()))
    back = Scenario.from_manifest(m)
    assert back.manifest() == sc.manifest()
    assert np.array_equal(back.imu().acc, sc.imu().acc)


def test_export_round_trip_and_hash_stability(tmp_path):
    sc = preset("corridor_noisy", seed=2, duration=1.0)
    m1 = export_scenario(sc, tmp_path / "a")
    m2 = export_scenario(sc, tmp_path / "b")
    assert m1["files"] == m2["files"]
    assert (tmp_path / "a" / "scenario.json").read_bytes() == (tmp_path / "b" / "scenario.json").read_bytes()

    imu = sio.read_imu_csv(tmp_path / "a" / "imu.csv")
    ref = sc.imu()
    assert np.array_equal(imu.t, ref.t) and np.array_equal(imu.acc, ref.acc)
    sweeps = sio.read_sweeps(tmp_path / "a" / "points.csv", tmp_path / "a" / "sweeps.csv")
    for s, r in zip(sweeps, sc.sweeps()):
        assert np.array_equal(s.times, r.times) and np.array_equal(s.points, r.points)
        assert (s.t_begin, s.t_end) == (r.t_begin, r.t_end)
    t, p, q = sio.read_tum(tmp_path / "a" / "gt.tum")
    assert t[0] == 0.0 and t[-1] == pytest.approx(1.0)
    assert p == pytest.approx(sc.trajectory.position(t), abs=1e-6)


def test_export_reports_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        export_scenario(preset("static", duration=0.2), blocker / "sub")
