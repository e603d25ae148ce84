"""End-to-end odometry: ingest, reconstruct, initialize, optimize, map.

The loop runs once per reconstructed sweep.  Each window is predicted from
the previous solution through the IMU, solved against the voxel map, and
its points are inserted into the map at most once per ``map_min_gap``
seconds.  A state is written to the trajectory once no later window can
touch it again.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io as sio
from .geometry import Extrinsics, Pose, State, TimingError
from .imu import ImuCoverageError, ImuData, NoiseParams, propagate_state
from .init import InitError, motion_init, static_init
from .optimizer import (
    DegenerateWindowError,
    OptWindow,
    SolverConfig,
    SolverError,
    build_window,
    shift_window,
    solve_window,
    sweep_to_world,
)
from .sweep import DroppedDataError, PacketReconstructor, ReconstructedSweep
from .voxel_map import VoxelMap

log = logging.getLogger(__name__)

MATCH_TOLERANCE = 0.01


class ConfigError(ValueError):
    """Malformed, unknown or out-of-range configuration entry."""


class PipelineError(RuntimeError):
    """Runtime failure; carries the sensor time at which it happened."""

    def __init__(self, message, timestamp=None, cause: str = "runtime"):
        super().__init__(message)
        self.timestamp = timestamp
        self.cause = cause


class AlignmentError(ValueError):
    """Too few matched poses to align two trajectories."""


# ---------------------------------------------------------------------------
# configuration

def _key(default, doc, source, kind=None, lo=None, hi=None, choices=None):
    return field(default=default, metadata=dict(doc=doc, source=source, kind=kind or type(default),
                                                lo=lo, hi=hi, choices=choices))


PUBLISHED = "published value"
CHOSEN = "implementation choice"


@dataclass
class PipelineConfig:
    """Every key of the flat ``key = value`` configuration format.

    Relative input paths resolve against the config file's directory.
    """

    points_file: str = _key("points.csv", "LiDAR points, CSV t,x,y,z (sensor frame)", CHOSEN, str)
    sweeps_file: str = _key("sweeps.csv", "raw sweep intervals, CSV sweep_id,t_begin,t_end", CHOSEN, str)
    imu_file: str = _key("imu.csv", "IMU samples, CSV t,ax,ay,az,gx,gy,gz", CHOSEN, str)
    extrinsic_rotation: tuple = _key((1.0, 0.0, 0.0, 0.0), "LiDAR-to-IMU rotation quaternion w x y z",
                                     "calibration input", tuple)
    extrinsic_translation: tuple = _key((0.0, 0.0, 0.0), "LiDAR-to-IMU translation x y z (m)",
                                        "calibration input", tuple)
    downsample_voxel: float = _key(0.5, "sweep down-sampling voxel edge (m)", PUBLISHED, float, 1e-3, 100.0)
    gap_tolerance: float = _key(0.005, "largest tolerated gap between consecutive raw sweeps (s)",
                                CHOSEN, float, 0.0, 1.0)
    map_voxel: float = _key(1.0, "map voxel edge (m)", PUBLISHED, float, 1e-2, 100.0)
    map_max_points: int = _key(20, "points stored per map voxel", PUBLISHED, int, 1, 10000)
    map_min_gap: float = _key(0.1, "minimum time between map insertions (s)", PUBLISHED, float, 0.0, 10.0)
    map_min_spacing: float = _key(0.1, "new map points closer than this to a stored one are skipped (m)",
                                  CHOSEN, float, 0.0, 10.0)
    prune_radius: float = _key(150.0, "map cells farther than this from the body are dropped (m)",
                               CHOSEN, float, 1.0, 1e6)
    init_mode: str = _key("static", "initialization: static or motion", PUBLISHED, str,
                          choices=("static", "motion"))
    init_window: float = _key(1.0, "static initialization window (s)", CHOSEN, float, 0.05, 100.0)
    bootstrap_sweeps: int = _key(20, "reconstructed sweeps tracked LiDAR-only by motion init", PUBLISHED,
                                 int, 4, 1000)
    gravity: float = _key(9.81, "gravity magnitude G (m/s^2)", CHOSEN, float, 9.0, 10.5)
    sigma_a: float = _key(0.02, "accelerometer white noise (m/s^2)", CHOSEN, float, 1e-9, 10.0)
    sigma_w: float = _key(0.002, "gyroscope white noise (rad/s)", CHOSEN, float, 1e-9, 10.0)
    sigma_ba: float = _key(1e-3, "accelerometer bias random walk", CHOSEN, float, 1e-12, 10.0)
    sigma_bw: float = _key(1e-4, "gyroscope bias random walk", CHOSEN, float, 1e-12, 10.0)
    registrations: int = _key(5, "re-association rounds per window", PUBLISHED, int, 1, 100)
    iterations: int = _key(5, "damped Gauss-Newton steps per round", PUBLISHED, int, 1, 100)
    huber_delta: float = _key(0.3, "Huber threshold on point residuals (m)", CHOSEN, float, 1e-6, 100.0)
    p_l: float = _key(0.001, "point measurement variance scale P_L", PUBLISHED, float, 1e-12, 1e3)
    solver_tol: float = _key(1e-4, "pose step norm that ends a round early", CHOSEN, float, 0.0, 1.0)
    min_points: int = _key(50, "fewest valid point residuals per window", CHOSEN, int, 1, 10**7)
    knn: int = _key(20, "map neighbors per plane fit", PUBLISHED, int, 3, 100)
    min_planarity: float = _key(0.9, "smallest accepted plane planarity", CHOSEN, float, 0.0, 1.0)
    max_plane_distance: float = _key(0.1, "largest accepted point-to-plane distance (m)", CHOSEN,
                                     float, 1e-6, 100.0)
    consistency: str = _key("marginal", "consistency residual weighting: unit or marginal", CHOSEN, str,
                            choices=("unit", "marginal"))
    consistency_weight: float = _key(1.0, "scalar consistency information in unit mode", PUBLISHED, float,
                                     1e-12, 1e12)
    max_points: int = _key(1500, "points used per window (evenly subsampled)", CHOSEN, int, 10, 10**7)
    multi_segment: bool = _key(True, "segment-local point residuals and per-segment IMU blocks", PUBLISHED,
                               bool)
    use_imu: bool = _key(True, "include IMU pre-integration residuals", PUBLISHED, bool)
    export_map: bool = _key(False, "write the final map as map.csv", CHOSEN, bool)
    base_dir: str = field(default=".", repr=False, metadata=dict(internal=True))

    def __post_init__(self):
        for f in fields(self):
            m = f.metadata
            if m.get("internal"):
                continue
            v = getattr(self, f.name)
            if m["lo"] is not None and not (m["lo"] <= v <= m["hi"]):
                raise ConfigError(f"{f.name} = {v} outside [{m['lo']}, {m['hi']}]")
            if m["choices"] and v not in m["choices"]:
                raise ConfigError(f"{f.name} must be one of {', '.join(m['choices'])}")
        if len(self.extrinsic_rotation) != 4 or len(self.extrinsic_translation) != 3:
            raise ConfigError("extrinsic_rotation needs 4 numbers and extrinsic_translation 3")
        if np.linalg.norm(self.extrinsic_rotation) < 1e-9:
            raise ConfigError("extrinsic_rotation must be a nonzero quaternion")

    # -- derived objects ---------------------------------------------------
    @property
    def extrinsics(self) -> Extrinsics:
        return Extrinsics(Pose(np.asarray(self.extrinsic_rotation, float),
                               np.asarray(self.extrinsic_translation, float)))

    @property
    def noise(self) -> NoiseParams:
        return NoiseParams(self.sigma_a, self.sigma_w, self.sigma_ba, self.sigma_bw, self.gravity)

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(registrations=self.registrations, iterations=self.iterations,
                            huber_delta=self.huber_delta, p_l=self.p_l, tol=self.solver_tol,
                            min_points=self.min_points, knn=self.knn, min_planarity=self.min_planarity,
                            max_plane_distance=self.max_plane_distance, max_points=self.max_points,
                            multi_segment=self.multi_segment, use_imu=self.use_imu,
                            consistency=self.consistency, consistency_weight=self.consistency_weight)

    def path(self, name: str) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.base_dir) / p

    def check_files(self) -> None:
        for name in ("points_file", "sweeps_file", "imu_file"):
            p = self.path(name)
            if not p.is_file():
                raise sio.InputFileError(f"{name}: file not found: {p}")

    # -- text format -------------------------------------------------------
    @classmethod
    def keys(cls) -> list:
        return [f for f in fields(cls) if not f.metadata.get("internal")]

    @classmethod
    def parse(cls, text: str, base_dir=".") -> "PipelineConfig":
        known = {f.name: f for f in cls.keys()}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _convert(key, val, known[key].metadata["kind"])
        return cls(**values, base_dir=str(base_dir))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise sio.InputFileError(f"config file not found: {path}")
        return cls.parse(path.read_text(), base_dir=path.parent)

    def dumps(self) -> str:
        lines = []
        for f in self.keys():
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = " ".join(repr(float(x)) for x in v)
            else:
                s = str(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"


def _convert(key, val, kind):
    try:
        if kind is bool:
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(float(x) for x in val.replace(",", " ").split())
        return kind(val)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {kind.__name__}") from None


def config_help() -> str:
    rows = []
    for f in PipelineConfig.keys():
        m = f.metadata
        default = f.default
        if isinstance(default, tuple):
            default = " ".join(str(x) for x in default)
        rng = f" [{m['lo']}, {m['hi']}]" if m["lo"] is not None else ""
        rows.append(f"  {f.name} = {default}\n      {m['doc']}{rng} ({m['source']})")
    return "\n".join(rows)


# ---------------------------------------------------------------------------
# run

@dataclass
class TrajectoryEstimate:
    timestamps: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def append(self, x: State) -> None:
        if self.timestamps and not x.timestamp > self.timestamps[-1]:
            raise TimingError("trajectory timestamps must increase")
        self.timestamps.append(float(x.timestamp))
        self.states.append(x)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def positions(self) -> np.ndarray:
        return np.array([x.translation for x in self.states]).reshape(-1, 3)

    @property
    def quaternions(self) -> np.ndarray:
        return np.array([x.rotation for x in self.states]).reshape(-1, 4)

    def write_tum(self, path) -> None:
        sio.write_tum(path, self.timestamps, self.positions, self.quaternions)


@dataclass
class RunResult:
    trajectory: TrajectoryEstimate
    vmap: VoxelMap
    report: dict
    error: PipelineError | None = None


class Odometry:
    """Streaming estimator: feed raw sweeps in order, read the trajectory."""

    def __init__(self, cfg: PipelineConfig, imu: ImuData):
        self.cfg = cfg
        self.imu = imu
        self.solver_cfg = cfg.solver
        self.extrinsics = cfg.extrinsics
        self.noise = cfg.noise
        self.reconstructor = PacketReconstructor(cfg.downsample_voxel, cfg.gap_tolerance)
        self.vmap = VoxelMap(cfg.map_voxel, cfg.map_max_points, cfg.map_min_spacing)
        self.trajectory = TrajectoryEstimate()
        self.window: OptWindow | None = None
        self.gravity_w = None
        self.init_result = None
        self._pending: list[ReconstructedSweep] = []
        self.timing = {"sr": [], "opt": [], "map": []}
        self.residuals: list[float] = []
        self.n_points: list[int] = []
        self.insertions: list[float] = []
        self.n_windows = 0

    # -- helpers -----------------------------------------------------------
    def _insert(self, sweep: ReconstructedSweep, states) -> None:
        before = self.vmap.last_update_time
        self.vmap.insert_sweep(sweep_to_world(sweep, states, self.extrinsics),
                               now=sweep.t_end, min_gap=self.cfg.map_min_gap)
        if self.vmap.last_update_time != before:
            self.insertions.append(sweep.t_end)
            self.vmap.prune_far(states[-1].translation, self.cfg.prune_radius)

    def _initialize(self) -> bool:
        """Consume pending sweeps until initialization succeeds or needs more data."""
        cfg = self.cfg
        if cfg.init_mode == "static":
            first = self._pending[0]
            t0 = float(self.imu.t[0])
            res = static_init(self.imu, cfg.gravity, cfg.init_window, t0)
            self.gravity_w = res.gravity_w
            x0 = res.initial_states[0].replace(timestamp=float(first.boundaries[0]))
            seed = [x0]
            for k in range(3):
                T = first.boundaries
                seed.append(propagate_state(seed[-1], self.imu.window(T[k], T[k + 1]), self.gravity_w))
            self._insert(first, seed)
            self.trajectory.append(seed[0])
            self._start_anchor = seed[1]
            self.init_result = res
            self._pending.pop(0)
            return True
        n = cfg.bootstrap_sweeps
        if len(self._pending) < n:
            return False
        sweeps = self._pending[:n]
        res, _ = motion_init(sweeps, self.imu, self.vmap, None, cfg.gravity, self.noise,
                             self.extrinsics, n, cfg.map_min_gap)
        self.gravity_w = res.gravity_w
        states = res.initial_states
        for x in states[:-1]:
            self.trajectory.append(x)
        self._start_anchor = states[-1]
        self.insertions.append(self.vmap.last_update_time)
        self.init_result = res
        # the window loop resumes at the sweep starting at the last initialized state
        del self._pending[:n - 1]
        return True

    def _step(self, sweep: ReconstructedSweep) -> None:
        t0 = time.perf_counter()
        if self.window is None:
            win = build_window(self._start_anchor, self.imu, sweep.boundaries, self.gravity_w, self.noise)
        else:
            if abs(sweep.boundaries[0] - self.window.x_e1.timestamp) > 1e-6:
                raise PipelineError("reconstructed sweeps are not consecutive", sweep.t_begin)
            win = shift_window(self.window, self.imu, float(sweep.boundaries[3]), self.noise)
        solved = solve_window(win, self.vmap, sweep, self.solver_cfg, self.extrinsics)
        t1 = time.perf_counter()
        self._insert(sweep, solved.states)
        t2 = time.perf_counter()
        self.window = solved
        self.trajectory.append(solved.x_b)
        self.timing["opt"].append(t1 - t0)
        self.timing["map"].append(t2 - t1)
        self.residuals.append(solved.report.mean_abs_residual)
        self.n_points.append(solved.report.n_points)
        self.n_windows += 1

    # -- public ------------------------------------------------------------
    def push(self, raw) -> None:
        t0 = time.perf_counter()
        try:
            recs = self.reconstructor.push(raw)
        except DroppedDataError as exc:
            raise PipelineError(str(exc), raw.t_begin, "dropped_data") from exc
        dt = time.perf_counter() - t0
        self.timing["sr"].extend([dt / max(len(recs), 1)] * len(recs))
        self._pending.extend(recs)
        try:
            if self.init_result is None:
                if not self._pending or not self._initialize():
                    return
            while self._pending:
                sw = self._pending.pop(0)
                self._step(sw)
        except InitError as exc:
            raise PipelineError(f"initialization failed: {exc}", raw.t_begin, "init") from exc
        except DegenerateWindowError as exc:
            raise PipelineError(str(exc), raw.t_end, "degenerate_window") from exc
        except SolverError as exc:
            raise PipelineError(str(exc), raw.t_end, "solver") from exc
        except (ImuCoverageError, TimingError) as exc:
            raise PipelineError(str(exc), raw.t_end, "timing") from exc

    def finish(self) -> None:
        """Emit the states still held by the last window."""
        if self.window is not None:
            for x in self.window.states[1:]:
                self.trajectory.append(x)
            self.window = None

    def report(self) -> dict:
        sr, opt, mp = (np.asarray(self.timing[k]) for k in ("sr", "opt", "map"))
        n = min(len(sr), len(opt)) if len(opt) else 0

        def ms(a):
            return float(np.mean(a) * 1e3) if len(a) else 0.0
        total = sr[:n] + opt[:n] + mp[:n] if n else np.zeros(0)
        res = np.asarray(self.residuals)
        return {
            "windows": self.n_windows,
            "trajectory_states": len(self.trajectory),
            "map_points": len(self.vmap),
            "map_insertions": len(self.insertions),
            "time_per_sweep_ms": {"SR": ms(sr), "LIO-Opt": ms(opt), "Map Update": ms(mp), "Total": ms(total)},
            "residuals": {
                "mean_abs": float(res.mean()) if len(res) else None,
                "max_window_mean_abs": float(res.max()) if len(res) else None,
                "mean_points_per_window": float(np.mean(self.n_points)) if self.n_points else None,
            },
            "gravity_w": None if self.gravity_w is None else [float(x) for x in self.gravity_w],
        }


def run_streams(cfg: PipelineConfig, raw_sweeps, imu: ImuData) -> RunResult:
    """Run on in-memory data; failures are returned, not raised."""
    odo = Odometry(cfg, imu)
    err = None
    try:
        for raw in raw_sweeps:
            odo.push(raw)
        odo.finish()
    except PipelineError as exc:
        log.error("pipeline failed at t=%s: %s", exc.timestamp, exc)
        err = exc
    rep = odo.report()
    if err is not None:
        rep["error"] = {"class": type(err).__name__, "cause": err.cause, "timestamp": err.timestamp,
                        "message": str(err)}
    return RunResult(odo.trajectory, odo.vmap, rep, err)


def run(cfg: PipelineConfig, out_dir) -> RunResult:
    """Read the configured files, run, and write ``trajectory.tum`` and ``report.json``.

    The partial trajectory is written even when the run fails.
    """
    cfg.check_files()
    raw = sio.read_sweeps(cfg.path("points_file"), cfg.path("sweeps_file"))
    imu = sio.read_imu_csv(cfg.path("imu_file"))
    result = run_streams(cfg, raw, imu)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.trajectory.write_tum(out / "trajectory.tum")
    (out / "report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    if cfg.export_map:
        result.vmap.export_csv(out / "map.csv")
    return result


# ---------------------------------------------------------------------------
# evaluation

def match_timestamps(t_est, t_gt, tol: float = MATCH_TOLERANCE):
    """Index pairs of nearest ground-truth stamps within ``tol`` seconds."""
    t_est, t_gt = np.asarray(t_est, float), np.asarray(t_gt, float)
    if len(t_gt) == 0 or len(t_est) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(t_gt, kind="stable")
    ts = t_gt[order]
    j = np.clip(np.searchsorted(ts, t_est), 1, len(ts) - 1) if len(ts) > 1 else np.zeros(len(t_est), int)
    if len(ts) > 1:
        left = np.abs(t_est - ts[j - 1]) <= np.abs(ts[j] - t_est)
        j = np.where(left, j - 1, j)
    ok = np.abs(ts[j] - t_est) <= tol
    return np.nonzero(ok)[0], order[j[ok]]


def align_rigid(src, dst):
    """``R, t`` minimizing ``sum |R src_i + t - dst_i|^2`` (no scale)."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def ate(t_est, p_est, t_gt, p_gt, tol: float = MATCH_TOLERANCE):
    """``(rmse, per-pose errors)`` after rigid alignment of estimate to truth."""
    i, j = match_timestamps(t_est, t_gt, tol)
    if len(i) < 3:
        raise AlignmentError(f"only {len(i)} matched poses (need at least 3)")
    src, dst = np.asarray(p_est, float)[i], np.asarray(p_gt, float)[j]
    R, t = align_rigid(src, dst)
    err = np.linalg.norm(src @ R.T + t - dst, axis=1)
    return float(np.sqrt(np.mean(err**2))), err


def eval_ate(est_path, gt_path, tol: float = MATCH_TOLERANCE):
    t_e, p_e, _ = sio.read_tum(est_path)
    t_g, p_g, _ = sio.read_tum(gt_path)
    return ate(t_e, p_e, t_g, p_g, tol)


def trajectory_from_states(states) -> TrajectoryEstimate:
    tr = TrajectoryEstimate()
    for x in states:
        tr.append(x)
    return tr


__all__ = [
    "AlignmentError", "ConfigError", "Odometry", "PipelineConfig", "PipelineError", "RunResult",
    "TrajectoryEstimate", "align_rigid", "ate", "config_help", "eval_ate", "match_timestamps",
    "run", "run_streams",
]
