"""Sweep-reconstructing LiDAR-inertial odometry.

Raw spinning-LiDAR sweeps are cut into thirds and re-packed into
overlapping sweeps at three times the input rate; each reconstructed sweep
is solved jointly with IMU pre-integration over its four boundary states.
"""

from .geometry import Extrinsics, Pose, State
from .imu import ImuData, NoiseParams, Preintegration, preintegrate
from .optimizer import SolverConfig, solve_window
from .pipeline import PipelineConfig, PipelineError, RunResult, eval_ate, run, run_streams
from .simulator import Scenario, preset
from .sweep import RawSweep, ReconstructedSweep
from .voxel_map import VoxelMap
from .estimators import LidarInertialOdometry, SweepReconstructor

__version__ = "0.1.0"
