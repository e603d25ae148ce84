"""scikit-learn style wrappers around the functional core.

Only the parts of the estimator protocol that make sense for odometry are
provided: ``get_params``/``set_params`` and input validation come from
sklearn, ``fit`` consumes a sensor log and ``predict`` queries positions.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .imu import ImuData
from .pipeline import PipelineConfig, run_streams
from .sweep import DEFAULT_DOWNSAMPLE_VOXEL, DEFAULT_GAP_TOLERANCE, PacketReconstructor, RawSweep


def _as_raw(item) -> RawSweep:
    if isinstance(item, RawSweep):
        pts = check_array(item.points, ensure_min_samples=0)
        if pts.shape[1] != 3:
            raise ValueError(f"sweep points must have 3 columns, got {pts.shape[1]}")
        return item
    # (times, points, t_begin, t_end) tuples
    times, points, t0, t1 = item
    points = check_array(points, ensure_min_samples=0)
    times = check_array(np.reshape(times, (-1, 1)), ensure_min_samples=0).ravel()
    return RawSweep(times, points, float(t0), float(t1))


class SweepReconstructor(TransformerMixin, BaseEstimator):
    """Turn raw sweeps into overlapping reconstructed sweeps at three times the rate.

    Stateless between calls to ``transform``: every call starts cold.
    """

    def __init__(self, voxel_size: float = DEFAULT_DOWNSAMPLE_VOXEL,
                 gap_tolerance: float = DEFAULT_GAP_TOLERANCE):
        self.voxel_size = voxel_size
        self.gap_tolerance = gap_tolerance

    def fit(self, X=None, y=None):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        self.fitted_ = True
        return self

    def transform(self, X) -> list:
        check_is_fitted(self)
        rec = PacketReconstructor(self.voxel_size, self.gap_tolerance)
        out = []
        for item in X:
            out.extend(rec.push(_as_raw(item)))
        return out


class LidarInertialOdometry(BaseEstimator):
    """Estimate the body trajectory from raw sweeps and an IMU log.

    Parameters mirror the most used configuration keys; ``config`` supplies
    the rest (a :class:`PipelineConfig`, left unmodified).

    Attributes after ``fit``: ``trajectory_``, ``map_``, ``report_``.
    """

    def __init__(self, init_mode: str = "static", knn: int = 20, registrations: int = 5,
                 iterations: int = 5, multi_segment: bool = True, use_imu: bool = True,
                 consistency: str = "marginal", config: PipelineConfig | None = None):
        self.init_mode = init_mode
        self.knn = knn
        self.registrations = registrations
        self.iterations = iterations
        self.multi_segment = multi_segment
        self.use_imu = use_imu
        self.consistency = consistency
        self.config = config

    def _config(self) -> PipelineConfig:
        base = self.config or PipelineConfig()
        own = {k: v for k, v in self.get_params(deep=False).items() if k != "config"}
        vals = {f.name: getattr(base, f.name) for f in PipelineConfig.keys()}
        vals.update(own)
        return PipelineConfig(**vals, base_dir=base.base_dir)

    def fit(self, X, imu: ImuData, y=None):
        """Run the odometry over the raw sweeps ``X`` (in time order).

        Raises the pipeline error if the run fails.
        """
        if not isinstance(imu, ImuData):
            raise TypeError("imu must be an ImuData instance")
        raw = [_as_raw(item) for item in X]
        result = run_streams(self._config(), raw, imu)
        if result.error is not None:
            raise result.error
        self.trajectory_ = result.trajectory
        self.map_ = result.vmap
        self.report_ = result.report
        return self

    def predict(self, X) -> np.ndarray:
        """Positions at query times, linearly interpolated between solved states."""
        check_is_fitted(self, "trajectory_")
        t = check_array(np.reshape(X, (-1, 1))).ravel()
        tt = np.asarray(self.trajectory_.timestamps)
        if len(t) and (t.min() < tt[0] - 1e-9 or t.max() > tt[-1] + 1e-9):
            raise ValueError(f"query times must lie within [{tt[0]}, {tt[-1]}]")
        p = self.trajectory_.positions
        return np.column_stack([np.interp(t, tt, p[:, k]) for k in range(3)])

    def score(self, X, y) -> float:
        """Negative RMSE between predicted and given positions (no alignment)."""
        y = check_array(y)
        return -float(np.sqrt(np.mean(np.sum((self.predict(X) - y) ** 2, axis=1))))
