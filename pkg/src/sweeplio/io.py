"""Readers and writers for point, sweep, IMU and TUM trajectory files.

Floats are written with 17 significant digits so that files round-trip
losslessly; TUM trajectories use 9 significant digits.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imu import ImuData
from .sweep import RawSweep

_LOSSLESS = "%.17g"


class InputFileError(OSError):
    """A required input file is missing or malformed."""


def _read_table(path, ncols: int, header: str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"input file not found: {path}")
    try:
        with path.open() as fh:
            first = fh.readline().strip()
            if first.replace(" ", "") != header:
                raise InputFileError(f"{path}: expected header {header!r}, got {first!r}")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise InputFileError(f"{path}: {exc}") from exc
    if data.size == 0:
        return np.zeros((0, ncols))
    if data.shape[1] != ncols:
        raise InputFileError(f"{path}: expected {ncols} columns, found {data.shape[1]}")
    return data


def _write_table(path, header: str, data: np.ndarray, fmt=_LOSSLESS) -> None:
    path = Path(path)
    try:
        np.savetxt(path, data, fmt=fmt, delimiter=",", header=header, comments="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_points_csv(path, sweeps) -> None:
    data = np.concatenate([np.column_stack((s.times, s.points)) for s in sweeps]) if sweeps \
        else np.zeros((0, 4))
    _write_table(path, "t,x,y,z", data)


def read_points_csv(path):
    """``(times, points)`` from a ``t,x,y,z`` file."""
    d = _read_table(path, 4, "t,x,y,z")
    return d[:, 0].copy(), d[:, 1:4].copy()


def write_sweeps_csv(path, sweeps) -> None:
    data = np.array([[k, s.t_begin, s.t_end] for k, s in enumerate(sweeps)]).reshape(-1, 3)
    _write_table(path, "sweep_id,t_begin,t_end", data, fmt=["%d", _LOSSLESS, _LOSSLESS])


def read_sweeps_csv(path) -> np.ndarray:
    """``(N, 2)`` array of ``[t_begin, t_end)`` intervals."""
    return _read_table(path, 3, "sweep_id,t_begin,t_end")[:, 1:3].copy()


def split_sweeps(times, points, intervals) -> list:
    """Group a point stream into raw sweeps by half-open time intervals."""
    order = np.argsort(times, kind="stable")
    times, points = times[order], points[order]
    out = []
    for t0, t1 in intervals:
        i0, i1 = np.searchsorted(times, [t0, t1], side="left")
        out.append(RawSweep(times[i0:i1], points[i0:i1], float(t0), float(t1)))
    return out


def read_sweeps(points_path, sweeps_path) -> list:
    times, points = read_points_csv(points_path)
    return split_sweeps(times, points, read_sweeps_csv(sweeps_path))


def write_imu_csv(path, imu: ImuData) -> None:
    _write_table(path, "t,ax,ay,az,gx,gy,gz", np.column_stack((imu.t, imu.acc, imu.gyro)))


def read_imu_csv(path) -> ImuData:
    d = _read_table(path, 7, "t,ax,ay,az,gx,gy,gz")
    return ImuData(d[:, 0].copy(), d[:, 1:4].copy(), d[:, 4:7].copy())


def write_tum(path, t, positions, quats_wxyz) -> None:
    """``t tx ty tz qx qy qz qw`` per line, 9 significant digits."""
    t = np.asarray(t, float).reshape(-1, 1)
    q = np.asarray(quats_wxyz, float).reshape(-1, 4)
    data = np.hstack((t, np.asarray(positions, float).reshape(-1, 3), q[:, 1:4], q[:, :1]))
    path = Path(path)
    try:
        np.savetxt(path, data, fmt="%.9g", delimiter=" ")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_tum(path):
    """``(t, positions, quats_wxyz)``; ``#`` lines are comments."""
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"trajectory file not found: {path}")
    try:
        d = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as exc:
        raise InputFileError(f"{path}: {exc}") from exc
    if d.size == 0:
        return np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4))
    if d.shape[1] != 8:
        raise InputFileError(f"{path}: TUM lines need 8 columns, found {d.shape[1]}")
    return d[:, 0].copy(), d[:, 1:4].copy(), d[:, [7, 4, 5, 6]].copy()
