"""Voxel down-sampling and sweep segmentation / reconstruction.

A raw sweep is cut into three equal-duration segments.  Every new segment,
joined with the two segments before it, forms a reconstructed sweep that
still spans one full revolution but starts one third of a revolution after
its predecessor, so the sweep rate triples.

Point sets are carried as a ``(N,)`` timestamp array plus a ``(N, 3)``
position array.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DOWNSAMPLE_VOXEL = 0.5
DEFAULT_GAP_TOLERANCE = 0.005

_AXIS_BITS = 21
_AXIS_MASK = (1 << _AXIS_BITS) - 1


class DegenerateSweepError(ValueError):
    """A sweep has too few points or a non-positive duration."""


class DroppedDataError(RuntimeError):
    """Consecutive segments are not contiguous in time.

    ``sweeps`` holds any reconstructed sweeps produced by the same call
    before or after the gap.
    """

    sweeps: list = []


class OutOfOrderError(ValueError):
    """Stream timestamps went backwards by more than the tolerance."""


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Pack per-axis ``floor(coord / voxel_size)`` into one int64 per point.

    21 bits per axis, two's complement, so the grid spans about +-1e6 cells.
    """
    idx = np.floor(np.asarray(points, dtype=float) / voxel_size).astype(np.int64)
    return pack_cells(idx)


def pack_cells(idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64) & _AXIS_MASK
    return (idx[..., 0] << (2 * _AXIS_BITS)) | (idx[..., 1] << _AXIS_BITS) | idx[..., 2]


def unpack_cells(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.stack([(keys >> (2 * _AXIS_BITS)) & _AXIS_MASK,
                    (keys >> _AXIS_BITS) & _AXIS_MASK,
                    keys & _AXIS_MASK], axis=-1)
    # sign-extend
    return np.where(out >= (1 << (_AXIS_BITS - 1)), out - (1 << _AXIS_BITS), out)


def downsample(times: np.ndarray, points: np.ndarray,
               voxel_size: float = DEFAULT_DOWNSAMPLE_VOXEL) -> tuple[np.ndarray, np.ndarray]:
    """Keep the earliest point of every occupied voxel.

    Returns ``(times, points)`` of the survivors in timestamp order.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    times = np.asarray(times, dtype=float)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(times) == 0:
        return times.copy(), points.copy()
    order = np.argsort(times, kind="stable")
    keys = voxel_keys(points[order], voxel_size)
    _, first = np.unique(keys, return_index=True)
    keep = order[np.sort(first)]
    return times[keep], points[keep]


@dataclass(frozen=True)
class RawSweep:
    times: np.ndarray
    points: np.ndarray
    t_begin: float
    t_end: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(times) != len(points):
            raise ValueError("times and points must have equal length")
        if len(times) and (np.any(np.diff(times) < 0)):
            order = np.argsort(times, kind="stable")
            times, points = times[order], points[order]
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "points", points)

    @property
    def duration(self) -> float:
        return self.t_end - self.t_begin


@dataclass(frozen=True)
class SweepSegment:
    times: np.ndarray
    points: np.ndarray
    t_begin: float
    t_end: float
    segment_index: int = 1

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class ReconstructedSweep:
    segments: tuple[SweepSegment, SweepSegment, SweepSegment]
    sequence_index: int = 0

    @property
    def t_begin(self) -> float:
        return self.segments[0].t_begin

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    @property
    def boundaries(self) -> np.ndarray:
        """The four state timestamps ``(t_b, t_e1, t_e2, t_e3)``."""
        return np.array([self.segments[0].t_begin] + [s.t_end for s in self.segments])

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([s.times for s in self.segments])

    @property
    def points(self) -> np.ndarray:
        return np.concatenate([s.points for s in self.segments]).reshape(-1, 3)

    @property
    def segment_ids(self) -> np.ndarray:
        """0, 1 or 2 per point, aligned with ``times``/``points``."""
        return np.concatenate([np.full(len(s), k) for k, s in enumerate(self.segments)]).astype(int)

    def __len__(self) -> int:
        return sum(len(s) for s in self.segments)


def segment_sweep(sweep: RawSweep) -> list[SweepSegment]:
    """Split a sweep into three equal time thirds.

    Intervals are half-open ``[t_k, t_k+1)``, the last one closed on the
    right, so every point lands in exactly one segment.
    """
    duration = sweep.duration
    if not duration > 0:
        raise DegenerateSweepError(f"sweep duration {duration} must be positive")
    if len(sweep.times) < 3:
        raise DegenerateSweepError(f"sweep has {len(sweep.times)} points, need at least 3")
    bounds = [sweep.t_begin + k * duration / 3.0 for k in range(4)]
    bounds[3] = sweep.t_end
    cuts = np.searchsorted(sweep.times, bounds[1:3], side="left")
    edges = [0, int(cuts[0]), int(cuts[1]), len(sweep.times)]
    return [
        SweepSegment(sweep.times[edges[k]:edges[k + 1]], sweep.points[edges[k]:edges[k + 1]],
                     bounds[k], bounds[k + 1], k + 1)
        for k in range(3)
    ]


def reconstruct(segment_queue: Sequence[SweepSegment], sequence_index: int = 0,
                gap_tolerance: float = DEFAULT_GAP_TOLERANCE) -> ReconstructedSweep:
    """Join the last three segments into one reconstructed sweep."""
    if len(segment_queue) < 3:
        raise ValueError("need three segments to reconstruct a sweep")
    segs = tuple(segment_queue[-3:])
    for a, b in zip(segs[:-1], segs[1:]):
        gap = b.t_begin - a.t_end
        if abs(gap) > gap_tolerance:
            raise DroppedDataError(
                f"segments not contiguous: {a.t_end:.6f} -> {b.t_begin:.6f} (gap {gap * 1e3:.1f} ms)")
    return ReconstructedSweep(segs, sequence_index)


def process_packet_mode(sweep: RawSweep, carry: Sequence[SweepSegment] = (),
                        voxel_size: float = DEFAULT_DOWNSAMPLE_VOXEL,
                        start_index: int = 0,
                        gap_tolerance: float = DEFAULT_GAP_TOLERANCE,
                        ) -> tuple[list[ReconstructedSweep], tuple[SweepSegment, ...]]:
    """Down-sample, segment and reconstruct one raw sweep.

    ``carry`` holds the final two segments of the previous down-sampled
    sweep (empty at startup).  Returns the emitted sweeps and the new carry.
    """
    times, points = downsample(sweep.times, sweep.points, voxel_size)
    if len(times) < 3:
        raise DegenerateSweepError(f"sweep has {len(times)} points after down-sampling")
    segments = segment_sweep(RawSweep(times, points, sweep.t_begin, sweep.t_end))
    queue = list(carry)[-2:]
    out = []
    index = start_index
    for seg in segments:
        queue.append(seg)
        if len(queue) >= 3:
            out.append(reconstruct(queue[-3:], index, gap_tolerance))
            index += 1
        queue = queue[-2:]
    return out, tuple(queue)


class PacketReconstructor:
    """Stateful packet-mode reconstruction over a sequence of raw sweeps."""

    def __init__(self, voxel_size: float = DEFAULT_DOWNSAMPLE_VOXEL,
                 gap_tolerance: float = DEFAULT_GAP_TOLERANCE):
        self.voxel_size = voxel_size
        self.gap_tolerance = gap_tolerance
        self.carry: tuple[SweepSegment, ...] = ()
        self.count = 0

    def reset(self) -> None:
        self.carry = ()

    def push(self, sweep: RawSweep) -> list[ReconstructedSweep]:
        """Reconstruct from one raw sweep.

        On a timing gap against the carried segments the carry is dropped,
        the sweep is processed as a cold start, and :class:`DroppedDataError`
        is raised with the cold-start output attached as ``sweeps``.
        """
        gap = None
        if self.carry and abs(sweep.t_begin - self.carry[-1].t_end) > self.gap_tolerance:
            gap = sweep.t_begin - self.carry[-1].t_end
            self.carry = ()
        out, self.carry = process_packet_mode(sweep, self.carry, self.voxel_size,
                                              self.count, self.gap_tolerance)
        self.count += len(out)
        if gap is not None:
            err = DroppedDataError(f"raw sweep starts {gap * 1e3:.1f} ms after the previous one ended")
            err.sweeps = out
            raise err
        return out


class StreamReconstructor:
    """Cut a continuous point stream into fixed-period segments.

    Each segment is down-sampled on its own and joined with the previous two.
    A silent interval longer than ``max_point_gap`` (one segment period by
    default) raises :class:`DroppedDataError`; the reconstructor has already
    resynchronized to the next segment boundary when it does, so the caller
    may catch the error and keep pushing.
    """

    def __init__(self, segment_period: float, voxel_size: float = DEFAULT_DOWNSAMPLE_VOXEL,
                 origin: float | None = None, order_tolerance: float = 1e-6,
                 max_point_gap: float | None = None):
        if segment_period <= 0:
            raise ValueError("segment_period must be positive")
        self.segment_period = segment_period
        self.voxel_size = voxel_size
        self.origin = origin
        self.order_tolerance = order_tolerance
        self.max_point_gap = segment_period if max_point_gap is None else max_point_gap
        self.count = 0
        self._queue: list[SweepSegment] = []
        self._seg_k: int | None = None
        self._buf_t: list[np.ndarray] = []
        self._buf_p: list[np.ndarray] = []
        self._last_t: float | None = None

    def _bound(self, k: int) -> float:
        return self.origin + k * self.segment_period

    def _close_segment(self) -> list[ReconstructedSweep]:
        t = np.concatenate(self._buf_t) if self._buf_t else np.empty(0)
        p = np.concatenate(self._buf_p).reshape(-1, 3) if self._buf_p else np.empty((0, 3))
        t, p = downsample(t, p, self.voxel_size)
        k = self._seg_k
        seg = SweepSegment(t, p, self._bound(k), self._bound(k + 1), k % 3 + 1)
        self._buf_t, self._buf_p = [], []
        self._seg_k = k + 1
        self._queue = (self._queue + [seg])[-3:]
        if len(self._queue) == 3:
            sweep = reconstruct(self._queue, self.count)
            self.count += 1
            return [sweep]
        return []

    def push(self, times: np.ndarray, points: np.ndarray) -> list[ReconstructedSweep]:
        times = np.asarray(times, dtype=float)
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(times) == 0:
            return []
        if self.origin is None:
            self.origin = float(times[0])
        if self._seg_k is None:
            self._seg_k = int(np.floor((times[0] - self.origin) / self.segment_period))
        prev = np.concatenate(([self._last_t if self._last_t is not None else times[0]], times[:-1]))
        steps = times - prev
        if np.any(steps < -self.order_tolerance):
            bad = int(np.argmax(steps < -self.order_tolerance))
            raise OutOfOrderError(f"timestamp {times[bad]:.6f} precedes {prev[bad]:.6f}")
        gaps = np.flatnonzero(steps > self.max_point_gap)
        if len(gaps):
            g = int(gaps[0])
            out = self._consume(times[:g], points[:g])
            self._resync(times[g])
            try:
                out += self.push(times[g:], points[g:])
            except DroppedDataError as later:
                out += later.sweeps
            err = DroppedDataError(f"no points for {steps[g] * 1e3:.1f} ms before t={times[g]:.6f}")
            err.sweeps = out
            raise err
        return self._consume(times, points)

    def _resync(self, t_next: float) -> None:
        self._queue = []
        self._buf_t, self._buf_p = [], []
        self._seg_k = int(np.ceil((t_next - self.origin) / self.segment_period - 1e-12))
        self._last_t = None

    def _consume(self, times: np.ndarray, points: np.ndarray) -> list[ReconstructedSweep]:
        out: list[ReconstructedSweep] = []
        if len(times) == 0:
            return out
        start_bound = self._bound(self._seg_k)
        keep = times >= start_bound - 1e-12
        times, points = times[keep], points[keep]
        i = 0
        n = len(times)
        while i < n:
            end = self._bound(self._seg_k + 1)
            j = int(np.searchsorted(times, end, side="left"))
            if j > i:
                self._buf_t.append(times[i:j])
                self._buf_p.append(points[i:j])
            if j < n:
                out.extend(self._close_segment())
            i = j
        if n:
            self._last_t = float(times[-1])
        return out

    def flush(self) -> list[ReconstructedSweep]:
        """Close the segment in progress (end of stream)."""
        if self._seg_k is None or not self._buf_t:
            return []
        return self._close_segment()


def process_stream_mode(chunks, segment_period: float,
                        voxel_size: float = DEFAULT_DOWNSAMPLE_VOXEL, strict: bool = True):
    """Yield reconstructed sweeps from an iterable of ``(times, points)`` chunks.

    With ``strict=False`` a dropped-data gap is logged and the stream resumes
    at the next segment boundary instead of raising.
    """
    rec = StreamReconstructor(segment_period, voxel_size)
    for times, points in chunks:
        try:
            yield from rec.push(times, points)
        except DroppedDataError as err:
            if strict:
                raise
            logger.warning("%s; resynchronized", err)
            yield from err.sweeps
    yield from rec.flush()
