"""Voxel-hashed point map with per-cell capacity and 27-cell k-NN search.

Storage is dense: every occupied cell owns a slot in ``(capacity,
max_points, 3)`` arrays, and a sorted copy of the packed cell keys gives
vectorized lookups for whole batches of queries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .sweep import pack_cells, unpack_cells

DEFAULT_MAP_VOXEL = 1.0
DEFAULT_MAX_POINTS = 20
DEFAULT_MIN_GAP = 0.1
DEFAULT_PRUNE_RADIUS = 150.0
DEFAULT_MAX_LEVERAGE = 0.95
DEFAULT_MAX_FIT_ERROR = 0.05

_NEIGHBOR_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)],
                             dtype=np.int64)

_MAGIC = b"VXMAP\x00"
_VERSION = 1


class DegeneratePlaneError(ValueError):
    """Neighbors do not define a plane (too few, collinear or isotropic)."""


@dataclass(frozen=True)
class PlaneFit:
    """Plane ``normal @ x + d == 0`` with its planarity score in [0, 1]."""

    normal: np.ndarray
    d: float
    inlier_count: int
    planarity: float

    def distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal + self.d


def _max_leverage(X, evecs, evals, count):
    """Largest in-plane leverage ``1/k + a^2/l1 + b^2/l2`` among the neighbors.

    A value near 1 means a single neighbor pins the plane (e.g. collinear
    points plus one point from another surface), so the fit is unreliable.
    """
    a = X @ evecs[..., 2:3]
    b = X @ evecs[..., 1:2]
    with np.errstate(divide="ignore", invalid="ignore"):
        h = a[..., 0] ** 2 / evals[..., 2:3] + b[..., 0] ** 2 / evals[..., 1:2]
    return np.nan_to_num(h, nan=1.0).max(axis=-1) + 1.0 / np.maximum(count, 1)


def fit_plane(neighbors, min_points: int = 5, min_planarity: float = 0.3,
              max_leverage: float = DEFAULT_MAX_LEVERAGE,
              max_fit_error: float = DEFAULT_MAX_FIT_ERROR) -> PlaneFit:
    """Least-squares plane through ``neighbors`` by PCA of the scatter matrix."""
    pts = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    if len(pts) < min_points:
        raise DegeneratePlaneError(f"{len(pts)} neighbors, need {min_points}")
    c = pts.mean(axis=0)
    X = pts - c
    evals, evecs = np.linalg.eigh(X.T @ X)
    lam_min, lam_mid, lam_max = evals
    scale = max(lam_max, 1e-300)
    if lam_mid <= 1e-12 * scale:
        raise DegeneratePlaneError("neighbors are collinear")
    planarity = float(np.clip(1.0 - lam_min / lam_mid, 0.0, 1.0))
    if planarity < min_planarity:
        raise DegeneratePlaneError(f"planarity {planarity:.3f} below {min_planarity}")
    if _max_leverage(X, evecs, evals, len(pts)) > max_leverage:
        raise DegeneratePlaneError("plane is pinned by a single neighbor")
    n = evecs[:, 0]
    n = n / np.linalg.norm(n)
    if np.abs(X @ n).max() > max_fit_error:
        raise DegeneratePlaneError("a neighbor lies too far from the fitted plane")
    return PlaneFit(n, float(-n @ c), len(pts), planarity)


def fit_planes_batch(neighbors: np.ndarray, valid: np.ndarray, min_points: int = 5,
                     min_planarity: float = 0.3, max_leverage: float = DEFAULT_MAX_LEVERAGE,
                     max_fit_error: float = DEFAULT_MAX_FIT_ERROR):
    """Vectorized :func:`fit_plane` over ``(Q, k, 3)`` neighbor sets.

    Returns ``(normals (Q,3), d (Q,), planarity (Q,), ok (Q,))``.
    """
    w = valid.astype(float)
    cnt = w.sum(axis=1)
    safe = np.maximum(cnt, 1.0)
    c = np.einsum("qk,qki->qi", w, neighbors) / safe[:, None]
    X = (neighbors - c[:, None, :]) * w[:, :, None]
    S = np.einsum("qki,qkj->qij", X, X)
    evals, evecs = np.linalg.eigh(S)
    lam_min, lam_mid, lam_max = evals[:, 0], evals[:, 1], evals[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        planarity = np.clip(1.0 - lam_min / lam_mid, 0.0, 1.0)
    ok = (cnt >= min_points) & (lam_mid > 1e-12 * np.maximum(lam_max, 1e-300)) & (planarity >= min_planarity)
    ok &= _max_leverage(X, evecs, evals, cnt) <= max_leverage
    n = evecs[:, :, 0]
    ok &= np.abs(np.einsum("qki,qi->qk", X, n)).max(axis=1) <= max_fit_error
    planarity = np.where(ok, planarity, 0.0)
    d = -np.einsum("qi,qi->q", n, c)
    return n, d, planarity, ok


class VoxelMap:
    """Hash map of world points, at most ``max_points`` per cubic cell."""

    def __init__(self, voxel_size: float = DEFAULT_MAP_VOXEL, max_points: int = DEFAULT_MAX_POINTS,
                 min_point_spacing: float = 0.0):
        if voxel_size <= 0 or max_points < 1:
            raise ValueError("voxel_size must be positive and max_points >= 1")
        self.voxel_size = float(voxel_size)
        self.max_points = int(max_points)
        self.min_point_spacing = float(min_point_spacing)
        self.last_update_time = -np.inf
        self._keys = np.empty(0, dtype=np.int64)
        self._pts = np.empty((0, self.max_points, 3))
        self._cnt = np.empty(0, dtype=np.int64)
        self._sorted_keys = np.empty(0, dtype=np.int64)
        self._sorted_slots = np.empty(0, dtype=np.int64)
        self._tree = None

    # -- bookkeeping -------------------------------------------------------
    def __len__(self) -> int:
        return int(self._cnt.sum())

    @property
    def n_cells(self) -> int:
        return len(self._keys)

    def cell_of(self, points) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=float) / self.voxel_size).astype(np.int64)

    def _reindex(self) -> None:
        self._tree = None
        order = np.argsort(self._keys, kind="stable")
        self._sorted_keys = self._keys[order]
        self._sorted_slots = order

    def _lookup(self, keys: np.ndarray) -> np.ndarray:
        """Slot index per key, -1 where the cell is empty."""
        if len(self._sorted_keys) == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, len(self._sorted_keys) - 1)
        hit = self._sorted_keys[pos] == keys
        return np.where(hit, self._sorted_slots[pos], -1)

    def points(self) -> np.ndarray:
        """All stored points, cell by cell in slot order."""
        mask = np.arange(self.max_points)[None, :] < self._cnt[:, None]
        return self._pts[mask]

    def cells(self) -> dict[tuple[int, int, int], np.ndarray]:
        idx = unpack_cells(self._keys)
        return {tuple(int(v) for v in idx[s]): self._pts[s, :self._cnt[s]].copy()
                for s in range(len(self._keys))}

    # -- mutation ----------------------------------------------------------
    def add_points(self, points) -> int:
        """Insert unconditionally (no frequency gate); returns count stored."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            return 0
        if self.min_point_spacing > 0:
            return self._add_with_spacing(pts)
        keys = pack_cells(self.cell_of(pts))
        slots = self._lookup(keys)
        new_keys = np.unique(keys[slots < 0])
        if len(new_keys):
            base = len(self._keys)
            self._keys = np.concatenate([self._keys, new_keys])
            self._pts = np.concatenate([self._pts, np.zeros((len(new_keys), self.max_points, 3))])
            self._cnt = np.concatenate([self._cnt, np.zeros(len(new_keys), dtype=np.int64)])
            self._reindex()
            slots = self._lookup(keys)
        # rank of each point within its slot, preserving input order
        order = np.argsort(slots, kind="stable")
        s_sorted = slots[order]
        first = np.searchsorted(s_sorted, s_sorted, side="left")
        rank = np.empty(len(slots), dtype=np.int64)
        rank[order] = np.arange(len(slots)) - first
        pos = self._cnt[slots] + rank
        ok = pos < self.max_points
        self._pts[slots[ok], pos[ok]] = pts[ok]
        np.add.at(self._cnt, slots[ok], 1)
        self._tree = None
        return int(ok.sum())

    def _ensure_cells(self, keys: np.ndarray) -> np.ndarray:
        slots = self._lookup(keys)
        new_keys = np.unique(keys[slots < 0])
        if len(new_keys):
            self._keys = np.concatenate([self._keys, new_keys])
            self._pts = np.concatenate([self._pts, np.zeros((len(new_keys), self.max_points, 3))])
            self._cnt = np.concatenate([self._cnt, np.zeros(len(new_keys), dtype=np.int64)])
            self._reindex()
            slots = self._lookup(keys)
        return slots

    def _add_with_spacing(self, pts: np.ndarray) -> int:
        """Sequential semantics: a point is skipped when its cell is full or a
        point already stored there (earlier in this batch included) lies
        closer than ``min_point_spacing``."""
        slots = self._ensure_cells(pack_cells(self.cell_of(pts)))
        sp2 = self.min_point_spacing ** 2
        stored = self._pts[slots]                                  # (N, M, 3)
        filled = np.arange(self.max_points)[None, :] < self._cnt[slots][:, None]
        d2 = np.where(filled, np.sum((stored - pts[:, None, :]) ** 2, axis=2), np.inf)
        cand = np.flatnonzero(d2.min(axis=1) >= sp2)
        # cells receiving a single candidate need no ordering
        cs = slots[cand]
        uniq, inv, counts = np.unique(cs, return_inverse=True, return_counts=True)
        single = cand[(counts[inv] == 1) & (self._cnt[cs] < self.max_points)]
        s1 = slots[single]
        self._pts[s1, self._cnt[s1]] = pts[single]
        self._cnt[s1] += 1
        added = len(single)
        # resolve the rest in input order
        for s in uniq[counts > 1]:
            for i in cand[cs == s]:
                n = self._cnt[s]
                if n >= self.max_points:
                    break
                p = pts[i]
                if n and np.sum((self._pts[s, :n] - p) ** 2, axis=1).min() < sp2:
                    continue
                self._pts[s, n] = p
                self._cnt[s] = n + 1
                added += 1
        self._tree = None
        return added

    def insert_sweep(self, points, now: float, min_gap: float = DEFAULT_MIN_GAP) -> int:
        """Frequency-gated insertion: a no-op within ``min_gap`` s of the last one."""
        if now - self.last_update_time < min_gap - 1e-9:
            return 0
        self.last_update_time = now
        return self.add_points(points)

    def prune_far(self, center, radius: float = DEFAULT_PRUNE_RADIUS) -> int:
        """Drop every cell whose center lies farther than ``radius``."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        if len(self._keys) == 0:
            return 0
        centers = (unpack_cells(self._keys) + 0.5) * self.voxel_size
        far = np.linalg.norm(centers - np.asarray(center, dtype=float), axis=1) > radius
        removed = int(far.sum())
        if removed:
            keep = ~far
            self._keys, self._pts, self._cnt = self._keys[keep], self._pts[keep], self._cnt[keep]
            self._reindex()
        return removed

    # -- queries -----------------------------------------------------------
    def neighborhood(self, query) -> np.ndarray:
        """All points in the query's cell and its 26 neighbors."""
        keys = pack_cells(self.cell_of(query)[None, :] + _NEIGHBOR_OFFSETS)
        slots = self._lookup(keys)
        slots = slots[slots >= 0]
        if len(slots) == 0:
            return np.empty((0, 3))
        return np.concatenate([self._pts[s, :self._cnt[s]] for s in slots])

    def nearest_neighbors(self, query, k: int = 20) -> np.ndarray:
        """Up to ``k`` nearest points from the 27-cell neighborhood, nearest first."""
        cand = self.neighborhood(np.asarray(query, dtype=float))
        if len(cand) == 0:
            return cand
        d2 = np.sum((cand - query) ** 2, axis=1)
        order = np.argsort(d2, kind="stable")[:k]
        return cand[order]

    def nearest_neighbors_batch(self, queries, k: int = 20):
        """Vectorized k-NN: ``(neighbors (Q,k,3), dist2 (Q,k), valid (Q,k))``.

        Same result as :meth:`nearest_neighbors` per row.  A KD-tree over the
        whole map answers most queries; rows whose global neighbors leave the
        27-cell block are recomputed by the exact block search.  Missing
        entries have ``valid == False`` and ``dist2 == inf``.
        """
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        Q = len(q)
        if Q == 0 or len(self._keys) == 0:
            return np.zeros((Q, k, 3)), np.full((Q, k), np.inf), np.zeros((Q, k), dtype=bool)
        if self._tree is None:
            self._tree_pts = self.points()
            self._tree = cKDTree(self._tree_pts)
        # anything within one voxel lies in the 27-cell block; rows short of
        # k such neighbors fall back to the block search
        dist, idx = self._tree.query(q, k=k, distance_upper_bound=self.voxel_size)
        dist = dist.reshape(Q, k)
        idx = idx.reshape(Q, k)
        found = np.isfinite(dist)
        nb = self._tree_pts[np.minimum(idx, len(self._tree_pts) - 1)]
        off = self.cell_of(nb) - self.cell_of(q)[:, None, :]
        inside = np.all(np.abs(off) <= 1, axis=2)
        short = found.sum(axis=1) < min(k, len(self._tree_pts))
        redo = np.flatnonzero(np.any(found & ~inside, axis=1) | short)
        nb = np.where(found[:, :, None], nb, 0.0)
        dist2 = np.where(found, dist**2, np.inf)
        if len(redo):
            nb_r, d2_r, _ = self._block_knn(q[redo], k)
            nb[redo], dist2[redo] = nb_r, d2_r
        valid = np.isfinite(dist2)
        # recompute squared distances exactly from coordinates
        dist2 = np.where(valid, np.sum((nb - q[:, None, :]) ** 2, axis=2), np.inf)
        return nb, dist2, valid

    def _block_knn(self, q: np.ndarray, k: int):
        Q = len(q)
        cells = self.cell_of(q)[:, None, :] + _NEIGHBOR_OFFSETS[None, :, :]
        slots = self._lookup(pack_cells(cells))                   # (Q, 27)
        safe = np.maximum(slots, 0)
        cand = self._pts[safe]                                     # (Q, 27, M, 3)
        valid = (slots[:, :, None] >= 0) & (np.arange(self.max_points)[None, None, :] < self._cnt[safe][:, :, None])
        cand = cand.reshape(Q, -1, 3)
        valid = valid.reshape(Q, -1)
        d2 = np.sum((cand - q[:, None, :]) ** 2, axis=2)
        d2 = np.where(valid, d2, np.inf)
        kk = min(k, d2.shape[1])
        part = np.argpartition(d2, kk - 1, axis=1)[:, :kk]
        pd = np.take_along_axis(d2, part, axis=1)
        o = np.argsort(pd, axis=1, kind="stable")
        idx = np.take_along_axis(part, o, axis=1)
        nb = np.take_along_axis(cand, idx[:, :, None], axis=1)
        dist2 = np.take_along_axis(d2, idx, axis=1)
        nb = np.where(np.isfinite(dist2)[:, :, None], nb, 0.0)
        if kk < k:
            nb = np.concatenate([nb, np.zeros((Q, k - kk, 3))], axis=1)
            dist2 = np.concatenate([dist2, np.full((Q, k - kk), np.inf)], axis=1)
        return nb, dist2, np.isfinite(dist2)

    # -- persistence -------------------------------------------------------
    def export_csv(self, path) -> None:
        pts = self.points()
        with open(path, "w") as fh:
            fh.write("x,y,z\n")
            np.savetxt(fh, pts, fmt="%.9g", delimiter=",")

    def save_binary(self, path) -> None:
        """Versioned little-endian dump: header then float64 xyz triplets."""
        pts = self.points().astype("<f8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IdIQ", _VERSION, self.voxel_size, self.max_points, len(pts)))
            fh.write(pts.tobytes())

    @classmethod
    def load_binary(cls, path) -> "VoxelMap":
        data = Path(path).read_bytes()
        if not data.startswith(_MAGIC):
            raise ValueError(f"{path}: not a voxel map dump")
        off = len(_MAGIC)
        version, voxel, max_points, n = struct.unpack_from("<IdIQ", data, off)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported map dump version {version}")
        off += struct.calcsize("<IdIQ")
        pts = np.frombuffer(data, dtype="<f8", count=3 * n, offset=off).reshape(-1, 3)
        m = cls(voxel, max_points)
        m.add_points(pts)
        return m
