"""BEV pillar grid, per-point PFE inputs and correspondence labels from a known transform."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .geometry import PointCloud, RigidTransform


@dataclass(frozen=True)
class GridSpec:
    x_min: float = -32.0
    x_max: float = 32.0
    y_min: float = -32.0
    y_max: float = 32.0
    pillar_size: Tuple[float, float] = (0.25, 0.25)

    def __post_init__(self):
        object.__setattr__(self, "pillar_size", tuple(float(p) for p in self.pillar_size))
        for span, step in ((self.x_max - self.x_min, self.pillar_size[0]), (self.y_max - self.y_min, self.pillar_size[1])):
            n = span / step
            if step <= 0 or n < 1 or abs(n - round(n)) > 1e-9:
                raise ValueError("grid extent %.6g is not a positive multiple of pillar size %.6g" % (span, step))

    @classmethod
    def square(cls, half_extent: float, pillar: float = 0.25) -> "GridSpec":
        return cls(-half_extent, half_extent, -half_extent, half_extent, (pillar, pillar))

    @property
    def H(self) -> int:
        return int(round((self.y_max - self.y_min) / self.pillar_size[1]))

    @property
    def W(self) -> int:
        return int(round((self.x_max - self.x_min) / self.pillar_size[0]))

    @property
    def n_cells(self) -> int:
        return self.H * self.W

    def cell_of(self, xy: np.ndarray) -> np.ndarray:
        """Flat cell index (row * W + col) of each (x, y); -1 when outside [min, max)."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        q = np.floor((xy[:, 0] - self.x_min) / self.pillar_size[0])
        r = np.floor((xy[:, 1] - self.y_min) / self.pillar_size[1])
        ok = (xy[:, 0] >= self.x_min) & (xy[:, 0] < self.x_max) & (xy[:, 1] >= self.y_min) & (xy[:, 1] < self.y_max)
        # guard the rare float case where x < x_max but floor lands on W
        ok &= (q >= 0) & (q < self.W) & (r >= 0) & (r < self.H)
        out = np.full(len(xy), -1, dtype=np.int64)
        out[ok] = (r[ok] * self.W + q[ok]).astype(np.int64)
        return out

    def centers(self) -> np.ndarray:
        """(H*W, 2) pillar centers in flat order."""
        dx, dy = self.pillar_size
        r, q = np.divmod(np.arange(self.n_cells), self.W)
        return np.stack([self.x_min + (q + 0.5) * dx, self.y_min + (r + 0.5) * dy], 1)

    def center(self, cell: int) -> Tuple[float, float]:
        r, q = divmod(int(cell), self.W)
        return (self.x_min + (q + 0.5) * self.pillar_size[0], self.y_min + (r + 0.5) * self.pillar_size[1])


@dataclass
class Pillarization:
    grid: GridSpec
    point_cell: np.ndarray  # (N,) flat cell per point, -1 when out of range
    mask: np.ndarray  # (H, W) bool

    @property
    def flat_mask(self) -> np.ndarray:
        return self.mask.reshape(-1)

    @property
    def nonempty(self) -> np.ndarray:
        return np.flatnonzero(self.flat_mask)

    def in_range(self) -> np.ndarray:
        return self.point_cell >= 0

    def point_lists(self) -> List[np.ndarray]:
        """Point indices per flat cell (empty arrays for empty cells)."""
        order = np.argsort(self.point_cell, kind="stable")
        cells = self.point_cell[order]
        start = np.searchsorted(cells, np.arange(self.grid.n_cells), "left")
        stop = np.searchsorted(cells, np.arange(self.grid.n_cells), "right")
        return [order[a:b] for a, b in zip(start, stop)]

    def centers(self) -> np.ndarray:
        return self.grid.centers()


def pillarize(pc: PointCloud, grid: GridSpec) -> Pillarization:
    cell = grid.cell_of(pc.points[:, :2]) if len(pc) else np.zeros(0, dtype=np.int64)
    mask = np.zeros(grid.n_cells, dtype=bool)
    mask[cell[cell >= 0]] = True
    return Pillarization(grid, cell, mask.reshape(grid.H, grid.W))


def pfe_point_features(pc: PointCloud, pill: Pillarization) -> Tuple[np.ndarray, np.ndarray]:
    """8-d decorated point features for in-range points.

    Returns ``(features, point_ids)``. Columns are (x, y, z, x-mean, y-mean,
    z-mean, x-cx, y-cy); x and y are measured from the grid window origin so a
    scene shifted together with its window yields identical features.
    """
    grid = pill.grid
    ids = np.flatnonzero(pill.point_cell >= 0)
    cell = pill.point_cell[ids]
    xyz = pc.points[ids]
    count = np.bincount(cell, minlength=grid.n_cells).astype(np.float64)
    mean = np.zeros((grid.n_cells, 3))
    for k in range(3):
        mean[:, k] = np.bincount(cell, weights=xyz[:, k], minlength=grid.n_cells)
    nz = count > 0
    mean[nz] /= count[nz, None]
    ctr = grid.centers()[cell]
    origin = np.array([grid.x_min, grid.y_min])
    feats = np.concatenate([
        xyz[:, :2] - origin,
        xyz[:, 2:3],
        xyz - mean[cell],
        xyz[:, :2] - ctr,
    ], axis=1)
    return feats, ids


@dataclass
class CorrespondenceLabels:
    """Flat-indexed labels for every labeled source pillar.

    ``query[m]`` is the source cell, ``hard[m]`` its mapped target (-1 when
    that target pillar is empty); positives are stored CSR-style in
    ``pos_cell``/``pos_weight`` with ``pos_owner`` giving the row m.
    """

    query: np.ndarray
    hard: np.ndarray
    pos_owner: np.ndarray
    pos_cell: np.ndarray
    pos_weight: np.ndarray
    unlabeled: np.ndarray  # source cells that received no label
    key_mask: np.ndarray  # (H*W,) occupancy of the target frame

    def positives(self, m: int) -> Tuple[np.ndarray, np.ndarray]:
        sel = self.pos_owner == m
        return self.pos_cell[sel], self.pos_weight[sel]

    def __len__(self):
        return len(self.query)


def default_epsilon(grid: GridSpec) -> float:
    return 1.1 * grid.pillar_size[0]


def correspondence_labels(grid: GridSpec, pill_t: Pillarization, pill_t1: Pillarization,
                          T: RigidTransform, eps: Optional[float] = None,
                          w_self: float = 0.6, w_neighbor: float = 0.1) -> CorrespondenceLabels:
    if eps is None:
        eps = default_epsilon(grid)
    centers = grid.centers()
    src = pill_t.nonempty
    mapped = T.apply_xy(centers[src])
    hard = grid.cell_of(mapped)
    tmask = pill_t1.flat_mask

    # neighbor offsets whose center distance is below eps
    dx, dy = grid.pillar_size
    rq = int(math.ceil(eps / dx)) + 1
    rr = int(math.ceil(eps / dy)) + 1
    offs = [(a, b) for a in range(-rr, rr + 1) for b in range(-rq, rq + 1) if math.hypot(a * dy, b * dx) < eps]

    query, hard_out, owner, pos, wts, unl = [], [], [], [], [], []
    for s, h in zip(src, hard):
        if h < 0:
            unl.append(s)
            continue
        r0, q0 = divmod(int(h), grid.W)
        cells = []
        for a, b in offs:
            r, q = r0 + a, q0 + b
            if 0 <= r < grid.H and 0 <= q < grid.W and tmask[r * grid.W + q]:
                cells.append(r * grid.W + q)
        if not cells:
            unl.append(s)
            continue
        m = len(query)
        query.append(s)
        hard_out.append(int(h) if tmask[h] else -1)
        for c in cells:
            owner.append(m)
            pos.append(c)
            wts.append(w_self if c == h else w_neighbor)
    i64 = lambda x: np.asarray(x, dtype=np.int64)
    return CorrespondenceLabels(i64(query), i64(hard_out), i64(owner), i64(pos),
                                np.asarray(wts, dtype=np.float64), i64(unl), tmask.copy())
