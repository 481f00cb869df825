"""Patched pillar association, pillar flow and its transfer back to points."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .geometry import PointCloud
from .pillargrid import GridSpec, Pillarization


@dataclass(frozen=True)
class PatchLayout:
    """s x s query patches, each paired with a concentric (alpha*s)^2 key patch clipped to the grid.

    Rectangles are ``(r0, r1, c0, c1)`` half-open in rows/columns.
    """

    H: int
    W: int
    s: int
    alpha: float
    query_rects: Tuple[Tuple[int, int, int, int], ...]
    key_rects: Tuple[Tuple[int, int, int, int], ...]

    @property
    def n_patches(self) -> int:
        return len(self.query_rects)

    def _cells(self, rect) -> np.ndarray:
        r0, r1, c0, c1 = rect
        rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
        return (rr * self.W + cc).ravel()

    def query_cells(self, p: int) -> np.ndarray:
        return self._cells(self.query_rects[p])

    def key_cells(self, p: int) -> np.ndarray:
        return self._cells(self.key_rects[p])

    def patch_of(self, cell) -> np.ndarray:
        r, q = np.divmod(np.asarray(cell), self.W)
        n_cols = -(-self.W // self.s)
        return (r // self.s) * n_cols + q // self.s

    def in_key_patch(self, cell, p: int) -> np.ndarray:
        r, q = np.divmod(np.asarray(cell), self.W)
        r0, r1, c0, c1 = self.key_rects[p]
        return (r >= r0) & (r < r1) & (q >= c0) & (q < c1)


def build_layout(grid: GridSpec, s: int = 32, alpha: float = 2.0) -> PatchLayout:
    if s <= 0:
        raise ValueError("patch size must be positive")
    if not alpha > 1:
        raise ValueError("key scale alpha must exceed 1")
    H, W = grid.H, grid.W
    pad = int((alpha - 1) * s // 2)
    queries, keys = [], []
    for r0 in range(0, H, s):
        for c0 in range(0, W, s):
            r1, c1 = min(r0 + s, H), min(c0 + s, W)
            queries.append((r0, r1, c0, c1))
            keys.append((max(r0 - pad, 0), min(r1 + pad, H), max(c0 - pad, 0), min(c1 + pad, W)))
    return PatchLayout(H, W, int(s), float(alpha), tuple(queries), tuple(keys))


def pairwise_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, D) x (m, D) -> (n, m) inner products, one fixed summation order per pair."""
    return (a[:, None, :] * b[None, :, :]).sum(-1)


_CHUNK = 64  # query rows per block; bounds the (rows, keys, D) temporary


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AssociationResult:
    """Per non-empty query pillar: its key set, probabilities and argmax target.

    ``key_sets[m]`` lists the flat key cells (ascending) that ``pb[m]`` ranges
    over; ``target[m]`` is -1 for queries without any non-empty key.
    """

    query: np.ndarray
    patch: np.ndarray
    target: np.ndarray
    max_prob: np.ndarray
    pb: List[np.ndarray]
    key_sets: List[np.ndarray]
    dot_products: int = 0

    @property
    def matched(self) -> np.ndarray:
        return self.target >= 0

    def row(self, cell: int) -> int:
        hit = np.flatnonzero(self.query == cell)
        if not len(hit):
            raise KeyError("cell %d is not a query pillar" % cell)
        return int(hit[0])


def _flat_embed(z) -> np.ndarray:
    if hasattr(z, "detach"):
        z = z.detach().cpu().numpy()
    z = np.asarray(z, dtype=np.float64)
    return z.reshape(z.shape[0], -1).T  # (H*W, D)


def associate(z_t, z_t1, pill_t: Pillarization, pill_t1: Pillarization, layout: PatchLayout) -> AssociationResult:
    """Softmax over inner products against each query's key patch; argmax is the match.

    Ties go to the lowest flat key index (keys are kept in ascending order and
    ``argmax`` returns the first maximum).
    """
    Zt, Zt1 = _flat_embed(z_t), _flat_embed(z_t1)
    mt, mt1 = pill_t.flat_mask, pill_t1.flat_mask
    queries, patches, targets, maxp, pbs, keysets = [], [], [], [], [], []
    n_dots = 0
    for p in range(layout.n_patches):
        q = layout.query_cells(p)
        q = np.sort(q[mt[q]])
        if not len(q):
            continue
        k = layout.key_cells(p)
        k = np.sort(k[mt1[k]])
        if not len(k):
            for cell in q:
                queries.append(cell); patches.append(p); targets.append(-1); maxp.append(0.0)
                pbs.append(np.zeros(0)); keysets.append(k)
            continue
        prob = np.concatenate([
            stable_softmax(pairwise_dots(Zt[q[i:i + _CHUNK]], Zt1[k])) for i in range(0, len(q), _CHUNK)
        ])
        n_dots += prob.size
        best = prob.argmax(axis=1)
        for row, cell in enumerate(q):
            queries.append(cell)
            patches.append(p)
            targets.append(int(k[best[row]]))
            maxp.append(float(prob[row, best[row]]))
            pbs.append(prob[row])
            keysets.append(k)
    return AssociationResult(
        np.asarray(queries, dtype=np.int64), np.asarray(patches, dtype=np.int64),
        np.asarray(targets, dtype=np.int64), np.asarray(maxp), pbs, keysets, n_dots,
    )


@dataclass
class FlowField:
    """Per-cell 2D pillar flow; ``matched`` marks cells with an association."""

    grid: GridSpec
    pillar: np.ndarray  # (H*W, 2)
    matched: np.ndarray  # (H*W,) bool
    unmatched: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def mean_flow(self) -> np.ndarray:
        if not self.matched.any():
            return np.zeros(2)
        return self.pillar[self.matched].mean(axis=0)


def pillar_flow(assoc: AssociationResult, grid: GridSpec) -> FlowField:
    centers = grid.centers()
    flow = np.zeros((grid.n_cells, 2))
    matched = np.zeros(grid.n_cells, dtype=bool)
    ok = assoc.target >= 0
    q, t = assoc.query[ok], assoc.target[ok]
    flow[q] = centers[t] - centers[q]
    matched[q] = True
    return FlowField(grid, flow, matched, assoc.query[~ok])


def scatter_to_points(flow: FlowField, pill: Pillarization, ground_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-point 3D flow: the pillar's (dx, dy, 0), zero on ground, scene mean outside the grid."""
    n = len(pill.point_cell)
    out = np.zeros((n, 3))
    inside = pill.point_cell >= 0
    out[inside, :2] = flow.pillar[pill.point_cell[inside]]
    out[~inside, :2] = flow.mean_flow()
    if ground_mask is not None:
        out[np.asarray(ground_mask, dtype=bool)] = 0.0
    return out


def chamfer_refine(pc_t: PointCloud, pc_t1: PointCloud, assoc: AssociationResult,
                   pill_t: Pillarization, pill_t1: Pillarization,
                   ground_mask: Optional[np.ndarray] = None, seed: int = 0) -> np.ndarray:
    """Point-level refinement for dense clouds.

    Each matched source pillar draws one reference point; the target-pillar
    point nearest to the reference shifted by the pillar flow becomes its
    correspondence and the resulting 3D offset is shared by the whole pillar.
    """
    grid = pill_t.grid
    flow = pillar_flow(assoc, grid)
    out = scatter_to_points(flow, pill_t, ground_mask)
    rng = np.random.default_rng(seed)
    src_lists = pill_t.point_lists()
    tgt_lists = pill_t1.point_lists()
    for q, t in zip(assoc.query, assoc.target):
        if t < 0:
            continue
        src, tgt = src_lists[q], tgt_lists[t]
        if not len(src) or not len(tgt):
            continue
        ref = pc_t.points[src[rng.integers(len(src))]]
        guess = ref + np.array([flow.pillar[q, 0], flow.pillar[q, 1], 0.0])
        cand = pc_t1.points[tgt]
        best = cand[np.argmin(((cand - guess) ** 2).sum(axis=1))]
        out[src] = best - ref
    if ground_mask is not None:
        out[np.asarray(ground_mask, dtype=bool)] = 0.0
    return out
