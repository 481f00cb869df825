import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from contrastmotion.geometry import PointCloud, RigidTransform
from contrastmotion.pillargrid import (
    GridSpec, correspondence_labels, default_epsilon, pfe_point_features, pillarize,
)

from conftest import random_cloud

GRID = GridSpec()


def test_default_grid_shape():
    assert (GRID.H, GRID.W) == (256, 256) and GRID.pillar_size == (0.25, 0.25)


def test_non_integer_grid_rejected():
    with pytest.raises(ValueError):
        GridSpec(0, 1.1, 0, 1, (0.25, 0.25))


def test_corner_point_in_first_cell():
    pill = pillarize(PointCloud([[-32.0, -32.0, 1.0]]), GRID)
    assert pill.point_cell.tolist() == [0] and pill.mask[0, 0]


def test_origin_point_cell_and_center():
    pill = pillarize(PointCloud([[0.0, 0.0, 1.0]]), GRID)
    assert pill.point_cell[0] == 128 * 256 + 128
    assert GRID.center(pill.point_cell[0]) == (0.125, 0.125)


def test_upper_edges_are_open():
    pill = pillarize(PointCloud([[32.0, 0.0, 1.0], [0.0, 32.0, 1.0], [-32.1, 0, 0]]), GRID)
    assert pill.point_cell.tolist() == [-1, -1, -1] and not pill.mask.any()


def test_floor_oracle():
    pc = random_cloud(np.random.default_rng(0), 500, extent=40)
    pill = pillarize(pc, GRID)
    for (x, y, _), c in zip(pc.points, pill.point_cell):
        if -32 <= x < 32 and -32 <= y < 32:
            expect = math.floor((y + 32) / 0.25) * 256 + math.floor((x + 32) / 0.25)
        else:
            expect = -1
        assert c == expect


def test_center_formula():
    g = GridSpec(-1, 3, -2, 0, (0.5, 0.25))
    c = g.centers()
    for cell in range(g.n_cells):
        r, q = divmod(cell, g.W)
        assert tuple(c[cell]) == (-1 + (q + 0.5) * 0.5, -2 + (r + 0.5) * 0.25)


@given(st.integers(0, 10_000))
def test_point_lists_partition(seed):
    pc = random_cloud(np.random.default_rng(seed), 300, extent=40)
    pill = pillarize(pc, GRID)
    lists = pill.point_lists()
    seen = np.concatenate([l for l in lists if len(l)])
    assert len(seen) == int((pill.point_cell >= 0).sum())
    assert len(np.unique(seen)) == len(seen)
    assert all(pill.flat_mask[c] == (len(l) > 0) for c, l in enumerate(lists) if len(l) or pill.flat_mask[c])


def test_out_of_range_cloud_is_empty():
    pill = pillarize(PointCloud([[100.0, 100.0, 0.0]]), GRID)
    assert not pill.mask.any() and len(pill.nonempty) == 0


# --- point features ---


def test_single_point_has_zero_mean_offset():
    pc = PointCloud([[0.1, 0.2, 1.0]])
    feats, _ = pfe_point_features(pc, pillarize(pc, GRID))
    assert feats[0, 3:6].tolist() == [0.0, 0.0, 0.0]


def test_symmetric_points_mean_offsets():
    pc = PointCloud([[0.05, 0.1, 1.0], [0.15, 0.2, 2.0]])
    feats, _ = pfe_point_features(pc, pillarize(pc, GRID))
    assert np.allclose(feats[0, 3:6], -feats[1, 3:6], atol=1e-15)


def test_seven_point_pillar_loop_oracle():
    rng = np.random.default_rng(5)
    pts = np.column_stack([1.0 + rng.uniform(0, 0.25, 7), -2.0 + rng.uniform(0, 0.25, 7), rng.uniform(0, 2, 7)])
    pc = PointCloud(pts)
    feats, ids = pfe_point_features(pc, pillarize(pc, GRID))
    mean = [sum(p[k] for p in pts) / 7 for k in range(3)]
    cx, cy = 1.125, -1.875
    for f, i in zip(feats, ids):
        x, y, z = pts[i]
        expect = [x + 32, y + 32, z, x - mean[0], y - mean[1], z - mean[2], x - cx, y - cy]
        assert np.allclose(f, expect, atol=1e-12)


# --- correspondence labels ---


def test_identity_labels_map_to_self():
    pc = random_cloud(np.random.default_rng(1), 400)
    pill = pillarize(pc, GRID)
    lab = correspondence_labels(GRID, pill, pill, RigidTransform())
    assert np.array_equal(lab.query, lab.hard) and np.array_equal(lab.query, pill.nonempty)


def test_pure_shift_moves_one_column():
    pc = random_cloud(np.random.default_rng(2), 400, extent=30)
    T = RigidTransform(0.0, (0.25, 0.0, 0.0))
    pill_t = pillarize(pc, GRID)
    pill_t1 = pillarize(PointCloud(T.apply(pc.points)), GRID)
    lab = correspondence_labels(GRID, pill_t, pill_t1, T)
    centers = GRID.centers()
    for s, h in zip(lab.query, lab.hard):
        # brute force: the shifted center lies exactly at the next column's center
        cx, cy = centers[s] + (0.25, 0.0)
        expect = int(math.floor((cy + 32) / 0.25) * 256 + math.floor((cx + 32) / 0.25))
        assert h == expect == s + 1


def _brute_labels(grid, pill_t, pill_t1, T, eps):
    """Per-center mapping plus an all-cells distance scan."""
    centers = grid.centers()
    tmask = pill_t1.flat_mask
    out = {}
    for s in pill_t.nonempty:
        cx, cy = centers[s]
        c, si = math.cos(T.rotation), math.sin(T.rotation)
        mx = T.scale * (c * cx - si * cy) + T.translation[0]
        my = T.scale * (si * cx + c * cy) + T.translation[1]
        if not (grid.x_min <= mx < grid.x_max and grid.y_min <= my < grid.y_max):
            out[int(s)] = None
            continue
        h = int(math.floor((my - grid.y_min) / grid.pillar_size[1]) * grid.W
                + math.floor((mx - grid.x_min) / grid.pillar_size[0]))
        hc = centers[h]
        d = np.hypot(centers[:, 0] - hc[0], centers[:, 1] - hc[1])
        V = set(np.flatnonzero((d < eps) & tmask).tolist())
        out[int(s)] = (h if tmask[h] else -1, V) if V else None
    return out


def test_brute_force_agreement_small():
    g = GridSpec.square(2.0)
    rng = np.random.default_rng(9)
    pc = random_cloud(rng, 200, extent=2.5)
    T = RigidTransform(0.1, (0.4, -0.3, 0.0), 1.02)
    pill_t, pill_t1 = pillarize(pc, g), pillarize(PointCloud(T.apply(pc.points)), g)
    lab = correspondence_labels(g, pill_t, pill_t1, T)
    brute = _brute_labels(g, pill_t, pill_t1, T, default_epsilon(g))
    labeled = {int(q): m for m, q in enumerate(lab.query)}
    for s, b in brute.items():
        if b is None:
            assert s in set(lab.unlabeled.tolist())
            continue
        m = labeled[s]
        pos, w = lab.positives(m)
        assert lab.hard[m] == b[0] and set(pos.tolist()) == b[1]
        assert all(wi == (0.6 if c == b[0] else 0.1) for c, wi in zip(pos, w))


def test_four_neighbour_cross_with_default_epsilon():
    pts = []
    for cx, cy in [(0, 0), (0.25, 0), (-0.25, 0), (0, 0.25), (0, -0.25), (0.25, 0.25), (-0.25, -0.25)]:
        pts.append([cx + 0.1, cy + 0.1, 1.0])
    pc = PointCloud(pts)
    pill = pillarize(pc, GRID)
    lab = correspondence_labels(GRID, pill, pill, RigidTransform(), eps=1.1 * 0.25)
    origin = int(GRID.cell_of(np.array([[0.1, 0.1]]))[0])
    m = int(np.flatnonzero(lab.query == origin)[0])
    pos, w = lab.positives(m)
    # enumerate center distances around the cell and keep those below eps
    expect = set()
    for dr in (-1, 0, 1):
        for dq in (-1, 0, 1):
            if math.hypot(dr * 0.25, dq * 0.25) < 0.275:
                expect.add(origin + dr * 256 + dq)
    assert set(pos.tolist()) == expect and len(expect) == 5
    assert sorted(w.tolist()) == [0.1, 0.1, 0.1, 0.1, 0.6]


def test_hard_target_always_in_positive_set():
    pc = random_cloud(np.random.default_rng(3), 600)
    T = RigidTransform(0.05, (0.3, 0.2, 0.0))
    pill_t, pill_t1 = pillarize(pc, GRID), pillarize(PointCloud(T.apply(pc.points)), GRID)
    lab = correspondence_labels(GRID, pill_t, pill_t1, T)
    for m in range(len(lab)):
        if lab.hard[m] >= 0:
            assert lab.hard[m] in lab.positives(m)[0]


@given(st.floats(-0.17, 0.17), st.floats(-1, 1), st.floats(-1, 1))
def test_inverse_labels_round_trip(rot, tx, ty):
    g = GridSpec.square(4.0)
    pc = random_cloud(np.random.default_rng(0), 400, extent=4)
    T = RigidTransform(rot, (tx, ty, 0.0))
    pill_t, pill_t1 = pillarize(pc, g), pillarize(PointCloud(T.apply(pc.points)), g)
    fwd = correspondence_labels(g, pill_t, pill_t1, T)
    bwd = correspondence_labels(g, pill_t1, pill_t, T.inverse())
    back = dict(zip(bwd.query.tolist(), bwd.hard.tolist()))
    # nearest-cell mapping is not a bijection in general, so only check
    # pairs where the inverse lands on the source again or one column/row off
    centers = g.centers()
    for s, h in zip(fwd.query, fwd.hard):
        if h >= 0 and h in back and back[h] >= 0:
            assert np.max(np.abs(centers[back[h]] - centers[s])) <= 0.25 + 1e-9


@given(st.floats(0.05, 0.6), st.floats(0.0, 0.5))
def test_epsilon_monotone(eps, extra):
    g = GridSpec.square(3.0)
    pc = random_cloud(np.random.default_rng(1), 300, extent=3)
    T = RigidTransform(0.1, (0.2, 0.1, 0.0))
    pill_t, pill_t1 = pillarize(pc, g), pillarize(PointCloud(T.apply(pc.points)), g)
    small = correspondence_labels(g, pill_t, pill_t1, T, eps=eps)
    big = correspondence_labels(g, pill_t, pill_t1, T, eps=eps + extra)
    bq = {int(q): m for m, q in enumerate(big.query)}
    for m, q in enumerate(small.query):
        assert set(small.positives(m)[0].tolist()) <= set(big.positives(bq[int(q)])[0].tolist())


@given(st.integers(-4, 4), st.integers(-4, 4))
def test_inverse_labels_exact_for_whole_pillar_shifts(a, b):
    g = GridSpec.square(4.0)
    pc = random_cloud(np.random.default_rng(2), 300, extent=4)
    T = RigidTransform(0.0, (0.25 * a, 0.25 * b, 0.0))
    pill_t, pill_t1 = pillarize(pc, g), pillarize(PointCloud(T.apply(pc.points)), g)
    fwd = correspondence_labels(g, pill_t, pill_t1, T)
    bwd = correspondence_labels(g, pill_t1, pill_t, T.inverse())
    back = dict(zip(bwd.query.tolist(), bwd.hard.tolist()))
    for s, h in zip(fwd.query.tolist(), fwd.hard.tolist()):
        if h >= 0 and back.get(h, -1) >= 0:
            assert back[h] == s
