"""Point clouds, planar rigid transforms, augmentation pairs and synthetic scenes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np


@dataclass
class PointCloud:
    """Timestamped (N, 3) point set.

    ``flow`` holds per-point ground-truth displacement when known (synthetic
    frames). ``index`` records, for augmented clouds, which point of the
    original sample each row came from.
    """

    points: np.ndarray
    timestamp: float = 0.0
    flow: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.flow is not None:
            self.flow = np.asarray(self.flow, dtype=np.float64).reshape(-1, 3)
            if len(self.flow) != len(self.points):
                raise ValueError("flow length %d != point count %d" % (len(self.flow), len(self.points)))
        if self.index is not None:
            self.index = np.asarray(self.index, dtype=np.int64)

    def __len__(self):
        return len(self.points)

    def subset(self, keep) -> "PointCloud":
        return PointCloud(
            self.points[keep],
            self.timestamp,
            None if self.flow is None else self.flow[keep],
            None if self.index is None else self.index[keep],
        )


@dataclass(frozen=True)
class RigidTransform:
    """p -> scale * Rz(rotation) @ p + translation."""

    rotation: float = 0.0
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive, got %r" % (self.scale,))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def matrix(self) -> np.ndarray:
        """3x3 linear part (scale included)."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        if self.is_identity():
            return xyz.copy()
        return xyz @ self.matrix().T + np.asarray(self.translation)

    def apply_xy(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        r = self.scale * np.array([[c, -s], [s, c]])
        return xy @ r.T + np.asarray(self.translation[:2])

    def inverse(self) -> "RigidTransform":
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        tx, ty, tz = self.translation
        # R^T t / scale; z is unaffected by the planar rotation
        ix = -(c * tx + s * ty) / self.scale
        iy = -(-s * tx + c * ty) / self.scale
        return RigidTransform(-self.rotation, (ix, iy, -tz / self.scale), 1.0 / self.scale)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        t = self.apply(np.asarray(other.translation)[None])[0]
        return RigidTransform(self.rotation + other.rotation, tuple(t), self.scale * other.scale)

    def is_identity(self) -> bool:
        return self.rotation == 0.0 and self.scale == 1.0 and not any(self.translation)


def apply_transform(pc: PointCloud, T: RigidTransform) -> PointCloud:
    if len(pc) == 0:
        raise ValueError("cannot transform an empty point cloud")
    flow = None if pc.flow is None else pc.flow @ T.matrix().T
    return PointCloud(T.apply(pc.points), pc.timestamp, flow, pc.index)


@dataclass
class AugmentationSpec:
    max_shift: float = 3.0
    max_rotation: float = 0.17
    max_scale: float = 1.05
    max_jitter: float = 0.1
    removal_ratio: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.removal_ratio < 1.0:
            raise ValueError("removal_ratio must lie in [0, 1)")
        if min(self.max_shift, self.max_rotation, self.max_jitter, self.max_scale) < 0:
            raise ValueError("augmentation bounds must be non-negative")

    def scale_range(self) -> Tuple[float, float]:
        # max_scale <= 1 disables scaling so the all-zero spec is the identity
        if self.max_scale <= 1.0:
            return 1.0, 1.0
        return 1.0 / self.max_scale, self.max_scale


def sample_transform(spec: AugmentationSpec, rng: np.random.Generator) -> RigidTransform:
    lo, hi = spec.scale_range()
    rot = rng.uniform(-spec.max_rotation, spec.max_rotation)
    shift = rng.uniform(-spec.max_shift, spec.max_shift, size=2)
    scale = rng.uniform(lo, hi)
    return RigidTransform(float(rot), (float(shift[0]), float(shift[1]), 0.0), float(scale))


def _random_removal(n: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    n_drop = int(math.floor(ratio * n))
    if n_drop == 0:
        return np.arange(n)
    drop = rng.choice(n, size=n_drop, replace=False)
    keep = np.ones(n, dtype=bool)
    keep[drop] = False
    return np.flatnonzero(keep)


def generate_pair(pc: PointCloud, spec: AugmentationSpec, seed) -> Tuple[PointCloud, PointCloud, RigidTransform]:
    """Two views of one sample related by a known transform.

    The returned clouds carry ``index`` into ``pc`` so correspondences survive
    random removal. Jitter is noise on the second view only and is not part
    of the returned transform.
    """
    if len(pc) == 0:
        raise ValueError("generate_pair needs a non-empty cloud")
    rng = np.random.default_rng(seed)
    T = sample_transform(spec, rng)
    base = PointCloud(pc.points, pc.timestamp, None, np.arange(len(pc)))

    keep_t = _random_removal(len(pc), spec.removal_ratio, rng)
    keep_t1 = _random_removal(len(pc), spec.removal_ratio, rng)
    pc_t = base.subset(keep_t)

    moved = apply_transform(base, T).subset(keep_t1)
    if spec.max_jitter > 0:
        moved.points = moved.points + rng.uniform(-spec.max_jitter, spec.max_jitter, size=moved.points.shape)
    return pc_t, moved, T


def remove_ground(pc: PointCloud, z_threshold: float = 0.3) -> Tuple[PointCloud, np.ndarray]:
    ground = pc.points[:, 2] <= z_threshold
    return pc.subset(~ground), ground


# --- synthetic scenes ---------------------------------------------------------


@dataclass
class Box:
    center: Tuple[float, float] = (0.0, 0.0)
    size: Tuple[float, float, float] = (4.0, 2.0, 1.5)
    yaw: float = 0.0
    velocity: Tuple[float, float] = (0.0, 0.0)
    yaw_rate: float = 0.0
    clearance: float = 0.0  # gap between the ground and the body's lowest point

    def pose(self, t: float) -> RigidTransform:
        """Body-to-world transform at time t (constant twist in the world frame)."""
        return RigidTransform(
            self.yaw + self.yaw_rate * t,
            (self.center[0] + self.velocity[0] * t, self.center[1] + self.velocity[1] * t, 0.0),
        )


@dataclass
class SceneSpec:
    boxes: List[Box] = field(default_factory=list)
    extent: float = 8.0
    ground_height: float = 0.0
    ego_velocity: Tuple[float, float] = (0.0, 0.0)
    sensor_range: Optional[float] = None
    density: float = 40.0
    ground_density: float = 4.0
    seed: int = 0

    def __post_init__(self):
        self.boxes = [b if isinstance(b, Box) else Box(**b) for b in self.boxes]
        if not self.density > 0 or not self.ground_density >= 0:
            raise ValueError("point densities must be positive")
        for b in self.boxes:
            if not np.all(np.isfinite(b.velocity)) or not math.isfinite(b.yaw_rate):
                raise ValueError("box velocities must be finite")


def _box_surface(size: Sequence[float], density: float, rng: np.random.Generator) -> np.ndarray:
    """Points on the four sides and roof of an axis-aligned box, body frame, base at z=0."""
    if min(size) <= 0:
        raise ValueError("box size must be positive, got %r" % (tuple(size),))
    lx, ly, lz = size
    faces = [
        # (area, sampler)
        (lx * ly, lambda u, v: np.stack([(u - 0.5) * lx, (v - 0.5) * ly, np.full_like(u, lz)], 1)),
        (lx * lz, lambda u, v: np.stack([(u - 0.5) * lx, np.full_like(u, ly / 2), v * lz], 1)),
        (lx * lz, lambda u, v: np.stack([(u - 0.5) * lx, np.full_like(u, -ly / 2), v * lz], 1)),
        (ly * lz, lambda u, v: np.stack([np.full_like(u, lx / 2), (u - 0.5) * ly, v * lz], 1)),
        (ly * lz, lambda u, v: np.stack([np.full_like(u, -lx / 2), (u - 0.5) * ly, v * lz], 1)),
    ]
    out = []
    for area, fn in faces:
        n = max(1, int(round(area * density)))
        u, v = rng.random(n), rng.random(n)
        out.append(fn(u, v))
    return np.concatenate(out)


def _ego_position(spec: SceneSpec, t: float) -> np.ndarray:
    return np.asarray(spec.ego_velocity, dtype=np.float64) * t


def synth_scene(spec: SceneSpec, t: float, dt: float) -> PointCloud:
    """Sample a frame at time t in the ego-compensated (world) frame.

    Surface samples are drawn once per body from the spec seed, so the same
    body point appears in every frame; ``flow`` is its displacement to t+dt.
    With ``sensor_range`` set, only points within that radius of the moving
    ego position are returned.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(spec.seed)

    pts, flows = [], []
    if spec.ground_density > 0:
        n_side = max(1, int(round(2 * spec.extent * math.sqrt(spec.ground_density))))
        g = (np.arange(n_side) + 0.5) / n_side * 2 * spec.extent - spec.extent
        gx, gy = np.meshgrid(g, g)
        ground = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, spec.ground_height)], 1)
        ground[:, :2] += rng.uniform(-0.5, 0.5, size=(len(ground), 2)) * (2 * spec.extent / n_side)
        pts.append(ground)
        flows.append(np.zeros_like(ground))

    for box in spec.boxes:
        body = _box_surface(box.size, spec.density, rng)
        body[:, 2] += spec.ground_height + box.clearance
        now = box.pose(t).apply(body)
        nxt = box.pose(t + dt).apply(body)
        pts.append(now)
        flows.append(nxt - now)

    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    flow = np.concatenate(flows) if flows else np.zeros((0, 3))
    pc = PointCloud(points, t, flow, np.arange(len(points)))
    if spec.sensor_range is not None:
        d = np.linalg.norm(points[:, :2] - _ego_position(spec, t), axis=1)
        pc = pc.subset(d <= spec.sensor_range)
    return pc


def random_scene(rng: np.random.Generator, n_boxes=(3, 6), extent=8.0, speed=(0.0, 6.0),
                 yaw_rate=0.3, size_range=((0.8, 2.5), (0.6, 1.6), (0.6, 2.0)), clearance=0.4, **kw) -> SceneSpec:
    """Random layout of non-overlapping boxes inside [-extent, extent]^2.

    Bodies float ``clearance`` above the ground, like vehicles, so a plain
    height threshold separates ground from objects.
    """
    k = int(rng.integers(n_boxes[0], n_boxes[1] + 1))
    boxes: List[Box] = []
    placed: List[Tuple[np.ndarray, float]] = []
    tries = 0
    while len(boxes) < k and tries < 200:
        tries += 1
        size = tuple(float(rng.uniform(*r)) for r in size_range)
        radius = 0.5 * math.hypot(size[0], size[1])
        c = rng.uniform(-extent + 1.5 + radius, extent - 1.5 - radius, size=2)
        if any(np.linalg.norm(c - pc) < radius + r + 0.5 for pc, r in placed):
            continue
        heading = rng.uniform(-math.pi, math.pi)
        v = rng.uniform(*speed)
        boxes.append(Box(
            center=(float(c[0]), float(c[1])),
            size=size,
            yaw=float(heading + rng.normal(0, 0.2)),
            velocity=(float(v * math.cos(heading)), float(v * math.sin(heading))),
            yaw_rate=float(rng.uniform(-yaw_rate, yaw_rate)),
            clearance=clearance,
        ))
        placed.append((c, radius))
    kw.setdefault("seed", int(rng.integers(2**31)))
    return SceneSpec(boxes=boxes, extent=extent, **kw)


def scene_with(spec: SceneSpec, **changes) -> SceneSpec:
    return replace(spec, **changes)
