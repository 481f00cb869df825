"""Scene-flow metrics, speed-group motion metrics and constant-velocity extrapolation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

STATIC, SLOW, FAST = 0, 1, 2
GROUP_NAMES = ("static", "slow", "fast")


@dataclass
class GroupStats:
    mean: float
    median: float
    count: int


@dataclass
class MetricsReport:
    epe3d: Optional[float] = None
    acc3ds: Optional[float] = None
    acc3dr: Optional[float] = None
    outliers3d: Optional[float] = None
    n_points: int = 0
    groups: Dict[str, GroupStats] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {}
        if self.epe3d is not None:
            out.update(EPE3D=self.epe3d, Acc3DS=self.acc3ds, Acc3DR=self.acc3dr,
                       Outliers3D=self.outliers3d, n_points=self.n_points)
        for name in GROUP_NAMES:
            g = self.groups.get(name)
            if g is not None:
                out.update({f"{name}_mean": g.mean, f"{name}_median": g.median, f"{name}_count": g.count})
        return out

    def to_text(self) -> str:
        return "\n".join(f"{k} = {_fmt(v)}" for k, v in self.as_dict().items()) + "\n"

    def sceneflow_csv(self) -> str:
        return "EPE3D,Acc3DS,Acc3DR,Outliers3D\n%s,%s,%s,%s\n" % tuple(
            _fmt(v) for v in (self.epe3d, self.acc3ds, self.acc3dr, self.outliers3d))

    def motion_csv(self) -> str:
        head, row = [], []
        for name in GROUP_NAMES:
            g = self.groups.get(name)
            head += [f"{name}_mean", f"{name}_median"]
            row += ["" if g is None else _fmt(g.mean), "" if g is None else _fmt(g.median)]
        return ",".join(head) + "\n" + ",".join(row) + "\n"


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _check_pair(pred, gt, width) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, width)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, width)
    if len(pred) != len(gt):
        raise ValueError("prediction has %d rows, ground truth %d" % (len(pred), len(gt)))
    if not len(gt):
        raise ValueError("metrics need at least one element")
    return pred, gt


def relative_error(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """||pred - gt|| / ||gt||; 0 where both vanish, +inf where only gt does."""
    err = np.linalg.norm(pred - gt, axis=1)
    norm = np.linalg.norm(gt, axis=1)
    rel = np.full_like(err, np.inf)
    nz = norm > 0
    rel[nz] = err[nz] / norm[nz]
    rel[~nz & (err == 0)] = 0.0
    return rel


def scene_flow_metrics(pred, gt) -> MetricsReport:
    pred, gt = _check_pair(pred, gt, 3)
    err = np.linalg.norm(pred - gt, axis=1)
    rel = relative_error(pred, gt)
    return MetricsReport(
        epe3d=float(err.mean()),
        acc3ds=float(np.mean((err < 0.05) | (rel < 0.05))),
        acc3dr=float(np.mean((err < 0.1) | (rel < 0.1))),
        outliers3d=float(np.mean((err > 0.3) | (rel > 0.1))),
        n_points=len(err),
    )


def speed_groups(gt_displacement, dt: float, static_threshold: float = 0.2, fast_threshold: float = 5.0) -> np.ndarray:
    """STATIC below ``static_threshold`` m/s, SLOW up to and including ``fast_threshold``, FAST beyond."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    d = np.asarray(gt_displacement, dtype=np.float64)
    d = d.reshape(len(d), -1) if d.size else d.reshape(0, 2)
    speed = np.linalg.norm(d, axis=1) / dt
    return np.where(speed < static_threshold, STATIC, np.where(speed <= fast_threshold, SLOW, FAST))


def extrapolate_motion(past_a, past_b, frame_dt: float = 0.5, horizon: float = 1.0) -> np.ndarray:
    """Constant velocity from the mean of two past per-frame displacements."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    velocity = (np.asarray(past_a, dtype=np.float64) + np.asarray(past_b, dtype=np.float64)) / 2.0 / frame_dt
    return velocity * horizon


def motion_prediction_metrics(pred_future, gt_future, groups) -> MetricsReport:
    """Mean / median L2 error per speed group; empty groups are left out."""
    pred, gt = _check_pair(pred_future, gt_future, np.asarray(gt_future).shape[-1])
    groups = np.asarray(groups)
    err = np.linalg.norm(pred - gt, axis=1)
    report = MetricsReport()
    for gid, name in enumerate(GROUP_NAMES):
        sel = groups == gid
        if sel.any():
            report.groups[name] = GroupStats(float(err[sel].mean()), float(np.median(err[sel])), int(sel.sum()))
    return report
