"""Inference on a pair of frames: embeddings -> association -> point flow."""
from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np
import torch

from .association import AssociationResult, FlowField, PatchLayout, associate, chamfer_refine, pillar_flow, scatter_to_points
from .geometry import PointCloud, RigidTransform, remove_ground
from .network import ContrastMotionNet, forward_pair, prepare_frame
from .pillargrid import GridSpec, Pillarization, pillarize


class Inference(NamedTuple):
    point_flow: np.ndarray  # (N_t, 3) for every point of the input frame t
    flow: FlowField
    assoc: AssociationResult
    pill_t: Pillarization  # of the network input (foreground when masked)
    pill_t1: Pillarization
    ground_mask: Optional[np.ndarray]


@torch.no_grad()
def infer(model: ContrastMotionNet, pc_t: PointCloud, pc_t1: PointCloud, grid: GridSpec, layout: PatchLayout,
          ground_threshold: Optional[float] = 0.3, ego: Optional[RigidTransform] = None,
          refine: bool = False, seed: int = 0) -> Inference:
    ground = None
    net_t, net_t1 = pc_t, pc_t1
    if ground_threshold is not None:
        net_t, ground = remove_ground(pc_t, ground_threshold)
        net_t1, _ = remove_ground(pc_t1, ground_threshold)
    fr_t, fr_t1 = prepare_frame(net_t, grid), prepare_frame(net_t1, grid)
    out = forward_pair(model, fr_t, fr_t1, ego)
    assoc = associate(out.z_t, out.z_t1, fr_t.pill, fr_t1.pill, layout)
    flow = pillar_flow(assoc, grid)

    full = pillarize(pc_t, grid)
    if refine:
        # refinement works on the network's own clouds, then is spread back over pc_t
        sub = chamfer_refine(net_t, net_t1, assoc, fr_t.pill, fr_t1.pill, seed=seed)
        point_flow = scatter_to_points(flow, full, ground)
        keep = np.flatnonzero(~ground) if ground is not None else np.arange(len(pc_t))
        point_flow[keep] = sub
    else:
        point_flow = scatter_to_points(flow, full, ground)
    return Inference(point_flow, flow, assoc, fr_t.pill, fr_t1.pill, ground)


def gt_pillar_displacement(pc: PointCloud, pill: Pillarization) -> np.ndarray:
    """Mean ground-truth xy flow of the points in each cell (zeros for empty cells)."""
    grid = pill.grid
    inside = pill.point_cell >= 0
    cell = pill.point_cell[inside]
    count = np.bincount(cell, minlength=grid.n_cells).astype(np.float64)
    out = np.zeros((grid.n_cells, 2))
    for k in range(2):
        out[:, k] = np.bincount(cell, weights=pc.flow[inside, k], minlength=grid.n_cells)
    nz = count > 0
    out[nz] /= count[nz, None]
    return out
