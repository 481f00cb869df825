"""Pillar feature encoder, convolutional context encoder and gated multi-frame fusion.

Feature maps are torch tensors laid out channels-first, ``(D, H, W)``; row r
of the grid runs along y and column q along x, matching ``GridSpec.cell_of``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Dict, NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .geometry import PointCloud, RigidTransform
from .pillargrid import GridSpec, Pillarization, pfe_point_features, pillarize


@dataclass
class ModelConfig:
    in_features: int = 8
    pfe_hidden: int = 32
    d_pfe: int = 32
    enc_width: int = 64
    d: int = 32
    gate_width: int = 32
    use_gmf: bool = True
    # feed the window-relative (x, y) columns to the PFE; off keeps the
    # network blind to where a pillar sits
    xy_inputs: bool = False

    @property
    def pfe_inputs(self) -> int:
        return self.in_features if self.xy_inputs else self.in_features - 2

    def to_dict(self):
        return asdict(self)


class ContrastMotionNet(nn.Module):
    """Parameter container; the forward functions below take it explicitly."""

    def __init__(self, cfg: ModelConfig = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.pfe = nn.Sequential(
            nn.Linear(cfg.pfe_inputs, cfg.pfe_hidden), nn.ReLU(),
            nn.Linear(cfg.pfe_hidden, cfg.d_pfe), nn.ReLU(),
        )
        self.encoder = nn.Sequential(
            nn.Conv2d(cfg.d_pfe, cfg.enc_width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(cfg.enc_width, cfg.enc_width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(cfg.enc_width, cfg.d, 3, padding=1), nn.ReLU(),
        )
        if cfg.use_gmf:
            self.gate = nn.Sequential(
                nn.Conv2d(cfg.d, cfg.gate_width, 3, padding=1), nn.ReLU(),
                nn.Conv2d(cfg.gate_width, cfg.gate_width, 3, padding=1), nn.ReLU(),
                nn.Conv2d(cfg.gate_width, 1, 1),  # per-cell linear
            )
        else:
            self.gate = None
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, (nn.Linear, nn.Conv2d)):
                    fan_in = mod.weight[0].numel()
                    bound = 1.0 / math.sqrt(fan_in)
                    mod.weight.copy_(torch.rand(mod.weight.shape, generator=g, dtype=torch.float64) * 2 * bound - bound)
                    mod.bias.zero_()

    @property
    def dtype(self):
        return next(self.parameters()).dtype


class Frame(NamedTuple):
    """Network-ready view of one point cloud."""

    pc: PointCloud
    pill: Pillarization
    features: np.ndarray  # (P, 8) per in-range point
    point_ids: np.ndarray  # (P,) row of each feature in pc


def prepare_frame(pc: PointCloud, grid: GridSpec) -> Frame:
    pill = pillarize(pc, grid)
    feats, ids = pfe_point_features(pc, pill)
    return Frame(pc, pill, feats, ids)


def pfe_forward(model: ContrastMotionNet, pill: Pillarization, point_features, point_ids=None) -> torch.Tensor:
    """Shared per-point MLP followed by a per-pillar max; empty pillars are zero."""
    grid = pill.grid
    if point_ids is None:
        point_ids = np.flatnonzero(pill.point_cell >= 0)
    x = torch.as_tensor(point_features, dtype=model.dtype)
    if not model.cfg.xy_inputs:
        x = x[:, 2:]
    h = model.pfe(x)
    cell = torch.as_tensor(pill.point_cell[point_ids], dtype=torch.int64)
    out = h.new_zeros((grid.n_cells, h.shape[1]))
    if len(cell):
        out = out.scatter_reduce(0, cell[:, None].expand_as(h), h, reduce="amax", include_self=False)
    return out.T.reshape(h.shape[1], grid.H, grid.W)


def encoder_forward(model: ContrastMotionNet, F: torch.Tensor) -> torch.Tensor:
    if F.shape[0] != model.cfg.d_pfe:
        raise ValueError("encoder expects %d channels, got %d" % (model.cfg.d_pfe, F.shape[0]))
    return model.encoder(F[None])[0]


def warp_index(ego: RigidTransform, grid: GridSpec) -> np.ndarray:
    """Source cell for every output cell under ``ego`` (-1 when it falls off the grid)."""
    return grid.cell_of(ego.inverse().apply_xy(grid.centers()))


def align_to_frame(F: torch.Tensor, ego: RigidTransform, grid: GridSpec) -> torch.Tensor:
    """Resample F (frame t+1) into frame t; ``ego`` maps frame t+1 coordinates to frame t."""
    if ego.is_identity():
        return F
    src = torch.as_tensor(warp_index(ego, grid))
    flat = F.reshape(F.shape[0], -1)
    out = flat[:, src.clamp(min=0)] * (src >= 0).to(F.dtype)
    return out.reshape(F.shape)


def gate_map(model: ContrastMotionNet, F: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(model.gate(F[None])[0, 0])


def gmf(model: ContrastMotionNet, F_t: torch.Tensor, F_t1_aligned: torch.Tensor):
    """Gated cross-frame fusion on two maps sharing one frame.

    Returns ``(z_t, z_t1, m_t, m_t1)``. Without a gate network the block is
    bypassed and the gates are None.
    """
    if F_t.shape != F_t1_aligned.shape:
        raise ValueError("feature maps differ in shape: %s vs %s" % (tuple(F_t.shape), tuple(F_t1_aligned.shape)))
    if model.gate is None:
        return F_t, F_t1_aligned, None, None
    m_t = gate_map(model, F_t)
    m_t1 = gate_map(model, F_t1_aligned)
    z_t = F_t + m_t1 * F_t1_aligned
    z_t1 = F_t1_aligned + m_t * F_t
    return z_t, z_t1, m_t, m_t1


def relu_embed(z: torch.Tensor) -> torch.Tensor:
    return torch.relu(z)


class PairOutput(NamedTuple):
    z_t: torch.Tensor
    z_t1: torch.Tensor
    F_t: torch.Tensor
    F_t1: torch.Tensor
    m_t: Optional[torch.Tensor]
    m_t1: Optional[torch.Tensor]


def encode(model: ContrastMotionNet, frame: Frame) -> torch.Tensor:
    return encoder_forward(model, pfe_forward(model, frame.pill, frame.features, frame.point_ids))


def forward_pair(model: ContrastMotionNet, frame_t: Frame, frame_t1: Frame,
                 ego: Optional[RigidTransform] = None) -> PairOutput:
    """Embeddings for both frames, each kept on its own grid.

    With a non-identity ``ego`` (frame t+1 -> frame t) each frame is fused
    with the other frame's features warped into its own coordinates.
    """
    F_t = encode(model, frame_t)
    F_t1 = encode(model, frame_t1)
    if ego is None or ego.is_identity() or model.gate is None:
        z_t, z_t1, m_t, m_t1 = gmf(model, F_t, F_t1)
    else:
        grid = frame_t.pill.grid
        z_t, _, _, m_t1 = gmf(model, F_t, align_to_frame(F_t1, ego, grid))
        z_t1, _, _, m_t = gmf(model, F_t1, align_to_frame(F_t, ego.inverse(), grid))
    return PairOutput(relu_embed(z_t), relu_embed(z_t1), F_t, F_t1, m_t, m_t1)


def backward(loss: torch.Tensor, model: ContrastMotionNet) -> Dict[str, torch.Tensor]:
    """d(loss)/d(param) for every named parameter."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise RuntimeError("backward needs a loss produced by a recorded forward pass")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}
