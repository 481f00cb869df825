"""Soft Discriminative Loss, the PointInfoNCE baseline and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict, field
from typing import Callable, Iterable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch

from .association import PatchLayout
from .geometry import AugmentationSpec, PointCloud, generate_pair, remove_ground
from .network import ContrastMotionNet, Frame, forward_pair, prepare_frame
from .pillargrid import CorrespondenceLabels, GridSpec, correspondence_labels, default_epsilon

log = logging.getLogger(__name__)

LOSS_KINDS = ("sd", "pointinfonce")


@dataclass
class LossConfig:
    kind: str = "sd"
    eps: Optional[float] = None  # None -> 1.1 x pillar side
    w_self: float = 0.6
    w_neighbor: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 1
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError("loss kind must be one of %s, got %r" % (LOSS_KINDS, self.kind))
        if self.lr < 0 or self.weight_decay < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid optimizer settings in %r" % (self,))

    def to_dict(self):
        return asdict(self)


class PatchTerms(NamedTuple):
    queries: np.ndarray  # flat query cells
    keys: np.ndarray  # flat non-empty key cells, ascending
    rows: np.ndarray  # positive term -> row in queries
    cols: np.ndarray  # positive term -> column in keys
    weights: np.ndarray


@dataclass
class LossPlan:
    """Index bookkeeping for one labeled pair, independent of the features."""

    patches: List[PatchTerms]
    n_queries: int
    excluded: int = 0


def plan_loss(labels: CorrespondenceLabels, layout: PatchLayout, kind: str = "sd") -> LossPlan:
    """Group labeled queries by query patch and restrict positives to each key patch.

    A query is dropped (and counted in ``excluded``) when its key patch has no
    occupied pillar, its hard target lies outside the key patch, or no
    positive survives the restriction. ``kind="pointinfonce"`` keeps only the
    hard target with unit weight.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(kind)
    patch_of = layout.patch_of(labels.query) if len(labels) else np.zeros(0, dtype=np.int64)
    pos_by_owner = [[] for _ in range(len(labels))]
    for o, c, w in zip(labels.pos_owner, labels.pos_cell, labels.pos_weight):
        pos_by_owner[o].append((int(c), float(w)))

    patches, n_q, excluded = [], 0, 0
    for p in np.unique(patch_of):
        keys = layout.key_cells(p)
        keys = np.sort(keys[labels.key_mask[keys]])
        if not len(keys):
            excluded += int((patch_of == p).sum())
            continue
        col_of = {int(k): i for i, k in enumerate(keys)}
        queries, rows, cols, wts = [], [], [], []
        for m in np.flatnonzero(patch_of == p):
            h = int(labels.hard[m])
            if h >= 0 and h not in col_of:
                excluded += 1
                continue
            if kind == "pointinfonce":
                terms = [(h, 1.0)] if h >= 0 else []
            else:
                terms = [(c, w) for c, w in pos_by_owner[m] if c in col_of]
            if not terms:
                excluded += 1
                continue
            r = len(queries)
            queries.append(int(labels.query[m]))
            for c, w in terms:
                rows.append(r)
                cols.append(col_of[c])
                wts.append(w)
        if queries:
            patches.append(PatchTerms(np.asarray(queries), keys, np.asarray(rows), np.asarray(cols), np.asarray(wts)))
            n_q += len(queries)
    return LossPlan(patches, n_q, excluded)


def _contrastive(z_t: torch.Tensor, z_t1: torch.Tensor, plan: LossPlan) -> torch.Tensor:
    Zt = z_t.reshape(z_t.shape[0], -1)
    Zt1 = z_t1.reshape(z_t1.shape[0], -1)
    total = z_t.sum() * 0.0
    if plan.n_queries == 0:
        return total
    for pt in plan.patches:
        q = torch.as_tensor(pt.queries)
        k = torch.as_tensor(pt.keys)
        logits = Zt[:, q].T @ Zt1[:, k]
        logp = torch.log_softmax(logits, dim=1)
        w = torch.as_tensor(pt.weights, dtype=logp.dtype)
        total = total - (w * logp[torch.as_tensor(pt.rows), torch.as_tensor(pt.cols)]).sum()
    return total / plan.n_queries


def sd_loss(z_t, z_t1, labels: CorrespondenceLabels, layout: PatchLayout, plan: LossPlan = None) -> torch.Tensor:
    """Soft positive-set contrastive loss averaged over labeled queries.

    Each query's softmax runs over the occupied pillars of its key patch;
    positives are the labeled neighbourhood of the mapped target with weights
    from ``labels``.
    """
    return _contrastive(z_t, z_t1, plan or plan_loss(labels, layout, "sd"))


def pointinfonce_loss(z_t, z_t1, labels: CorrespondenceLabels, layout: PatchLayout, plan: LossPlan = None) -> torch.Tensor:
    return _contrastive(z_t, z_t1, plan or plan_loss(labels, layout, "pointinfonce"))


# --- training -----------------------------------------------------------------


class TrainingSample(NamedTuple):
    frame_t: Frame
    frame_t1: Frame
    labels: CorrespondenceLabels
    plan: LossPlan


def make_sample(pc: PointCloud, aug: AugmentationSpec, grid: GridSpec, layout: PatchLayout,
                seed: int, kind: str = "sd", eps: Optional[float] = None,
                ground_threshold: Optional[float] = 0.3, w_self: float = 0.6,
                w_neighbor: float = 0.1) -> TrainingSample:
    """Augmented pair with labels and a loss plan; ground is removed first when a threshold is given."""
    if ground_threshold is not None:
        pc, _ = remove_ground(pc, ground_threshold)
    pc_t, pc_t1, T = generate_pair(pc, aug, seed)
    fr_t, fr_t1 = prepare_frame(pc_t, grid), prepare_frame(pc_t1, grid)
    labels = correspondence_labels(grid, fr_t.pill, fr_t1.pill, T, default_epsilon(grid) if eps is None else eps,
                                   w_self, w_neighbor)
    return TrainingSample(fr_t, fr_t1, labels, plan_loss(labels, layout, kind))


class NumericFailure(RuntimeError):
    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass
class TrainResult:
    model: ContrastMotionNet
    step_losses: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    steps: int = 0


def sample_loss(model: ContrastMotionNet, sample: TrainingSample) -> torch.Tensor:
    out = forward_pair(model, sample.frame_t, sample.frame_t1)
    return _contrastive(out.z_t, out.z_t1, sample.plan)


def train(model: ContrastMotionNet, data: Union[Sequence[TrainingSample], Callable[[int], Iterable[TrainingSample]]],
          cfg: LossConfig, on_step: Callable[[int, float], None] = None) -> TrainResult:
    """AdamW over batches of pre-labeled samples.

    ``data`` is either a sequence replayed every epoch or a callable
    ``epoch -> iterable`` producing fresh samples.
    """
    torch.manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                            betas=(0.9, 0.999), eps=1e-8)
    result = TrainResult(model)
    for epoch in range(cfg.epochs):
        stream = data(epoch) if callable(data) else data
        batch, losses = [], []
        for sample in stream:
            batch.append(sample)
            if len(batch) == cfg.batch_size:
                losses.append(_step(model, opt, batch, result, on_step))
                batch = []
        if batch:
            losses.append(_step(model, opt, batch, result, on_step))
        result.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("epoch %d mean loss %.5f", epoch, result.epoch_losses[-1])
    return result


def _step(model, opt, batch, result: TrainResult, on_step) -> float:
    opt.zero_grad()
    loss = sum(sample_loss(model, s) for s in batch) / len(batch)
    value = float(loss.detach())
    if not math.isfinite(value):
        state = {
            "step": result.steps,
            "loss": value,
            "recent_losses": result.step_losses[-10:],
            "param_norms": {n: float(p.detach().norm()) for n, p in model.named_parameters()},
        }
        raise NumericFailure("non-finite loss at step %d" % result.steps, state)
    loss.backward()
    opt.step()
    result.steps += 1
    result.step_losses.append(value)
    if on_step is not None:
        on_step(result.steps, value)
    return value
