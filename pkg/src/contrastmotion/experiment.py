"""Desk-scale end-to-end experiment on synthetic box scenes."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional

import numpy as np

from .association import build_layout
from .contrast import LossConfig, TrainResult, make_sample, train
from .evalkit import scene_flow_metrics
from .geometry import AugmentationSpec, random_scene, synth_scene
from .network import ContrastMotionNet, ModelConfig
from .pillargrid import GridSpec
from .pipeline import gt_pillar_displacement, infer

log = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    half_extent: float = 8.0  # 64 x 64 pillars at 0.25 m
    pillar: float = 0.25
    patch: int = 16
    alpha: float = 2.0
    steps: int = 1200
    batch_size: int = 1
    n_boxes: tuple = (3, 6)
    max_speed: float = 5.0
    dt: float = 0.2
    aug: AugmentationSpec = field(default_factory=lambda: AugmentationSpec(max_shift=1.0))
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ground_threshold: Optional[float] = 0.3
    n_eval: int = 8
    moving_speed: float = 0.2  # m/s; pillars faster than this count as moving
    refine: bool = False  # nearest-point refinement for the per-point flow
    seed: int = 0

    def grid(self) -> GridSpec:
        return GridSpec.square(self.half_extent, self.pillar)


def _scene(cfg: ToyConfig, rng):
    return random_scene(rng, n_boxes=cfg.n_boxes, extent=cfg.half_extent, speed=(0.0, cfg.max_speed))


def training_stream(cfg: ToyConfig):
    grid = cfg.grid()
    layout = build_layout(grid, cfg.patch, cfg.alpha)

    def epoch(e):
        rng = np.random.default_rng([cfg.seed, 1, e])
        for i in range(cfg.steps * cfg.batch_size):
            pc = synth_scene(_scene(cfg, rng), 0.0, cfg.dt)
            yield make_sample(pc, cfg.aug, grid, layout, seed=int(rng.integers(2**31)), kind=cfg.loss.kind,
                              eps=cfg.loss.eps, ground_threshold=cfg.ground_threshold,
                              w_self=cfg.loss.w_self, w_neighbor=cfg.loss.w_neighbor)
    return epoch


def evaluate(model: ContrastMotionNet, cfg: ToyConfig, seed: int = 1234) -> Dict[str, float]:
    grid = cfg.grid()
    layout = build_layout(grid, cfg.patch, cfg.alpha)
    rng = np.random.default_rng(seed)
    moving_err, static_err = [], []
    preds, gts = [], []
    for _ in range(cfg.n_eval):
        spec = _scene(cfg, rng)
        pc_t = synth_scene(spec, 0.0, cfg.dt)
        pc_t1 = synth_scene(spec, cfg.dt, cfg.dt)
        res = infer(model, pc_t, pc_t1, grid, layout, cfg.ground_threshold, refine=cfg.refine)
        preds.append(res.point_flow)
        gts.append(pc_t.flow)
        gt_disp = gt_pillar_displacement(pc_t.subset(~res.ground_mask) if res.ground_mask is not None else pc_t,
                                         res.pill_t)
        cells = res.pill_t.nonempty
        err = np.linalg.norm(res.flow.pillar[cells] - gt_disp[cells], axis=1)
        moving = np.linalg.norm(gt_disp[cells], axis=1) / cfg.dt > cfg.moving_speed
        moving_err.append(err[moving])
        static_err.append(err[~moving])
    pred, gt = np.concatenate(preds), np.concatenate(gts)
    m = scene_flow_metrics(pred, gt)
    zero = scene_flow_metrics(np.zeros_like(gt), gt)
    mov = np.concatenate(moving_err)
    sta = np.concatenate(static_err)
    return {
        "EPE3D": m.epe3d, "Acc3DS": m.acc3ds, "Acc3DR": m.acc3dr, "Outliers3D": m.outliers3d,
        "zero_EPE3D": zero.epe3d,
        "moving_pillar_error_m": float(mov.mean()) if len(mov) else float("nan"),
        "moving_pillar_error_widths": float(mov.mean() / cfg.pillar) if len(mov) else float("nan"),
        "static_pillar_error_m": float(sta.mean()) if len(sta) else float("nan"),
        "n_moving_pillars": int(len(mov)),
    }


def run_toy(cfg: ToyConfig, progress: bool = False) -> Dict[str, object]:
    t0 = time.time()
    model = ContrastMotionNet(cfg.model, seed=cfg.seed)
    before = evaluate(model, cfg)
    loss_cfg = LossConfig(**{**asdict(cfg.loss), "epochs": 1, "batch_size": cfg.batch_size, "seed": cfg.seed})

    def on_step(step, value):
        if progress and step % 100 == 0:
            log.info("step %d loss %.4f (%.0fs)", step, value, time.time() - t0)

    result: TrainResult = train(model, training_stream(cfg), loss_cfg, on_step)
    after = evaluate(model, cfg)
    return {"before": before, "after": after, "losses": result.step_losses,
            "seconds": time.time() - t0, "model": model}
