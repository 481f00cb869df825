"""contrastmotion command line: generate | train | infer | eval | probmap.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from .association import build_layout
from .config import ABLATIONS, RunConfig, SceneGenConfig, resolve_seed
from .contrast import NumericFailure, make_sample, train
from .evalkit import motion_prediction_metrics, scene_flow_metrics, speed_groups
from .geometry import SceneSpec, random_scene, synth_scene
from .network import ContrastMotionNet, ModelConfig
from .pipeline import infer

log = logging.getLogger("contrastmotion")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


# --- config assembly ----------------------------------------------------------


def _build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    explicit = {}
    if getattr(args, "loss", None):
        explicit["kind"] = args.loss
    if getattr(args, "gmf", None) is not None:
        explicit["gmf"] = args.gmf
    if getattr(args, "ground_mask", None) is not None:
        explicit["ground"] = args.ground_mask

    kind, ground, gmf = cfg.loss.kind, cfg.use_ground_mask, cfg.use_gmf
    if getattr(args, "ablation", None):
        kind, ground, gmf = ABLATIONS[args.ablation]
        clash = [k for k, v in explicit.items() if v != {"kind": kind, "ground": ground, "gmf": gmf}[k]]
        if clash:
            raise UsageError("--ablation %s contradicts explicit %s" % (args.ablation, ", ".join(clash)))
    kind = explicit.get("kind", kind)
    ground = explicit.get("ground", ground)
    gmf = explicit.get("gmf", gmf)

    loss = dataclasses.replace(cfg.loss, kind=kind)
    for name in ("epochs", "lr"):
        if getattr(args, name, None) is not None:
            loss = dataclasses.replace(loss, **{name: getattr(args, name)})
    cfg.loss = loss
    cfg.use_ground_mask = ground
    cfg.use_gmf = gmf
    cfg.model = dataclasses.replace(cfg.model, use_gmf=gmf)
    if getattr(args, "patch", None):
        cfg.patch = args.patch
    cfg.seed = resolve_seed(cfg, getattr(args, "seed", None))
    return cfg


def _add_common(p, ablation=False):
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help="overrides CONTRASTMOTION_SEED and the config seed")
    p.add_argument("--patch", type=int, help="query patch side s (pillars)")
    if ablation:
        p.add_argument("--ablation", choices=sorted(ABLATIONS), help="Table-4 style preset")
        p.add_argument("--loss", choices=["sd", "pointinfonce"])
        g = p.add_mutually_exclusive_group()
        g.add_argument("--gmf", dest="gmf", action="store_true", default=None)
        g.add_argument("--no-gmf", dest="gmf", action="store_false")
        g = p.add_mutually_exclusive_group()
        g.add_argument("--ground-mask", dest="ground_mask", action="store_true", default=None)
        g.add_argument("--no-ground-mask", dest="ground_mask", action="store_false")


# --- commands -----------------------------------------------------------------


def _scene_spec(cfg: RunConfig) -> SceneSpec:
    sc = cfg.scene
    if sc.spec_path:
        return SceneSpec(**json.loads(Path(sc.spec_path).read_text()))
    rng = np.random.default_rng([cfg.seed, 7])
    return random_scene(rng, n_boxes=sc.n_boxes, extent=cfg.grid.x_max, speed=(0.0, sc.max_speed))


def cmd_generate(args) -> int:
    cfg = _build_config(args)
    if args.frames is not None:
        cfg.scene.frames = args.frames
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = _scene_spec(cfg)
    names = []
    for k in range(cfg.scene.frames):
        pc = synth_scene(spec, k * cfg.scene.dt, cfg.scene.dt)
        name = "frame_%04d.pcv1" % k
        io.write_pcv1(out / name, pc)
        names.append({"file": name, "timestamp": k * cfg.scene.dt})
    manifest = {"dt": cfg.scene.dt, "seed": cfg.seed, "frames": names,
                "scene": dataclasses.asdict(spec)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print("wrote %d frames to %s" % (len(names), out))
    return 0


def _read_frames(directory):
    d = Path(directory)
    man_path = d / "manifest.json"
    if not man_path.is_file():
        raise FileNotFoundError("no scene manifest in %s" % d)
    man = json.loads(man_path.read_text())
    return [io.read_pcv1(d / f["file"], f["timestamp"]) for f in man["frames"]]


def cmd_train(args) -> int:
    cfg = _build_config(args)
    torch.manual_seed(cfg.seed)
    frames = _read_frames(args.scenes)
    layout = build_layout(cfg.grid, cfg.patch, cfg.alpha)
    thr = cfg.ground_threshold if cfg.use_ground_mask else None
    samples = [
        make_sample(pc, cfg.aug, cfg.grid, layout, seed=[cfg.seed, i], kind=cfg.loss.kind, eps=cfg.loss.eps,
                    ground_threshold=thr, w_self=cfg.loss.w_self, w_neighbor=cfg.loss.w_neighbor)
        for i, pc in enumerate(frames)
    ]
    model = ContrastMotionNet(cfg.model, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["step,loss"]
    try:
        res = train(model, samples, dataclasses.replace(cfg.loss, seed=cfg.seed),
                    on_step=lambda s, v: rows.append("%d,%r" % (s, v)))
    except NumericFailure as exc:
        (out / "failure.json").write_text(json.dumps(exc.state, indent=2) + "\n")
        print("error: %s (state written to %s)" % (exc, out / "failure.json"), file=sys.stderr)
        return EXIT_NUMERIC
    io.save_checkpoint(out, model, {
        "model": cfg.model.to_dict(), "seed": cfg.seed, "steps": res.steps,
        "config": cfg.to_dict(), "ablation": cfg.ablation_row(),
    })
    (out / "loss.csv").write_text("\n".join(rows) + "\n")
    print("trained %d steps; checkpoint in %s" % (res.steps, out))
    return 0


def _load_model(cfg: RunConfig, path) -> ContrastMotionNet:
    man, params = io.load_checkpoint(path)
    mcfg = ModelConfig(**man["model"])
    if (mcfg.d, mcfg.d_pfe) != (cfg.model.d, cfg.model.d_pfe):
        raise io.FormatError("checkpoint dims (d=%d, d_pfe=%d) differ from config (d=%d, d_pfe=%d)"
                             % (mcfg.d, mcfg.d_pfe, cfg.model.d, cfg.model.d_pfe))
    return io.load_state(ContrastMotionNet(mcfg), params)


def _run_inference(args, cfg):
    if not Path(args.checkpoint, "manifest.json").is_file():
        raise UsageError("checkpoint not found: %s" % args.checkpoint)
    model = _load_model(cfg, args.checkpoint)
    pc_t, pc_t1 = io.read_pcv1(args.frame_t), io.read_pcv1(args.frame_t1)
    layout = build_layout(cfg.grid, cfg.patch, cfg.alpha)
    thr = cfg.ground_threshold if cfg.use_ground_mask else None
    return infer(model, pc_t, pc_t1, cfg.grid, layout, thr, refine=getattr(args, "refine", False)), pc_t, layout


def _probmap_cells(args, cfg):
    cells = list(args.probmap or [])
    for xy in getattr(args, "at", None) or []:
        x, y = (float(v) for v in xy.split(","))
        c = int(cfg.grid.cell_of(np.array([[x, y]]))[0])
        if c < 0:
            raise ValueError("point (%g, %g) lies outside the grid" % (x, y))
        cells.append(c)
    return cells


def _write_probmaps(res, layout, cells, out: Path, png=False):
    for cell in cells:
        grid = io.probmap_grid(res.assoc, layout, cell)
        rect = layout.key_rects[res.assoc.patch[res.assoc.row(cell)]]
        (out / ("probmap_%d.txt" % cell)).write_text(io.probmap_text(grid, cell, rect))
        if png:
            io.save_probmap_png(grid, out / ("probmap_%d.png" % cell))


def cmd_infer(args) -> int:
    cfg = _build_config(args)
    res, pc_t, layout = _run_inference(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_pcv1(out / "flow.pcv1", points=pc_t.points, flow=res.point_flow)
    centers = cfg.grid.centers().tolist()
    flows = res.flow.pillar.tolist()
    lines = ["cell,cx,cy,dx,dy,matched,max_prob"]
    prob = dict(zip(res.assoc.query.tolist(), res.assoc.max_prob.tolist()))
    for cell in res.pill_t.nonempty:
        cell = int(cell)
        lines.append("%d,%r,%r,%r,%r,%d,%r" % (cell, centers[cell][0], centers[cell][1], flows[cell][0],
                                               flows[cell][1], res.flow.matched[cell], prob.get(cell, 0.0)))
    (out / "pillar_flow.csv").write_text("\n".join(lines) + "\n")
    _write_probmaps(res, layout, _probmap_cells(args, cfg), out, args.png)
    print("flow for %d points written to %s" % (len(pc_t), out))
    return 0


def cmd_probmap(args) -> int:
    cfg = _build_config(args)
    cells = _probmap_cells(args, cfg)
    if not cells:
        raise UsageError("probmap needs --probmap CELL or --at X,Y")
    res, _, layout = _run_inference(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_probmaps(res, layout, cells, out, args.png)
    return 0


def cmd_eval(args) -> int:
    pred_fields, pred = io.read_pcv1_raw(args.pred)
    gt_fields, gt = io.read_pcv1_raw(args.gt)
    if pred_fields[3:6] != list(io.FLOW_FIELDS) or gt_fields[3:6] != list(io.FLOW_FIELDS):
        raise io.FormatError("both files need fx fy fz fields")
    p, g = pred[:, 3:6].astype(np.float64), gt[:, 3:6].astype(np.float64)
    if len(p) != len(g):
        raise io.FormatError("prediction has %d rows, ground truth %d" % (len(p), len(g)))
    if args.mode == "sceneflow":
        report = scene_flow_metrics(p, g)
        table = report.sceneflow_csv()
    else:
        groups = speed_groups(g[:, :2], args.horizon, args.static_threshold)
        report = motion_prediction_metrics(p[:, :2], g[:, :2], groups)
        table = report.motion_csv()
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        (out / "report.csv").write_text(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contrastmotion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic frame sequence with ground-truth flow")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="contrastive training on augmented pairs of generated frames")
    _add_common(p, ablation=True)
    p.add_argument("--scenes", required=True, help="directory written by generate")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    for name, func, hlp in (("infer", cmd_infer, "flow for a frame pair"),
                            ("probmap", cmd_probmap, "correspondence probability maps")):
        p = sub.add_parser(name, help=hlp)
        _add_common(p, ablation=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--frame-t", required=True)
        p.add_argument("--frame-t1", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--probmap", type=int, action="append", metavar="CELL", help="flat query cell index")
        p.add_argument("--at", action="append", metavar="X,Y", help="query pillar containing this point")
        p.add_argument("--png", action="store_true", help="also render PNG heat maps")
        p.add_argument("--refine", action="store_true", help="nearest-point refinement of point flow")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="metrics for a predicted flow file against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", choices=["sceneflow", "motion"], default="sceneflow")
    p.add_argument("--horizon", type=float, default=1.0, help="seconds covered by motion displacements")
    p.add_argument("--static-threshold", type=float, default=0.2, help="m/s")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC
    except (io.FormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
