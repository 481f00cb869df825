"""Slow, independent reference implementations used as test oracles."""
import math

import numpy as np
import torch

from contrastmotion.geometry import AugmentationSpec, PointCloud, generate_pair
from contrastmotion.pillargrid import GridSpec, correspondence_labels, pillarize


def loop_loss(Zt, Zt1, labels, layout, kind="sd"):
    """Eq.-1 style loss with plain Python loops over queries, positives and keys.

    Zt, Zt1 are (D, H, W) arrays. The normalizing set of a query is the set of
    occupied cells of its key patch, found by scanning the key rectangle.
    """
    D, H, W = Zt.shape
    s = layout.s
    n_cols = -(-W // s)
    total, count = 0.0, 0
    for m in range(len(labels.query)):
        cell = int(labels.query[m])
        r, q = divmod(cell, W)
        p = (r // s) * n_cols + q // s
        r0, r1, c0, c1 = layout.key_rects[p]
        keys = [rr * W + cc for rr in range(r0, r1) for cc in range(c0, c1) if labels.key_mask[rr * W + cc]]
        if not keys:
            continue
        hard = int(labels.hard[m])
        if hard >= 0 and hard not in keys:
            continue
        if kind == "sd":
            pos = [(int(c), float(w)) for o, c, w in zip(labels.pos_owner, labels.pos_cell, labels.pos_weight)
                   if o == m and int(c) in keys]
        else:
            pos = [(hard, 1.0)] if hard >= 0 else []
        if not pos:
            continue
        qr, qc = divmod(cell, W)

        def dot(k):
            kr, kc = divmod(k, W)
            return sum(Zt[d, qr, qc] * Zt1[d, kr, kc] for d in range(D))

        logits = {k: dot(k) for k in keys}
        top = max(logits.values())
        log_norm = top + math.log(sum(math.exp(v - top) for v in logits.values()))
        for j, w in pos:
            total -= w * (logits[j] - log_norm)
        count += 1
    return total / count if count else 0.0


def toy_pair(grid: GridSpec, seed: int, n=300, aug=None, zmin=0.4):
    rng = np.random.default_rng(seed)
    ext = (grid.x_max - grid.x_min) / 2
    pts = np.column_stack([rng.uniform(grid.x_min, grid.x_max, (n, 2)), rng.uniform(zmin, 2.0, n)])
    aug = aug or AugmentationSpec(max_shift=min(1.0, ext / 2), removal_ratio=0.1)
    pc_t, pc_t1, T = generate_pair(PointCloud(pts), aug, seed)
    pill_t, pill_t1 = pillarize(pc_t, grid), pillarize(pc_t1, grid)
    return pc_t, pc_t1, T, pill_t, pill_t1, correspondence_labels(grid, pill_t, pill_t1, T)


def central_difference(f, x: torch.Tensor, h=1e-4):
    """Gradient of scalar f() with respect to leaf tensor x, perturbing x in place."""
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor, floor=1e-8) -> float:
    """Worst elementwise |a-b| / max(|a|, |b|); entries below ``floor`` in both count on an absolute scale."""
    denom = torch.maximum(a.abs(), b.abs()).clamp_min(floor)
    return ((a - b).abs() / denom).max().item() if a.numel() else 0.0


def kink_margins(model, frames, fuse):
    """Distance of every ReLU input and max-pool runner-up from its kink, per site.

    ``frames`` is a list of (pill, features, ids); ``fuse`` maps the two encoded
    maps to the tensors rectified before the loss. Exact zeros produced by a
    rectifier that is already off stay zero under small perturbations and are
    skipped. Finite differences are trustworthy when every margin is well above
    the step size.
    """
    from contrastmotion.network import encoder_forward, pfe_forward

    out = {}

    def note(key, t):
        t = t[t != 0].abs()
        if t.numel():
            out[key] = min(out.get(key, float("inf")), t.min().item())

    hooks = [m.register_forward_hook(lambda mod, inp, res, name=name: note(name, inp[0]))
             for name, m in model.named_modules() if isinstance(m, torch.nn.ReLU)]
    try:
        with torch.no_grad():
            maps = []
            for pill, feats, ids in frames:
                h = model.pfe(torch.as_tensor(feats, dtype=model.dtype)[:, 2:])
                cells = pill.point_cell[ids]
                for c in np.unique(cells):
                    v = h[torch.as_tensor(cells == c)]
                    if len(v) > 1:
                        top = torch.topk(v, 2, dim=0).values
                        live = top[0] > 0  # ties at zero sit behind an off rectifier
                        if live.any():
                            gap = (top[0] - top[1])[live].min().item()
                            out["maxpool"] = min(out.get("maxpool", float("inf")), gap)
                maps.append(encoder_forward(model, pfe_forward(model, pill, feats, ids)))
            for k, z in enumerate(fuse(*maps)):
                note("embed%d" % k, z)
    finally:
        for hk in hooks:
            hk.remove()
    return out


# 8 x 8 toy for finite-difference checks. The seeds were picked so every
# rectifier input and max-pool gap sits at least 5e-4 from its kink, above
# the largest pre-activation change a 1e-4 step can cause.
GRAD_MODEL_SEED, GRAD_DATA_SEED, GRAD_POINTS = 1, 2, 60


def grad_case():
    from conftest import TINY, randomize
    from contrastmotion.association import build_layout
    from contrastmotion.contrast import plan_loss
    from contrastmotion.network import ContrastMotionNet
    from contrastmotion.pillargrid import pfe_point_features

    grid = GridSpec.square(1.0)
    layout = build_layout(grid, 4, 2)
    model = randomize(ContrastMotionNet(TINY, seed=3).double(), seed=GRAD_MODEL_SEED)
    pc_t, pc_t1, _, pill_t, pill_t1, labels = toy_pair(grid, GRAD_DATA_SEED, n=GRAD_POINTS)
    ft, it = pfe_point_features(pc_t, pill_t)
    ft1, it1 = pfe_point_features(pc_t1, pill_t1)
    frames = [(pill_t, ft, it), (pill_t1, ft1, it1)]
    return model, frames, labels, layout, plan_loss(labels, layout)
