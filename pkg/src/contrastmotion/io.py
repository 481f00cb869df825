"""On-disk formats: PCV1 point files, checkpoints, probability-map grids."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
import torch

from .association import AssociationResult, PatchLayout
from .geometry import PointCloud

MAGIC = "PCV1"
FLOW_FIELDS = ("fx", "fy", "fz")


class FormatError(ValueError):
    pass


def write_pcv1(path, pc: PointCloud = None, *, points=None, flow=None, fields: Sequence[str] = None):
    """Header line ``PCV1 <n> <field> ...`` then little-endian float32 records."""
    if pc is not None:
        points, flow = pc.points, pc.flow
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = [points]
    names = ["x", "y", "z"]
    if flow is not None:
        cols.append(np.asarray(flow, dtype=np.float64).reshape(-1, 3))
        names += list(FLOW_FIELDS)
    if fields is not None and list(fields) != names:
        raise FormatError("fields %s do not match data %s" % (list(fields), names))
    data = np.concatenate(cols, axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("%s %d %s\n" % (MAGIC, len(points), " ".join(names))).encode("ascii"))
        fh.write(data.tobytes())


def read_pcv1_raw(path):
    """(fields, (n, len(fields)) float32 array)."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        payload = fh.read()
    if len(header) < 5 or header[0] != MAGIC:
        raise FormatError("%s: not a PCV1 file" % path)
    try:
        n = int(header[1])
    except ValueError:
        raise FormatError("%s: bad point count %r" % (path, header[1]))
    fields = header[2:]
    expect = n * len(fields) * 4
    if len(payload) != expect:
        raise FormatError("%s: payload has %d bytes, header implies %d" % (path, len(payload), expect))
    return fields, np.frombuffer(payload, dtype="<f4").reshape(n, len(fields))


def read_pcv1(path, timestamp: float = 0.0) -> PointCloud:
    fields, data = read_pcv1_raw(path)
    if fields[:3] != ["x", "y", "z"]:
        raise FormatError("%s: first fields must be x y z, got %s" % (path, fields[:3]))
    flow = None
    if len(fields) >= 6:
        if fields[3:6] != list(FLOW_FIELDS):
            raise FormatError("%s: unexpected flow fields %s" % (path, fields[3:6]))
        flow = data[:, 3:6].astype(np.float64)
    return PointCloud(data[:, :3].astype(np.float64), timestamp, flow)


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(directory, model, manifest: Dict) -> Path:
    """``manifest.json`` plus ``params.bin`` holding named float32 blocks back to back."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blocks, offset, chunks = [], 0, []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    man = dict(manifest)
    man["blocks"] = blocks
    man["dtype"] = "float32-le"
    (d / "params.bin").write_bytes(b"".join(chunks))
    (d / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory):
    """(manifest, {name: float32 array})."""
    d = Path(directory)
    man_path, bin_path = d / "manifest.json", d / "params.bin"
    if not man_path.is_file() or not bin_path.is_file():
        raise FileNotFoundError("no checkpoint at %s" % d)
    man = json.loads(man_path.read_text())
    raw = bin_path.read_bytes()
    params = {}
    for b in man["blocks"]:
        arr = np.frombuffer(raw, dtype="<f4", count=b["count"], offset=b["offset"])
        params[b["name"]] = arr.reshape(b["shape"]).copy()
    return man, params


def load_state(model, params: Dict[str, np.ndarray]):
    own = model.state_dict()
    if set(own) != set(params):
        missing = sorted(set(own) ^ set(params))
        raise FormatError("checkpoint blocks do not match model: %s" % missing)
    for name, arr in params.items():
        if tuple(own[name].shape) != arr.shape:
            raise FormatError("block %s has shape %s, model expects %s" % (name, arr.shape, tuple(own[name].shape)))
    model.load_state_dict({k: torch.as_tensor(v, dtype=own[k].dtype) for k, v in params.items()})
    return model


# --- probability maps ---------------------------------------------------------


def probmap_grid(assoc: AssociationResult, layout: PatchLayout, cell: int) -> np.ndarray:
    """Probabilities of one query over its key patch; empty keys hold 0."""
    m = assoc.row(cell)
    r0, r1, c0, c1 = layout.key_rects[assoc.patch[m]]
    grid = np.zeros((r1 - r0, c1 - c0))
    r, q = np.divmod(assoc.key_sets[m], layout.W)
    grid[r - r0, q - c0] = assoc.pb[m]
    return grid


def probmap_text(grid: np.ndarray, cell: int, rect) -> str:
    """PGM-like plain-text grid: a header line, the key-rect origin, then one row per line."""
    h, w = grid.shape
    lines = ["P2F %d %d" % (w, h), "# query_cell %d key_rect %d %d %d %d" % ((cell,) + tuple(rect))]
    lines += [" ".join("%.6e" % v for v in row) for row in grid]
    return "\n".join(lines) + "\n"


def read_probmap_text(path) -> np.ndarray:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if not rows or not rows[0].startswith("P2F"):
        raise FormatError("%s: not a probability map" % path)
    w, h = map(int, rows[0].split()[1:3])
    grid = np.array([[float(v) for v in ln.split()] for ln in rows[1:]])
    if grid.shape != (h, w):
        raise FormatError("%s: grid is %s, header says %s" % (path, grid.shape, (h, w)))
    return grid


def save_probmap_png(grid: np.ndarray, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(grid, origin="lower", cmap="RdYlGn_r")
    ax.set_axis_off()
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
