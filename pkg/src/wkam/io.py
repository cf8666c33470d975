"""Artifact formats: slab CSV/binary, measure CSV, JSON reports and run manifests.

Binary slab layout (little-endian): 8-byte magic ``WKAMSLB1``, four uint32
(d, N, m, frame count F), F float64 frame times, then float64 values ordered
frame-major, then node (C order over the spatial axes), then component.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .grid import PeriodicGrid

MAGIC = b"WKAMSLB1"


def blob_sha1(data: bytes) -> str:
    """Content hash in git's blob convention."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def write_json(path, payload) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


def _fmt(x: float) -> str:
    return repr(float(x))


def write_slab_csv(path, slab) -> Path:
    """One row per (frame, node, component): frame, t, node coordinates, component, value."""
    path = Path(path)
    g = slab.grid
    coords = g.points.reshape(-1, g.d)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "t"] + [f"x{k + 1}" for k in range(g.d)] + ["component", "value"])
        for f, (t, frame) in enumerate(zip(slab.times, slab.frames)):
            vals = frame.reshape(g.m, -1)
            for node, x in enumerate(coords):
                for i in range(g.m):
                    w.writerow([f, _fmt(t)] + [_fmt(v) for v in x] + [i, _fmt(vals[i, node])])
    return path


def write_slab_binary(path, slab) -> Path:
    path = Path(path)
    g = slab.grid
    frames = np.asarray(slab.frames, dtype="<f8")
    # (F, m, *shape) -> (F, nodes, m)
    body = np.moveaxis(frames.reshape(len(frames), g.m, -1), 1, 2)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", g.d, g.N, g.m, len(frames)))
        fh.write(np.asarray(slab.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(body).tobytes())
    return path


def read_slab_binary(path):
    """Returns (grid, times, frames) with frames shaped (F, m, *shape)."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a slab file (bad magic)")
    d, N, m, F = struct.unpack("<4I", data[8:24])
    grid = PeriodicGrid(d, N, m)
    off = 24
    times = np.frombuffer(data, dtype="<f8", count=F, offset=off)
    off += 8 * F
    body = np.frombuffer(data, dtype="<f8", count=F * grid.n_nodes * m, offset=off)
    if off + body.nbytes != len(data):
        raise ValueError(f"{path}: trailing or missing bytes")
    frames = np.moveaxis(body.reshape(F, grid.n_nodes, m), 2, 1).reshape((F, m) + grid.shape)
    return grid, times.copy(), frames.copy()


def write_measure_csv(path, mu) -> Path:
    """Nonzero atoms: x coordinates, q coordinates, component, weight."""
    path = Path(path)
    g, vg = mu.grid, mu.vgrid
    coords = g.points.reshape(-1, g.d)
    i, n, k, w = mu.atoms()
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"x{j + 1}" for j in range(g.d)] + [f"q{j + 1}" for j in range(g.d)] + ["component", "weight"])
        for a in range(len(w)):
            wr.writerow([_fmt(v) for v in coords[n[a]]] + [_fmt(v) for v in vg.points[k[a]]] + [int(i[a]), _fmt(w[a])])
    return path


def measure_summary(mu, spec, c) -> dict:
    from .mather import action, holonomy_residual

    return {
        "action": action(mu, spec),
        "holonomy_residual": holonomy_residual(mu, spec, c),
        "component_masses": mu.component_masses(),
        "support_size": mu.support_size,
        "N": mu.grid.N,
        "Nq": mu.vgrid.Nq,
        "Qmax": mu.vgrid.Qmax,
    }


def write_table_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path
