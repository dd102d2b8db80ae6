"""Static artifact writers: OBJ meshes of voxel grids and SVG loss curves."""

from __future__ import annotations

from pathlib import Path

import numpy as np

# Unit cube corners and its 12 triangles (1-based offsets into the corners, CCW from outside).
_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                     [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]])
_TRIS = np.array([[1, 3, 2], [1, 4, 3],   # z = 0
                  [5, 6, 7], [5, 7, 8],   # z = 1
                  [1, 2, 6], [1, 6, 5],   # y = 0
                  [4, 8, 7], [4, 7, 3],   # y = 1
                  [1, 5, 8], [1, 8, 4],   # x = 0
                  [2, 3, 7], [2, 7, 6]])  # x = 1


def voxels_to_obj(v: np.ndarray, dedup: bool = False) -> str:
    """One cube (8 vertices, 12 triangles) per occupied voxel, in unit-cube coordinates.

    With ``dedup`` the lattice corners shared between cubes are emitted once.
    """
    v = np.asarray(v).astype(bool)
    side = np.asarray(v.shape, dtype=np.float64)
    cells = np.argwhere(v)
    lines = [f"# swinvox voxel export: {len(cells)} occupied of {v.shape[0]}x{v.shape[1]}x{v.shape[2]}"]
    corners = (cells[:, None, :] + _CORNERS[None]).reshape(-1, 3)
    if dedup and len(cells):
        unique, inverse = np.unique(corners, axis=0, return_inverse=True)
        verts, ids = unique, inverse.reshape(-1, 8) + 1
    else:
        verts, ids = corners, np.arange(1, len(corners) + 1).reshape(-1, 8)
    for x, y, z in verts / side:
        lines.append(f"v {x:.6g} {y:.6g} {z:.6g}")
    for cube in ids:
        for a, b, c in _TRIS:
            lines.append(f"f {cube[a - 1]} {cube[b - 1]} {cube[c - 1]}")
    return "\n".join(lines) + "\n"


def write_obj(path, v: np.ndarray, dedup: bool = False) -> Path:
    path = Path(path)
    try:
        path.write_text(voxels_to_obj(v, dedup))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_loss_curve(path) -> np.ndarray:
    """(n, 3) array of (step, loss, wall_time) records."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if line and not line.startswith("#"):
            rows.append([float(x) for x in line.split()[:3]])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def loss_curve_svg(records: np.ndarray, width: int = 640, height: int = 360, title: str = "training loss") -> str:
    margin = 48
    steps, losses = records[:, 0], records[:, 1]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-family="sans-serif" '
             f'font-size="14">{title}</text>']
    x0, x1, y0, y1 = margin, width - margin / 2, height - margin, margin
    parts.append(f'<polyline fill="none" stroke="black" points="{x0},{y1} {x0},{y0} {x1},{y0}"/>')
    if len(records):
        s_lo, s_hi = steps.min(), max(steps.max(), steps.min() + 1)
        l_lo, l_hi = losses.min(), max(losses.max(), losses.min() + 1e-12)
        xs = x0 + (steps - s_lo) / (s_hi - s_lo) * (x1 - x0)
        ys = y0 - (losses - l_lo) / (l_hi - l_lo) * (y0 - y1)
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{pts}"/>')
        for val, y in ((l_hi, y1), (l_lo, y0)):
            parts.append(f'<text x="{x0 - 4}" y="{y + 4}" text-anchor="end" font-family="sans-serif" '
                         f'font-size="10">{val:.4g}</text>')
        for val, x in ((s_lo, x0), (s_hi, x1)):
            parts.append(f'<text x="{x}" y="{y0 + 14}" text-anchor="middle" font-family="sans-serif" '
                         f'font-size="10">{int(val)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
