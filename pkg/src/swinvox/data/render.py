"""Orthographic ray-marched renderer for voxel grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

IMAGE_SIZES = (32, 64, 128)


@dataclass(frozen=True)
class View:
    """Rays travel along +``axis`` from index 0.

    Image rows follow the lower remaining grid axis, columns the higher one.
    ``light`` is a direction in (row, col, toward-camera) coordinates.
    """

    axis: int = 2
    light: tuple = (-0.4, -0.5, 0.77)
    ambient: float = 0.35
    diffuse: float = 0.45
    depth_cue: float = 0.2
    color: tuple = (1.0, 0.9, 0.8)
    background: tuple = (0.1, 0.1, 0.1)

    def image_axes(self) -> tuple:
        return tuple(a for a in range(3) if a != self.axis)


def depth_map(v: np.ndarray, axis: int = 2) -> np.ndarray:
    """Index of the first occupied voxel along ``axis``; -1 where the ray misses."""
    occ = np.moveaxis(np.asarray(v).astype(bool), axis, -1)
    hit = occ.any(axis=-1)
    first = np.argmax(occ, axis=-1)
    return np.where(hit, first, -1)


def _shade(depth: np.ndarray, n: int, view: View) -> np.ndarray:
    hit = depth >= 0
    d = np.where(hit, depth, n).astype(np.float64)
    dr = np.gradient(d, axis=0)
    dc = np.gradient(d, axis=1)
    normals = np.stack([-dr, -dc, np.ones_like(d)], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    light = np.asarray(view.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lambert = np.clip(normals @ light, 0.0, 1.0)
    intensity = view.ambient + view.diffuse * lambert + view.depth_cue * (1.0 - d / n)
    return np.where(hit, intensity, 0.0)


def render_ortho(v: np.ndarray, view: View = View(), size: int = 64) -> np.ndarray:
    """(3, size, size) image in [0, 1]; 2x2 (for size 64) pixels per voxel column."""
    if size not in IMAGE_SIZES:
        raise ConfigError(f"image size must be one of {IMAGE_SIZES}, got {size}")
    n = v.shape[view.axis]
    depth = depth_map(v, view.axis)
    r_ax, c_ax = view.image_axes()
    rows = np.arange(size) * v.shape[r_ax] // size
    cols = np.arange(size) * v.shape[c_ax] // size
    intensity = _shade(depth, n, view)[np.ix_(rows, cols)]
    hit = (depth >= 0)[np.ix_(rows, cols)]
    color = np.asarray(view.color)[:, None, None] * intensity[None]
    bg = np.asarray(view.background)[:, None, None] * np.ones((1, size, size))
    return np.clip(np.where(hit[None], color, bg), 0.0, 1.0)


def projection_mask(v: np.ndarray, axis: int = 2, size: int = 64) -> np.ndarray:
    """Pixels whose voxel column contains any occupied voxel."""
    occ = np.asarray(v).astype(bool).any(axis=axis)
    rows = np.arange(size) * occ.shape[0] // size
    cols = np.arange(size) * occ.shape[1] // size
    return occ[np.ix_(rows, cols)]
