"""Cylindrical projection of a scan into an 8-channel image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ShapeMismatchError

CHANNELS = ("u", "v", "z", "range", "intensity", "nx", "ny", "nz")


@dataclass(eq=False)
class CylindricalImage:
    """``values`` is ``(8, height, width)`` in :data:`CHANNELS` order; ``mask`` marks filled cells."""

    values: np.ndarray
    mask: np.ndarray
    out_of_fov: int = 0

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]

    def channel(self, name):
        return self.values[CHANNELS.index(name)]


def cylindrical_project(cloud, h=16, w=360, vfov_deg=(-16.0, 16.0)):
    """Project ``cloud`` (with normals) onto an ``h x w`` azimuth/elevation grid.

    Column ``floor(azimuth / 2pi * w)`` with azimuth in ``[0, 2pi)``; row
    ``floor((elevation - vmin) / (vmax - vmin) * h)``.  When several points fall
    in one cell the nearest wins (ties: lowest point index).  Points outside
    the vertical field of view are dropped and counted.
    """
    values = np.zeros((len(CHANNELS), h, w))
    mask = np.zeros((h, w), dtype=bool)
    n = len(cloud)
    if n == 0:
        return CylindricalImage(values, mask, 0)
    if cloud.normals is None:
        raise ValueError("cylindrical projection needs normals")
    p = cloud.points
    rng_ = np.linalg.norm(p, axis=1)
    az = np.mod(np.arctan2(p[:, 1], p[:, 0]), 2.0 * np.pi)
    el = np.arctan2(p[:, 2], np.hypot(p[:, 0], p[:, 1]))
    vmin, vmax = np.deg2rad(vfov_deg[0]), np.deg2rad(vfov_deg[1])
    col = np.floor(az / (2.0 * np.pi) * w).astype(np.int64) % w
    row = np.floor((el - vmin) / (vmax - vmin) * h).astype(np.int64)
    row[el == vmax] = h - 1
    inside = (row >= 0) & (row < h)
    idx = np.flatnonzero(inside)
    cell = row[idx] * w + col[idx]
    order = np.lexsort((idx, rng_[idx], cell))
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell[order][1:] != cell[order][:-1]
    win = idx[order[first]]
    r, c = row[win], col[win]
    mask[r, c] = True
    values[0, r, c] = c / max(w - 1, 1)
    values[1, r, c] = r / max(h - 1, 1)
    values[2, r, c] = p[win, 2]
    values[3, r, c] = rng_[win]
    values[4, r, c] = cloud.intensity[win]
    values[5:8, r, c] = cloud.normals[win].T
    return CylindricalImage(values, mask, int(n - inside.sum()))


def stack_pair(prev, curr):
    """16-channel network input from two consecutive images."""
    if prev.values.shape != curr.values.shape:
        raise ShapeMismatchError(f"image shapes differ: {prev.values.shape} vs {curr.values.shape}")
    return np.concatenate([prev.values, curr.values], axis=0)
