"""Shared 11-component box encoding.

Layout: [x, y, z, ln w, ln h, ln l, sin yaw, cos yaw, vx, vy, vz].
All modules that touch detections (emulator, wire format, alignment, encoder,
losses) agree on this vector and on the conditioning scale applied before any
learned layer consumes it.
"""

from __future__ import annotations

import numpy as np

from .geometry import Box3D

ANCHOR_DIM = 11

# Conditioning applied to anchor vectors before learned layers: positions are
# tens of meters, velocities up to ~10 m/s; log sizes and the yaw pair are
# already O(1).
ANCHOR_SCALE = np.array([0.05, 0.05, 0.05, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1])


def anchor_encode(box: Box3D) -> np.ndarray:
    w, h, l = box.size
    return np.array([
        box.center[0], box.center[1], box.center[2],
        np.log(w), np.log(h), np.log(l),
        np.sin(box.yaw), np.cos(box.yaw),
        box.velocity[0], box.velocity[1], box.velocity[2],
    ])


def anchor_decode(vec: np.ndarray) -> Box3D:
    vec = np.asarray(vec, dtype=np.float64)
    center = vec[0:3]
    size = np.exp(vec[3:6])
    yaw = float(np.arctan2(vec[6], vec[7]))
    return Box3D(center, size, yaw, vec[8:11].copy())


def renormalize_yaw_pair(vec: np.ndarray) -> np.ndarray:
    """Return a copy with the (sin, cos) pair scaled back to unit norm."""
    out = np.array(vec, dtype=np.float64)
    n = float(np.hypot(out[6], out[7]))
    if n > 1e-12:
        out[6] /= n
        out[7] /= n
    return out
