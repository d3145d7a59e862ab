"""Weak-perspective camera used for keypoint reprojection.

Image coordinates are normalized: the longer side of the person's bounding
box maps to [-1, 1], which keeps reprojection residuals and PCK thresholds
resolution independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class WeakPerspectiveCamera:
    """Orthographic drop of z followed by uniform scale and 2D translation."""

    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"camera scale must be positive, got {self.scale}")

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def as_array(self) -> np.ndarray:
        return np.array([self.scale, self.tx, self.ty])

    @classmethod
    def from_array(cls, a) -> "WeakPerspectiveCamera":
        a = np.asarray(a, dtype=np.float64)
        return cls(scale=float(a[0]), tx=float(a[1]), ty=float(a[2]))


def project(cam: WeakPerspectiveCamera, points3d) -> np.ndarray:
    """Project (K, 3) model-space points to (K, 2) normalized image points."""
    if not cam.scale > 0:
        raise ValueError(f"camera scale must be positive, got {cam.scale}")
    x = np.asarray(points3d, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"expected (K, 3) points, got {x.shape}")
    return cam.scale * x[:, :2] + cam.translation


def project_jacobians(cam: WeakPerspectiveCamera, points3d):
    """Closed-form partials of the projection.

    Returns ``(d_scale, d_t, d_points)`` with shapes ``(K, 2)``,
    ``(K, 2, 2)`` and ``(K, 2, 3)``.
    """
    x = np.asarray(points3d, dtype=np.float64)
    k = x.shape[0]
    d_scale = x[:, :2].copy()
    d_t = np.tile(np.eye(2), (k, 1, 1))
    d_points = np.zeros((k, 2, 3))
    d_points[:, 0, 0] = cam.scale
    d_points[:, 1, 1] = cam.scale
    return d_scale, d_t, d_points
