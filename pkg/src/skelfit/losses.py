"""Training-loss primitives on model parameters and keypoints.

Parameter losses are squared L2 on rotation matrices and shape coefficients;
keypoint losses are L1, averaged over points for scale stability across
keypoint counts, with per-point confidence weighting in 2D.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class KeypointSet2D:
    """Observed 2D keypoints in normalized image units with confidences."""

    points: np.ndarray  # (K, 2)
    confidence: np.ndarray  # (K,) in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if self.confidence.shape[0] != self.points.shape[0]:
            raise ValueError("one confidence per keypoint required")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise ValueError("confidences must lie in [0, 1]")

    def __len__(self) -> int:
        return self.points.shape[0]


def _pair(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def loss_pose(q_mat, q_mat_gt) -> float:
    """Sum of squared elementwise differences over per-DoF rotation matrices."""
    a, b = _pair(q_mat, q_mat_gt, "loss_pose")
    return float(np.sum((a - b) ** 2))


def loss_pose_grad(q_mat, q_mat_gt) -> np.ndarray:
    a, b = _pair(q_mat, q_mat_gt, "loss_pose")
    return 2.0 * (a - b)


def loss_shape(beta, beta_gt) -> float:
    a, b = _pair(beta, beta_gt, "loss_shape")
    return float(np.sum((a - b) ** 2))


def loss_shape_grad(beta, beta_gt) -> np.ndarray:
    a, b = _pair(beta, beta_gt, "loss_shape")
    return 2.0 * (a - b)


def loss_kp3d(points, points_gt) -> float:
    """Mean per-point L1 distance between 3D keypoint sets."""
    a, b = _pair(points, points_gt, "loss_kp3d")
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"loss_kp3d: expected (K, 3), got {a.shape}")
    return float(np.mean(np.sum(np.abs(a - b), axis=1)))


def loss_kp3d_grad(points, points_gt) -> np.ndarray:
    a, b = _pair(points, points_gt, "loss_kp3d")
    return np.sign(a - b) / a.shape[0]


def loss_kp2d(points_proj, keypoints: KeypointSet2D) -> float:
    """Confidence-weighted mean L1 distance to observed 2D keypoints."""
    a = np.asarray(points_proj, dtype=np.float64)
    if a.shape != keypoints.points.shape:
        raise ValueError(f"loss_kp2d: shape mismatch {a.shape} vs {keypoints.points.shape}")
    per_point = np.sum(np.abs(a - keypoints.points), axis=1)
    return float(np.mean(keypoints.confidence * per_point))


def loss_kp2d_grad(points_proj, keypoints: KeypointSet2D) -> np.ndarray:
    a = np.asarray(points_proj, dtype=np.float64)
    k = a.shape[0]
    return keypoints.confidence[:, None] * np.sign(a - keypoints.points) / k
