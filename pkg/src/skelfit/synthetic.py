"""Synthetic fixtures: poses within limits, projected keypoints, datasets.

Everything is driven by a seeded generator so experiments are reproducible;
the same seed always yields the same records.  Used by the test suite, the
benchmarks and the documentation examples.
"""

from __future__ import annotations

import numpy as np

from .body_model import ModelDefinition, forward_pipeline
from .camera import WeakPerspectiveCamera, project
from .losses import KeypointSet2D
from .refine import DatasetRecord, ParamEstimate


def sample_pose(
    model: ModelDefinition,
    rng: np.random.Generator,
    margin: float = 0.15,
    unbounded_scale: float = 0.25,
) -> np.ndarray:
    """Random pose with every bounded DoF inside its limits.

    Bounded DoFs are drawn uniformly from the central ``1 - 2 * margin``
    portion of their range; unbounded DoFs from a zero-mean normal.
    """
    packed = model.packed
    q = rng.normal(0.0, unbounded_scale, size=model.pose_dim)
    for d in range(model.pose_dim):
        lo, hi = packed.dof_lower[d], packed.dof_upper[d]
        if not np.isnan(lo) and not np.isnan(hi):
            span = hi - lo
            q[d] = rng.uniform(lo + margin * span, hi - margin * span)
        elif not np.isnan(lo):
            q[d] = lo + abs(q[d])
        elif not np.isnan(hi):
            q[d] = hi - abs(q[d])
    return q


def centered_camera(rng: np.random.Generator, joints3d: np.ndarray) -> WeakPerspectiveCamera:
    """Camera that keeps the projected joints centered in the frame."""
    scale = float(rng.uniform(0.8, 1.1))
    center = scale * np.asarray(joints3d, dtype=np.float64)[:, :2].mean(axis=0)
    jitter = rng.uniform(-0.05, 0.05, size=2)
    return WeakPerspectiveCamera(
        scale=scale, tx=float(jitter[0] - center[0]), ty=float(jitter[1] - center[1])
    )


def project_keypoints(
    model: ModelDefinition, q, beta, cam: WeakPerspectiveCamera
) -> KeypointSet2D:
    """Ground-truth keypoints: project the regressed joints, confidence 1."""
    cache = forward_pipeline(model, q, beta)
    joints = model.joint_regressor @ cache.v_posed
    return KeypointSet2D(points=project(cam, joints), confidence=np.ones(joints.shape[0]))


def corrupt_pose(model: ModelDefinition, q, rng: np.random.Generator, excess: float = 0.5):
    """Push one random bounded DoF past a limit and jitter the rest."""
    packed = model.packed
    bounded = [
        d
        for d in range(model.pose_dim)
        if not (np.isnan(packed.dof_lower[d]) and np.isnan(packed.dof_upper[d]))
    ]
    out = np.asarray(q, dtype=np.float64) + rng.normal(0.0, 0.1, size=model.pose_dim)
    d = int(rng.choice(bounded))
    if np.isnan(packed.dof_upper[d]):
        out[d] = packed.dof_lower[d] - excess
    else:
        out[d] = packed.dof_upper[d] + excess
    return out


def make_synthetic_records(
    model: ModelDefinition,
    count: int,
    seed: int = 0,
    corrupt_fraction: float = 0.0,
    estimate_noise: float = 0.1,
) -> list[DatasetRecord]:
    """Records with exact keypoints, a noisy network-style estimate, and a
    pseudo label that is clean or (for ``corrupt_fraction`` of records)
    pushed beyond a joint limit."""
    records = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        q = sample_pose(model, rng)
        beta = rng.normal(0.0, 0.5, size=model.shape_dim)
        cache = forward_pipeline(model, q, beta)
        joints = model.joint_regressor @ cache.v_posed
        cam = centered_camera(rng, joints)
        kp = KeypointSet2D(points=project(cam, joints), confidence=np.ones(joints.shape[0]))
        estimate = ParamEstimate(
            q=q + rng.normal(0.0, estimate_noise, size=model.pose_dim),
            beta=beta + rng.normal(0.0, estimate_noise, size=model.shape_dim),
            camera=cam,
        )
        if rng.uniform() < corrupt_fraction:
            label_q = corrupt_pose(model, q, rng)
        else:
            label_q = q + rng.normal(0.0, 0.02, size=model.pose_dim)
        label = ParamEstimate(q=label_q, beta=beta.copy(), camera=cam)
        records.append(
            DatasetRecord(
                example_id=f"synth-{seed}-{i:04d}",
                image_id=f"img-{i:04d}",
                bbox=np.array([0.0, 0.0, 256.0, 256.0]),
                keypoints2d=kp,
                pseudo_gt=label,
                regressor_estimate=estimate,
                provenance="initial-conversion",
            )
        )
    return records
