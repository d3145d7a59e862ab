"""Pose and surface evaluation metrics plus the joint-limit violation audit.

Distance metrics are unit-agnostic (millimeters in, millimeters out).  PCK
uses a strict ``<`` at the threshold boundary and expects the normalizer to
be the longer bounding-box side.  Procrustes alignment solves the full
similarity problem (scale, proper rotation, translation) in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body_model import Joint, ModelDefinition, ROTATION
from .rotations import axis_angle_to_rotmat, rotation_angle, rotmat_to_euler, twist_angle


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray  # (3, 3), proper
    translation: np.ndarray  # (3,)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation


def _points(a, name, dim=3):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != dim:
        raise ValueError(f"{name}: expected (K, {dim}), got {a.shape}")
    return a


def pck(pred2d, gt2d, threshold: float, normalizer: float, visible=None) -> float:
    """Fraction of visible keypoints strictly within threshold * normalizer."""
    pred = _points(pred2d, "pred2d", dim=2)
    gt = _points(gt2d, "gt2d", dim=2)
    if pred.shape != gt.shape:
        raise ValueError(f"keypoint count mismatch: {pred.shape} vs {gt.shape}")
    if not normalizer > 0:
        raise ValueError("normalizer must be positive")
    dist = np.linalg.norm(pred - gt, axis=1)
    if visible is not None:
        visible = np.asarray(visible, dtype=bool)
        dist = dist[visible]
    if dist.size == 0:
        return float("nan")
    return float(np.mean(dist < threshold * normalizer))


def mpjpe(pred3d, gt3d, root_index: int = 0, align_root: bool = True) -> float:
    """Mean per-joint position error, pelvis-centered by default."""
    pred = _points(pred3d, "pred3d")
    gt = _points(gt3d, "gt3d")
    if pred.shape != gt.shape:
        raise ValueError(f"joint count mismatch: {pred.shape} vs {gt.shape}")
    if align_root:
        pred = pred - pred[root_index] + gt[root_index]
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)))


def procrustes_align(source3d, target3d) -> SimilarityTransform:
    """Least-squares similarity transform mapping source onto target.

    The returned rotation is always proper (reflections are excluded by
    sign-correcting the smallest singular direction).  Raises on degenerate
    input: fewer than 3 points, coincident points, or collinear points.
    """
    src = _points(source3d, "source3d")
    tgt = _points(target3d, "target3d")
    if src.shape != tgt.shape:
        raise ValueError(f"point count mismatch: {src.shape} vs {tgt.shape}")
    n = src.shape[0]
    if n < 3:
        raise ValueError("procrustes alignment needs at least 3 points")
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    sc = src - mu_s
    tc = tgt - mu_t
    var_s = np.sum(sc**2) / n
    cov = tc.T @ sc / n
    u, d, vt = np.linalg.svd(cov)
    if var_s <= 0 or d[1] <= 1e-12 * max(d[0], 1e-300):
        raise ValueError("degenerate point set (coincident or collinear points)")
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    flip = np.ones(3)
    flip[-1] = sign
    rot = u @ np.diag(flip) @ vt
    scale = float(np.sum(d * flip) / var_s)
    trans = mu_t - scale * rot @ mu_s
    return SimilarityTransform(scale=scale, rotation=rot, translation=trans)


def pa_mpjpe(pred3d, gt3d) -> float:
    """Mean joint error after optimal similarity alignment."""
    transform = procrustes_align(pred3d, gt3d)
    return float(np.mean(np.linalg.norm(transform.apply(pred3d) - np.asarray(gt3d), axis=1)))


def mpvpe(pred_vertices, gt_vertices) -> float:
    """Mean per-vertex position error, no alignment."""
    pred = _points(pred_vertices, "pred_vertices")
    gt = _points(gt_vertices, "gt_vertices")
    if pred.shape != gt.shape:
        raise ValueError(f"vertex count mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)))


def pa_mpvpe(pred_vertices, gt_vertices) -> float:
    """Mean per-vertex error after optimal similarity alignment."""
    return pa_mpjpe(pred_vertices, gt_vertices)


# ---------------------------------------------------------------------------
# Joint-limit violations


@dataclass
class JointDecomposition:
    """A ball rotation expressed in a joint's DoF axes.

    ``residual_angle`` is the rotation left over after removing the per-axis
    components; it is nonzero when the input cannot be represented by the
    joint's DoFs (e.g. off-axis twist on a hinge joint) and counts as a
    violation in full.
    """

    angles: np.ndarray  # (k,) radians, one per rotation DoF
    limit_violations: np.ndarray  # (k,) radians, max(0, l - q, q - u)
    residual_angle: float  # radians

    @property
    def max_violation(self) -> float:
        worst = float(self.limit_violations.max()) if self.limit_violations.size else 0.0
        return max(worst, self.residual_angle)


def _limit_excess(angle: float, lower, upper) -> float:
    excess = 0.0
    if lower is not None:
        excess = max(excess, lower - angle)
    if upper is not None:
        excess = max(excess, angle - upper)
    return excess


def decompose_against_limits(rotation: np.ndarray, joint: Joint) -> JointDecomposition:
    """Decompose a ball rotation along a joint's rotation axes.

    Joints with three mutually orthogonal right-handed axes decompose
    exactly (zero residual); otherwise twist components are peeled off one
    axis at a time and whatever rotation remains is reported as the
    residual.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    dofs = [d for d in joint.dofs if d.kind == ROTATION]
    if not 1 <= len(dofs) <= 3:
        raise ValueError(f"joint {joint.name!r} has {len(dofs)} rotation DoFs, expected 1-3")
    axes = np.asarray([np.asarray(d.axis, float) / np.linalg.norm(d.axis) for d in dofs])

    exact = False
    if len(dofs) == 3:
        q = axes.T  # columns are the axes
        exact = (
            np.max(np.abs(q.T @ q - np.eye(3))) < 1e-9 and abs(np.linalg.det(q) - 1.0) < 1e-9
        )
    if exact:
        angles = rotmat_to_euler(q.T @ rotation @ q, "xyz")
        residual = 0.0
    else:
        angles = []
        rest = rotation
        for axis in axes:
            t = twist_angle(rest, axis)
            angles.append(t)
            rest = axis_angle_to_rotmat(axis, -t) @ rest  # peel off the left
        angles = np.asarray(angles)
        residual = rotation_angle(rest)

    violations = np.asarray(
        [_limit_excess(a, d.lower, d.upper) for a, d in zip(angles, dofs)]
    )
    return JointDecomposition(
        angles=angles, limit_violations=violations, residual_angle=residual
    )


@dataclass
class ViolationTable:
    """Per-joint frequency of limit violations exceeding each threshold."""

    joint_names: list[str]
    thresholds_deg: list[float]
    frequencies: np.ndarray  # (n_joints, n_thresholds), in [0, 1]

    def to_text(self) -> str:
        width = max([len(n) for n in self.joint_names] + [5])
        header = " " * width + "".join(f"  >{t:g} deg" for t in self.thresholds_deg)
        lines = [header]
        for name, row in zip(self.joint_names, self.frequencies):
            cells = "".join(f"  {100 * v:7.1f}%" for v in row)
            lines.append(f"{name:<{width}}{cells}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "thresholds_deg": [float(t) for t in self.thresholds_deg],
            "frequencies": self.frequencies.tolist(),
        }


def pose_violations_deg(model: ModelDefinition, poses: np.ndarray) -> np.ndarray:
    """Per-sample per-joint worst limit excess, in degrees.

    ``poses`` is ``(B, D)``; returns ``(B, J)``.
    """
    poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))
    if poses.shape[1] != model.pose_dim:
        raise ValueError(f"poses: expected (B, {model.pose_dim}), got {poses.shape}")
    packed = model.packed
    lo = np.where(np.isnan(packed.dof_lower), -np.inf, packed.dof_lower)
    hi = np.where(np.isnan(packed.dof_upper), np.inf, packed.dof_upper)
    excess = np.maximum(0.0, np.maximum(lo - poses, poses - hi))  # (B, D)
    out = np.zeros((poses.shape[0], model.n_joints))
    for j in range(model.n_joints):
        s = slice(int(packed.dof_start[j]), int(packed.dof_start[j + 1]))
        if s.stop > s.start:
            out[:, j] = excess[:, s].max(axis=1)
    return np.degrees(out)


def violation_audit(
    poses,
    model: ModelDefinition,
    thresholds_deg,
    joints: list[str] | None = None,
) -> ViolationTable:
    """Fraction of poses whose limit excess exceeds each threshold, per joint.

    ``joints`` defaults to every joint that has at least one bounded DoF.
    Thresholds must be sorted ascending; frequencies are then monotone
    non-increasing across each row by construction.
    """
    thresholds = [float(t) for t in thresholds_deg]
    if sorted(thresholds) != thresholds:
        raise ValueError("thresholds must be sorted ascending")
    if joints is None:
        joints = [
            j.name
            for j in model.joints
            if any(d.lower is not None or d.upper is not None for d in j.dofs)
        ]
    idx = [model.joint_index(n) for n in joints]
    per_joint = pose_violations_deg(model, poses)[:, idx]  # (B, len(joints))
    freq = np.stack([(per_joint > t).mean(axis=0) for t in thresholds], axis=1)
    return ViolationTable(joint_names=list(joints), thresholds_deg=thresholds, frequencies=freq)
