"""Rotation representation math.

Conversions between the continuous 6D representation, rotation matrices and
intrinsic Euler-angle sequences, plus composition of per-DoF axis rotations
for joints with one to three degrees of freedom.

All functions operate on float64 NumPy arrays.  Matrix-producing functions
accept batched input where noted.  Euler conventions are strings over the
letters ``xyz`` with one to three entries and no immediately repeated axis,
interpreted as intrinsic rotations applied left to right, e.g. ``"xyz"``
means ``Rx(a) @ Ry(b) @ Rz(c)``.
"""

from __future__ import annotations

import numpy as np

_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}
_EVEN_PERMS = {(0, 1, 2), (1, 2, 0), (2, 0, 1)}

# Relative norm below which the orthogonalized second Gram-Schmidt vector is
# considered degenerate (parallel or zero input).
DEGENERACY_EPS = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector (batched over leading dims)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_to_rotmat(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    k = skew(axis)
    s, c = np.sin(angle), np.cos(angle)
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def cont6d_to_rotmat(c: np.ndarray) -> np.ndarray:
    """Map a continuous 6D representation to a rotation matrix via Gram-Schmidt.

    ``c`` has shape ``(..., 6)``: two stacked 3-vectors.  The first column of
    the result is the normalized first vector, the second is the second
    vector orthogonalized against the first and normalized, and the third is
    their cross product.

    Raises ValueError on degenerate input (a zero vector, or two parallel
    vectors) instead of silently producing NaNs.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != 6:
        raise ValueError(f"expected shape (..., 6), got {c.shape}")
    a = c[..., :3]
    b = c[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(na <= 0.0) or np.any(nb <= 0.0):
        raise ValueError("degenerate 6D input: zero vector")
    b1 = a / na
    b2 = b - np.sum(b1 * b, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(b2, axis=-1, keepdims=True)
    if np.any(n2 < DEGENERACY_EPS * nb):
        raise ValueError("degenerate 6D input: vectors are (nearly) parallel")
    b2 = b2 / n2
    b3 = np.cross(b1, b2)
    return np.stack((b1, b2, b3), axis=-1)


def is_rotmat(m: np.ndarray, tol: float = 1e-9) -> bool:
    """True if every matrix in the batch is orthonormal with determinant +1."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        return False
    eye_err = np.abs(m @ np.swapaxes(m, -1, -2) - np.eye(3)).max()
    det_err = np.abs(np.linalg.det(m) - 1.0).max()
    return bool(eye_err <= tol and det_err <= tol)


def _check_convention(convention: str) -> list[int]:
    if not 1 <= len(convention) <= 3:
        raise ValueError(f"convention must have 1-3 axes, got {convention!r}")
    idx = []
    for ch in convention:
        if ch not in _AXIS_INDEX:
            raise ValueError(f"invalid axis letter {ch!r} in convention {convention!r}")
        idx.append(_AXIS_INDEX[ch])
    for a, b in zip(idx, idx[1:]):
        if a == b:
            raise ValueError(f"convention {convention!r} repeats an axis consecutively")
    return idx


def _elementary(axis_index: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    m = np.eye(3)
    i, j = [k for k in range(3) if k != axis_index]
    # (i, j) ordered ascending; the sign pattern below matches right-handed
    # rotations Rx, Ry, Rz for axis_index 0, 1, 2.
    if axis_index == 1:
        m[i, i] = c
        m[i, j] = s
        m[j, i] = -s
        m[j, j] = c
    else:
        m[i, i] = c
        m[i, j] = -s
        m[j, i] = s
        m[j, j] = c
    return m


def euler_to_rotmat(angles, convention: str) -> np.ndarray:
    """Compose intrinsic elementary rotations in convention order."""
    idx = _check_convention(convention)
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    if angles.shape != (len(idx),):
        raise ValueError(
            f"expected {len(idx)} angles for convention {convention!r}, got {angles.shape}"
        )
    m = np.eye(3)
    for ax, ang in zip(idx, angles):
        m = m @ _elementary(ax, ang)
    return m


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix, Shepperd's method."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t >= 0.0:
        w = 0.5 * np.sqrt(1.0 + t)
        f = 0.25 / w
        return np.array([w, f * (m[2, 1] - m[1, 2]), f * (m[0, 2] - m[2, 0]), f * (m[1, 0] - m[0, 1])])
    i = int(np.argmax(np.diagonal(m)))
    j, k = (i + 1) % 3, (i + 2) % 3
    r = np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
    q = np.empty(4)
    q[0] = (m[k, j] - m[j, k]) / (2.0 * r)
    q[1 + i] = 0.5 * r
    q[1 + j] = (m[j, i] + m[i, j]) / (2.0 * r)
    q[1 + k] = (m[k, i] + m[i, k]) / (2.0 * r)
    return q


def twist_angle(m: np.ndarray, axis: np.ndarray) -> float:
    """Signed rotation angle of the twist component of ``m`` about ``axis``.

    Extracts the factor ``Rot(axis, t)`` of the swing-twist decomposition.
    Returns 0 when the rotation has no component about the axis.
    """
    q = rotmat_to_quat(m)
    axis = np.asarray(axis, dtype=np.float64)
    proj = float(q[1:] @ axis)
    n = np.hypot(q[0], proj)
    if n < 1e-12:
        return 0.0
    return 2.0 * np.arctan2(proj, q[0])


def rotation_angle(m: np.ndarray) -> float:
    """Total rotation angle of a rotation matrix, in [0, pi]."""
    m = np.asarray(m, dtype=np.float64)
    c = (np.trace(m) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# sin(beta) within this distance of +-1 triggers the gimbal-lock branch.
_LOCK_TOL = 1e-9


def rotmat_to_euler(m: np.ndarray, convention: str) -> np.ndarray:
    """Decompose a rotation matrix into intrinsic Euler angles.

    Three-axis conventions always succeed: Tait-Bryan sequences put the middle
    angle in [-pi/2, pi/2], proper sequences in [0, pi].  At gimbal lock the
    third angle is set to zero, which still reproduces the input matrix.

    One- and two-axis conventions extract the angles by peeling twist
    components off the left; the result reproduces the input only when the
    matrix actually lies in the subgroup generated by those axes.
    """
    idx = _check_convention(convention)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a single 3x3 matrix, got shape {m.shape}")

    if len(idx) < 3:
        angles = []
        rest = m
        for ax in idx:
            e = np.zeros(3)
            e[ax] = 1.0
            t = twist_angle(rest, e)
            angles.append(t)
            rest = _elementary(ax, -t) @ rest
        return np.asarray(angles)

    i, j, k = idx
    if i != k:  # Tait-Bryan
        eps = 1.0 if (i, j, k) in _EVEN_PERMS else -1.0
        sb = np.clip(eps * m[i, k], -1.0, 1.0)
        beta = np.arcsin(sb)
        if 1.0 - abs(sb) > _LOCK_TOL:
            alpha = np.arctan2(-eps * m[j, k], m[k, k])
            gamma = np.arctan2(-eps * m[i, j], m[i, i])
        else:
            alpha = np.arctan2(eps * m[k, j], m[j, j])
            gamma = 0.0
    else:  # proper Euler, i == k
        third = 3 - i - j
        eps = 1.0 if (i, j, third) in _EVEN_PERMS else -1.0
        cb = np.clip(m[i, i], -1.0, 1.0)
        beta = np.arccos(cb)
        if 1.0 - abs(cb) > _LOCK_TOL:
            alpha = np.arctan2(m[j, i], -eps * m[third, i])
            gamma = np.arctan2(m[i, j], eps * m[i, third])
        else:
            alpha = np.arctan2(eps * m[third, j], m[j, j])
            gamma = 0.0
    return np.array([alpha, beta, gamma])


def dof_rotation(axes, angles) -> np.ndarray:
    """Product of axis-angle rotations in order, one angle per axis.

    ``axes`` is a sequence of 1-3 unit 3-vectors.  Raises on a non-unit axis.
    """
    axes = np.atleast_2d(np.asarray(axes, dtype=np.float64))
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    if not 1 <= axes.shape[0] <= 3 or axes.shape[1] != 3:
        raise ValueError(f"expected 1-3 axes of shape (3,), got {axes.shape}")
    if angles.shape != (axes.shape[0],):
        raise ValueError("one angle per axis required")
    norms = np.linalg.norm(axes, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError(f"axes must be unit length, got norms {norms}")
    m = np.eye(3)
    for ax, ang in zip(axes, angles):
        m = m @ axis_angle_to_rotmat(ax, ang)
    return m
