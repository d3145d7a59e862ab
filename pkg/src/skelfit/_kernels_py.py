"""Pure NumPy implementation of the hot kinematics/skinning kernels.

This is the fallback backend; ``skelfit._kernels_c`` is the compiled twin
with identical signatures.  Conventions shared by both:

* ``dof_kind``: 0 = rotation, 1 = translation.
* ``dof_start``: CSR-style offsets, the DoFs of joint ``j`` occupy
  ``dof_start[j]:dof_start[j+1]`` of the flat pose vector, in application
  order.
* ``order`` is a topological ordering of the joints (parents first).
* Joint positions are carried as a drift from the rest locations
  (``world position = rest_joint + drift``) and skinning is expressed as a
  displacement from the shaped vertices.  At the rest pose every drift and
  displacement is exactly zero, so rest-pose identities hold bit-exactly.
* Rotation-DoF derivative caches: for DoF ``d`` of joint ``j`` at position
  ``p`` in the joint's rotation product ``A_j = R_1 @ ... @ R_m``,
  ``prefix[d] = R_1 @ ... @ R_{p-1}`` and ``suffix[d] = R_p @ ... @ R_m``,
  so that ``dA_j/dtheta_d = prefix[d] @ skew(axis_d) @ suffix[d]``.
"""

import numpy as np

BACKEND = "python"


def _rodrigues(axis, angle):
    x, y, z = axis
    s, c = np.sin(angle), np.cos(angle)
    t = 1.0 - c
    return np.array(
        [
            [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
            [x * y * t + z * s, c + y * y * t, y * z * t - x * s],
            [x * z * t - y * s, y * z * t + x * s, c + z * z * t],
        ]
    )


def _skew(axis):
    x, y, z = axis
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def local_transforms(q, dof_axis, dof_kind, dof_start):
    """Per-joint local rotation, translation offset, and derivative caches.

    Returns ``(A, tloc, prefix, suffix)`` with shapes ``(J,3,3)``, ``(J,3)``,
    ``(D,3,3)``, ``(D,3,3)``.
    """
    n_joints = len(dof_start) - 1
    n_dofs = len(q)
    A = np.tile(np.eye(3), (n_joints, 1, 1))
    tloc = np.zeros((n_joints, 3))
    prefix = np.tile(np.eye(3), (n_dofs, 1, 1))
    suffix = np.tile(np.eye(3), (n_dofs, 1, 1))
    for j in range(n_joints):
        lo, hi = dof_start[j], dof_start[j + 1]
        rot_ids = [d for d in range(lo, hi) if dof_kind[d] == 0]
        rots = [_rodrigues(dof_axis[d], q[d]) for d in rot_ids]
        for d in range(lo, hi):
            if dof_kind[d] == 1:
                tloc[j] += dof_axis[d] * q[d]
        acc = np.eye(3)
        for p, d in enumerate(rot_ids):
            prefix[d] = acc
            acc = acc @ rots[p]
        A[j] = acc
        acc = np.eye(3)
        for p in range(len(rot_ids) - 1, -1, -1):
            acc = rots[p] @ acc
            suffix[rot_ids[p]] = acc
    return A, tloc, prefix, suffix


def fk_forward(A, tloc, offsets, parents, order):
    """World rotations and position drifts of every joint.

    ``offsets[j]`` is the rest offset from the parent (the rest position for
    the root).  The drift is the joint's world position minus its rest
    position: zero for the root up to its translation DoFs, and
    ``drift_parent + Rw_parent @ (offset + tloc) - offset`` for children.
    """
    n_joints = A.shape[0]
    Rw = np.empty((n_joints, 3, 3))
    drift = np.empty((n_joints, 3))
    for j in order:
        p = parents[j]
        if p < 0:
            Rw[j] = A[j]
            drift[j] = tloc[j]
        else:
            Rw[j] = Rw[p] @ A[j]
            drift[j] = drift[p] + Rw[p] @ (offsets[j] + tloc[j]) - offsets[j]
    return Rw, drift


def fk_backward(gRw, gd, A, offsets_full, parents, order, Rw):
    """Pull world rotation/drift gradients back to the local quantities.

    ``offsets_full = offsets + tloc``.  Inputs are consumed (copied
    internally).  Returns ``(gA, gu, gd_acc)``: gradients w.r.t. each
    joint's local rotation and its full local offset ``u = offset + tloc``
    (for the root, ``gu`` is the gradient w.r.t. ``tloc`` alone), plus the
    accumulated drift gradient per joint, needed by the caller for the
    explicit ``- offset`` term of the drift recursion.
    """
    gRw = gRw.copy()
    gd = gd.copy()
    n_joints = A.shape[0]
    gA = np.zeros((n_joints, 3, 3))
    gu = np.zeros((n_joints, 3))
    for j in order[::-1]:
        p = parents[j]
        if p < 0:
            gA[j] = gRw[j]
            gu[j] = gd[j]
        else:
            gRw[p] += gRw[j] @ A[j].T + np.outer(gd[j], offsets_full[j])
            gd[p] += gd[j]
            gA[j] = Rw[p].T @ gRw[j]
            gu[j] = Rw[p].T @ gd[j]
    return gA, gu, gd


def skin_forward(Rw, drift, rest_joints, weights, v_shaped):
    """Blend skinning as a displacement from the shaped vertices:

    v' = v + sum_j w_vj ((Rw_j - I)(v - r_j) + drift_j)
    """
    eye = np.eye(3)
    out = v_shaped.copy()
    for j in range(Rw.shape[0]):
        w = weights[:, j]
        if not np.any(w):
            continue
        rot = Rw[j] - eye
        out += w[:, None] * ((v_shaped - rest_joints[j]) @ rot.T + drift[j])
    return out


def skin_backward(gv, Rw, rest_joints, weights, v_shaped):
    """Adjoint of ``skin_forward``.

    Returns ``(gRw, gd, gv_shaped, g_rest_joints)``.
    """
    eye = np.eye(3)
    n_joints = Rw.shape[0]
    gRw = np.zeros((n_joints, 3, 3))
    gd = weights.T @ gv
    gvs = gv.copy()
    grj = np.zeros((n_joints, 3))
    for j in range(n_joints):
        w = weights[:, j]
        if not np.any(w):
            continue
        rot = Rw[j] - eye
        wg = w[:, None] * gv
        gRw[j] = wg.T @ (v_shaped - rest_joints[j])
        gvs += wg @ rot
        grj[j] = -rot.T @ gd[j]
    return gRw, gd, gvs, grj


def dof_gradients(gA, gu, prefix, suffix, dof_axis, dof_kind, dof_start):
    """Per-DoF gradient from local rotation/offset gradients."""
    n_joints = len(dof_start) - 1
    gq = np.zeros(len(dof_kind))
    for j in range(n_joints):
        for d in range(dof_start[j], dof_start[j + 1]):
            if dof_kind[d] == 0:
                m = prefix[d] @ _skew(dof_axis[d]) @ suffix[d]
                gq[d] = np.sum(gA[j] * m)
            else:
                gq[d] = dof_axis[d] @ gu[j]
    return gq
