# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of ``skelfit._kernels_py``.

Same functions, same conventions (see the pure module's docstring); the
loops here are plain C over typed memoryviews, which is what makes small
per-call problems fast inside the fitting loop.
"""

import numpy as np

from libc.math cimport sin, cos

BACKEND = "cython"


cdef inline void _rodrigues(double x, double y, double z, double angle,
                            double[:, ::1] out) noexcept nogil:
    cdef double s = sin(angle)
    cdef double c = cos(angle)
    cdef double t = 1.0 - c
    out[0, 0] = c + x * x * t
    out[0, 1] = x * y * t - z * s
    out[0, 2] = x * z * t + y * s
    out[1, 0] = x * y * t + z * s
    out[1, 1] = c + y * y * t
    out[1, 2] = y * z * t - x * s
    out[2, 0] = x * z * t - y * s
    out[2, 1] = y * z * t + x * s
    out[2, 2] = c + z * z * t


cdef inline void _mm(double[:, :] a, double[:, :] b, double[:, :] out) noexcept nogil:
    # out must not alias a or b
    cdef int i, j
    for i in range(3):
        for j in range(3):
            out[i, j] = a[i, 0] * b[0, j] + a[i, 1] * b[1, j] + a[i, 2] * b[2, j]


cdef inline void _copy33(double[:, :] src, double[:, :] dst) noexcept nogil:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            dst[i, j] = src[i, j]


def local_transforms(q, dof_axis, dof_kind, dof_start):
    cdef double[::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[:, ::1] axis = np.ascontiguousarray(dof_axis, dtype=np.float64)
    cdef signed char[::1] kind = np.ascontiguousarray(dof_kind, dtype=np.int8)
    cdef int[::1] start = np.ascontiguousarray(dof_start, dtype=np.int32)
    cdef int n_joints = start.shape[0] - 1
    cdef int n_dofs = qv.shape[0]

    A_arr = np.tile(np.eye(3), (n_joints, 1, 1))
    tloc_arr = np.zeros((n_joints, 3))
    prefix_arr = np.tile(np.eye(3), (n_dofs, 1, 1))
    suffix_arr = np.tile(np.eye(3), (n_dofs, 1, 1))
    cdef double[:, :, ::1] A = A_arr
    cdef double[:, ::1] tloc = tloc_arr
    cdef double[:, :, ::1] prefix = prefix_arr
    cdef double[:, :, ::1] suffix = suffix_arr

    rot_buf = np.empty((3, 3, 3))
    acc_buf = np.empty((3, 3))
    tmp_buf = np.empty((3, 3))
    cdef double[:, :, ::1] rots = rot_buf
    cdef double[:, ::1] acc = acc_buf
    cdef double[:, ::1] tmp = tmp_buf
    cdef int rot_ids[3]
    cdef int j, d, p, n_rot, c
    with nogil:
        for j in range(n_joints):
            n_rot = 0
            for d in range(start[j], start[j + 1]):
                if kind[d] == 0:
                    rot_ids[n_rot] = d
                    _rodrigues(axis[d, 0], axis[d, 1], axis[d, 2], qv[d], rots[n_rot])
                    n_rot += 1
                else:
                    for c in range(3):
                        tloc[j, c] += axis[d, c] * qv[d]
            # prefix products (acc starts at identity)
            for c in range(3):
                acc[c, 0] = 0.0
                acc[c, 1] = 0.0
                acc[c, 2] = 0.0
                acc[c, c] = 1.0
            for p in range(n_rot):
                _copy33(acc, prefix[rot_ids[p]])
                _mm(acc, rots[p], tmp)
                _copy33(tmp, acc)
            _copy33(acc, A[j])
            # suffix products
            for c in range(3):
                acc[c, 0] = 0.0
                acc[c, 1] = 0.0
                acc[c, 2] = 0.0
                acc[c, c] = 1.0
            for p in range(n_rot - 1, -1, -1):
                _mm(rots[p], acc, tmp)
                _copy33(tmp, acc)
                _copy33(acc, suffix[rot_ids[p]])
    return A_arr, tloc_arr, prefix_arr, suffix_arr


def fk_forward(A, tloc, offsets, parents, order):
    cdef double[:, :, ::1] Am = np.ascontiguousarray(A, dtype=np.float64)
    cdef double[:, ::1] tl = np.ascontiguousarray(tloc, dtype=np.float64)
    cdef double[:, ::1] off = np.ascontiguousarray(offsets, dtype=np.float64)
    cdef int[::1] par = np.ascontiguousarray(parents, dtype=np.int32)
    cdef int[::1] orderv = np.ascontiguousarray(order, dtype=np.int32)
    cdef int n_joints = Am.shape[0]

    Rw_arr = np.empty((n_joints, 3, 3))
    drift_arr = np.empty((n_joints, 3))
    cdef double[:, :, ::1] Rw = Rw_arr
    cdef double[:, ::1] drift = drift_arr
    cdef int oi, j, p, c
    cdef double u0, u1, u2
    with nogil:
        for oi in range(n_joints):
            j = orderv[oi]
            p = par[j]
            u0 = off[j, 0] + tl[j, 0]
            u1 = off[j, 1] + tl[j, 1]
            u2 = off[j, 2] + tl[j, 2]
            if p < 0:
                _copy33(Am[j], Rw[j])
                drift[j, 0] = tl[j, 0]
                drift[j, 1] = tl[j, 1]
                drift[j, 2] = tl[j, 2]
            else:
                _mm(Rw[p], Am[j], Rw[j])
                for c in range(3):
                    drift[j, c] = (
                        drift[p, c]
                        + Rw[p, c, 0] * u0 + Rw[p, c, 1] * u1 + Rw[p, c, 2] * u2
                        - off[j, c]
                    )
    return Rw_arr, drift_arr


def fk_backward(gRw, gd, A, offsets_full, parents, order, Rw):
    gR_arr = np.array(gRw, dtype=np.float64, copy=True, order="C")
    gd_arr = np.array(gd, dtype=np.float64, copy=True, order="C")
    cdef double[:, :, ::1] gR = gR_arr
    cdef double[:, ::1] gdm = gd_arr
    cdef double[:, :, ::1] Am = np.ascontiguousarray(A, dtype=np.float64)
    cdef double[:, ::1] off = np.ascontiguousarray(offsets_full, dtype=np.float64)
    cdef int[::1] par = np.ascontiguousarray(parents, dtype=np.int32)
    cdef int[::1] orderv = np.ascontiguousarray(order, dtype=np.int32)
    cdef double[:, :, ::1] Rwm = np.ascontiguousarray(Rw, dtype=np.float64)
    cdef int n_joints = Am.shape[0]

    gA_arr = np.zeros((n_joints, 3, 3))
    gu_arr = np.zeros((n_joints, 3))
    cdef double[:, :, ::1] gA = gA_arr
    cdef double[:, ::1] gu = gu_arr
    cdef int oi, j, p, c, d
    with nogil:
        for oi in range(n_joints - 1, -1, -1):
            j = orderv[oi]
            p = par[j]
            if p < 0:
                _copy33(gR[j], gA[j])
                gu[j, 0] = gdm[j, 0]
                gu[j, 1] = gdm[j, 1]
                gu[j, 2] = gdm[j, 2]
            else:
                # gR[p] += gR[j] @ A[j].T + outer(gd[j], off[j])
                for c in range(3):
                    for d in range(3):
                        gR[p, c, d] += (
                            gR[j, c, 0] * Am[j, d, 0]
                            + gR[j, c, 1] * Am[j, d, 1]
                            + gR[j, c, 2] * Am[j, d, 2]
                            + gdm[j, c] * off[j, d]
                        )
                for c in range(3):
                    gdm[p, c] += gdm[j, c]
                # gA[j] = Rw[p].T @ gR[j]; gu[j] = Rw[p].T @ gd[j]
                for c in range(3):
                    for d in range(3):
                        gA[j, c, d] = (
                            Rwm[p, 0, c] * gR[j, 0, d]
                            + Rwm[p, 1, c] * gR[j, 1, d]
                            + Rwm[p, 2, c] * gR[j, 2, d]
                        )
                for c in range(3):
                    gu[j, c] = (
                        Rwm[p, 0, c] * gdm[j, 0]
                        + Rwm[p, 1, c] * gdm[j, 1]
                        + Rwm[p, 2, c] * gdm[j, 2]
                    )
    return gA_arr, gu_arr, gd_arr


def skin_forward(Rw, drift, rest_joints, weights, v_shaped):
    cdef double[:, :, ::1] Rwm = np.ascontiguousarray(Rw, dtype=np.float64)
    cdef double[:, ::1] dr = np.ascontiguousarray(drift, dtype=np.float64)
    cdef double[:, ::1] rj = np.ascontiguousarray(rest_joints, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[:, ::1] v = np.ascontiguousarray(v_shaped, dtype=np.float64)
    cdef int n = v.shape[0]
    cdef int n_joints = Rwm.shape[0]

    out_arr = np.array(v_shaped, dtype=np.float64, copy=True, order="C")
    cdef double[:, ::1] out = out_arr
    cdef int i, j, c
    cdef double wij, d0, d1, d2, m0, m1, m2
    with nogil:
        for i in range(n):
            for j in range(n_joints):
                wij = w[i, j]
                if wij == 0.0:
                    continue
                d0 = v[i, 0] - rj[j, 0]
                d1 = v[i, 1] - rj[j, 1]
                d2 = v[i, 2] - rj[j, 2]
                # (Rw - I) @ d + drift
                m0 = Rwm[j, 0, 0] * d0 + Rwm[j, 0, 1] * d1 + Rwm[j, 0, 2] * d2 - d0 + dr[j, 0]
                m1 = Rwm[j, 1, 0] * d0 + Rwm[j, 1, 1] * d1 + Rwm[j, 1, 2] * d2 - d1 + dr[j, 1]
                m2 = Rwm[j, 2, 0] * d0 + Rwm[j, 2, 1] * d1 + Rwm[j, 2, 2] * d2 - d2 + dr[j, 2]
                out[i, 0] += wij * m0
                out[i, 1] += wij * m1
                out[i, 2] += wij * m2
    return out_arr


def skin_backward(gv, Rw, rest_joints, weights, v_shaped):
    cdef double[:, ::1] g = np.ascontiguousarray(gv, dtype=np.float64)
    cdef double[:, :, ::1] Rwm = np.ascontiguousarray(Rw, dtype=np.float64)
    cdef double[:, ::1] rj = np.ascontiguousarray(rest_joints, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[:, ::1] v = np.ascontiguousarray(v_shaped, dtype=np.float64)
    cdef int n = v.shape[0]
    cdef int n_joints = Rwm.shape[0]

    gRw_arr = np.zeros((n_joints, 3, 3))
    gd_arr = np.zeros((n_joints, 3))
    gvs_arr = np.array(gv, dtype=np.float64, copy=True, order="C")
    grj_arr = np.zeros((n_joints, 3))
    cdef double[:, :, ::1] gRw = gRw_arr
    cdef double[:, ::1] gd = gd_arr
    cdef double[:, ::1] gvs = gvs_arr
    cdef double[:, ::1] grj = grj_arr
    cdef int i, j, c, d
    cdef double wij, d0, d1, d2, gc
    with nogil:
        for i in range(n):
            for j in range(n_joints):
                wij = w[i, j]
                if wij == 0.0:
                    continue
                d0 = v[i, 0] - rj[j, 0]
                d1 = v[i, 1] - rj[j, 1]
                d2 = v[i, 2] - rj[j, 2]
                for c in range(3):
                    gc = wij * g[i, c]
                    gd[j, c] += gc
                    gRw[j, c, 0] += gc * d0
                    gRw[j, c, 1] += gc * d1
                    gRw[j, c, 2] += gc * d2
                # (Rw - I)^T g, accumulated on top of the identity part
                for d in range(3):
                    gvs[i, d] += wij * (
                        Rwm[j, 0, d] * g[i, 0] + Rwm[j, 1, d] * g[i, 1] + Rwm[j, 2, d] * g[i, 2]
                        - g[i, d]
                    )
        for j in range(n_joints):
            for d in range(3):
                grj[j, d] = -(
                    Rwm[j, 0, d] * gd[j, 0] + Rwm[j, 1, d] * gd[j, 1] + Rwm[j, 2, d] * gd[j, 2]
                    - gd[j, d]
                )
    return gRw_arr, gd_arr, gvs_arr, grj_arr


def dof_gradients(gA, gu, prefix, suffix, dof_axis, dof_kind, dof_start):
    cdef double[:, :, ::1] gAm = np.ascontiguousarray(gA, dtype=np.float64)
    cdef double[:, ::1] goffm = np.ascontiguousarray(gu, dtype=np.float64)
    cdef double[:, :, ::1] pre = np.ascontiguousarray(prefix, dtype=np.float64)
    cdef double[:, :, ::1] suf = np.ascontiguousarray(suffix, dtype=np.float64)
    cdef double[:, ::1] axis = np.ascontiguousarray(dof_axis, dtype=np.float64)
    cdef signed char[::1] kind = np.ascontiguousarray(dof_kind, dtype=np.int8)
    cdef int[::1] start = np.ascontiguousarray(dof_start, dtype=np.int32)
    cdef int n_joints = start.shape[0] - 1
    cdef int n_dofs = kind.shape[0]

    gq_arr = np.zeros(n_dofs)
    cdef double[::1] gq = gq_arr
    ks_buf = np.empty((3, 3))
    m_buf = np.empty((3, 3))
    cdef double[:, ::1] ks = ks_buf
    cdef double[:, ::1] m = m_buf
    cdef int j, d, c, e
    cdef double ax, ay, az, acc
    with nogil:
        for j in range(n_joints):
            for d in range(start[j], start[j + 1]):
                if kind[d] == 0:
                    ax = axis[d, 0]
                    ay = axis[d, 1]
                    az = axis[d, 2]
                    # ks = skew(axis) @ suffix[d]
                    for e in range(3):
                        ks[0, e] = -az * suf[d, 1, e] + ay * suf[d, 2, e]
                        ks[1, e] = az * suf[d, 0, e] - ax * suf[d, 2, e]
                        ks[2, e] = -ay * suf[d, 0, e] + ax * suf[d, 1, e]
                    _mm(pre[d], ks, m)
                    acc = 0.0
                    for c in range(3):
                        for e in range(3):
                            acc += gAm[j, c, e] * m[c, e]
                    gq[d] = acc
                else:
                    gq[d] = (
                        axis[d, 0] * goffm[j, 0]
                        + axis[d, 1] * goffm[j, 1]
                        + axis[d, 2] * goffm[j, 2]
                    )
    return gq_arr
