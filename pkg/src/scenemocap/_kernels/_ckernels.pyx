# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometric kernels: capsule occupancy counts and brute-force nearest neighbours."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def capsule_inside_counts(points, seg_a, seg_b, radii):
    cdef double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[:, :, ::1] A = np.ascontiguousarray(seg_a, dtype=np.float64)
    cdef double[:, :, ::1] Bv = np.ascontiguousarray(seg_b, dtype=np.float64)
    cdef double[:, ::1] R = np.ascontiguousarray(radii, dtype=np.float64)
    cdef Py_ssize_t n_s = A.shape[0], n_b = A.shape[1], n_p = P.shape[0]
    counts_arr = np.zeros(n_s, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = counts_arr
    if n_p == 0 or n_s == 0:
        return counts_arr

    # per-bone expanded bounding boxes used for early rejection
    box_arr = np.empty((n_b, 6), dtype=np.float64)
    cdef double[:, ::1] box = box_arr
    cdef Py_ssize_t s, b, p
    cdef double ax, ay, az, bx, by, bz, ab2, r, r2
    cdef double apx, apy, apz, t, dx, dy, dz, d2, x, y, z
    cdef cnp.int64_t c
    cdef bint hit

    with nogil:
        for s in range(n_s):
            for b in range(n_b):
                r = R[s, b]
                box[b, 0] = min(A[s, b, 0], Bv[s, b, 0]) - r
                box[b, 1] = max(A[s, b, 0], Bv[s, b, 0]) + r
                box[b, 2] = min(A[s, b, 1], Bv[s, b, 1]) - r
                box[b, 3] = max(A[s, b, 1], Bv[s, b, 1]) + r
                box[b, 4] = min(A[s, b, 2], Bv[s, b, 2]) - r
                box[b, 5] = max(A[s, b, 2], Bv[s, b, 2]) + r
            c = 0
            for p in range(n_p):
                x = P[p, 0]
                y = P[p, 1]
                z = P[p, 2]
                hit = False
                for b in range(n_b):
                    if (x < box[b, 0] or x > box[b, 1] or y < box[b, 2]
                            or y > box[b, 3] or z < box[b, 4] or z > box[b, 5]):
                        continue
                    ax = A[s, b, 0]
                    ay = A[s, b, 1]
                    az = A[s, b, 2]
                    bx = Bv[s, b, 0] - ax
                    by = Bv[s, b, 1] - ay
                    bz = Bv[s, b, 2] - az
                    ab2 = bx * bx + by * by + bz * bz
                    apx = x - ax
                    apy = y - ay
                    apz = z - az
                    if ab2 > 0.0:
                        t = (apx * bx + apy * by + apz * bz) / ab2
                    else:
                        t = 0.0
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                    dx = apx - t * bx
                    dy = apy - t * by
                    dz = apz - t * bz
                    d2 = dx * dx + dy * dy + dz * dz
                    r2 = R[s, b] * R[s, b]
                    if d2 < r2:
                        hit = True
                        break
                if hit:
                    c += 1
            counts[s] = c
    return counts_arr


def nearest_sq(queries, targets):
    cdef double[:, ::1] Q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef double[:, ::1] T = np.ascontiguousarray(targets, dtype=np.float64)
    cdef Py_ssize_t n_q = Q.shape[0], n_t = T.shape[0], i, j
    if n_t == 0:
        raise ValueError("nearest_sq needs at least one target")
    idx_arr = np.empty(n_q, dtype=np.int64)
    d2_arr = np.empty(n_q, dtype=np.float64)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef double[::1] out = d2_arr
    cdef double qx, qy, qz, dx, dy, dz, d2, best
    cdef cnp.int64_t arg
    with nogil:
        for i in range(n_q):
            qx = Q[i, 0]
            qy = Q[i, 1]
            qz = Q[i, 2]
            best = 0.0
            arg = -1
            for j in range(n_t):
                dx = T[j, 0] - qx
                dy = T[j, 1] - qy
                dz = T[j, 2] - qz
                d2 = dx * dx + dy * dy + dz * dz
                if arg < 0 or d2 < best:
                    best = d2
                    arg = j
            idx[i] = arg
            out[i] = best
    return idx_arr, d2_arr
