# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Each function here has a numpy twin in ``_kernels_py`` with the same
signature; ``latentmodes.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, atan2, floor, M_PI, INFINITY

cnp.import_array()


def jacobi_eigh(double[:, ::1] A_in, double tol=1e-14, int max_sweeps=100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Pairs are visited in round-robin (tournament) order so the rotation
    sequence matches the vectorized fallback. Returns unsorted
    ``(eigvals, eigvecs, sweeps)``.
    """
    cdef Py_ssize_t n = A_in.shape[0]
    A_np = np.array(A_in, dtype=np.float64, copy=True)
    V_np = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] A = A_np
    cdef double[:, ::1] V = V_np
    if n <= 1:
        return np.diag(A_np).copy(), V_np, 0

    cdef Py_ssize_t m = n if n % 2 == 0 else n + 1
    order_np = np.arange(m, dtype=np.intp)
    cdef Py_ssize_t[::1] order = order_np
    cdef Py_ssize_t sweep, rnd, i, k, p, q, tmpi
    cdef double apq, app, aqq, theta, t, c, s, akp, akq, off, scale
    cdef Py_ssize_t n_pairs = m // 2

    scale = 0.0
    for i in range(n):
        for k in range(n):
            scale += A[i, k] * A[i, k]
    scale = sqrt(scale)
    if scale == 0.0:
        return np.zeros(n), V_np, 0

    sweep = 0
    while sweep < max_sweeps:
        off = 0.0
        for i in range(n):
            for k in range(i + 1, n):
                off += A[i, k] * A[i, k]
        if sqrt(2.0 * off) <= tol * scale:
            break
        for rnd in range(m - 1):
            for i in range(n_pairs):
                p = order[i]
                q = order[m - 1 - i]
                if p >= n or q >= n:
                    continue
                if p > q:
                    tmpi = p
                    p = q
                    q = tmpi
                apq = A[p, q]
                if apq == 0.0:
                    continue
                app = A[p, p]
                aqq = A[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + sqrt(1.0 + theta * theta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(n):
                    akp = A[p, k]
                    akq = A[q, k]
                    A[p, k] = c * akp - s * akq
                    A[q, k] = s * akp + c * akq
                A[p, q] = 0.0
                A[q, p] = 0.0
                for k in range(n):
                    akp = V[k, p]
                    akq = V[k, q]
                    V[k, p] = c * akp - s * akq
                    V[k, q] = s * akp + c * akq
            # rotate every slot except the first
            tmpi = order[m - 1]
            for i in range(m - 1, 1, -1):
                order[i] = order[i - 1]
            order[1] = tmpi
        sweep += 1
    return np.diag(A_np).copy(), V_np, sweep


cdef inline void _heap_insert(double* best, Py_ssize_t k, double v) nogil:
    # best is kept sorted ascending; best[k-1] is the current k-th smallest
    cdef Py_ssize_t j = k - 1
    if v >= best[j]:
        return
    while j > 0 and best[j - 1] > v:
        best[j] = best[j - 1]
        j -= 1
    best[j] = v


def knn_kth_distance(double[:, ::1] query, double[:, ::1] ref, int k, bint exclude_self=False):
    """Distance from each query row to its k-th nearest row of ``ref``.

    With ``exclude_self`` the query and reference sets are the same array
    and index i never counts as a neighbor of itself.
    """
    cdef Py_ssize_t nq = query.shape[0], nr = ref.shape[0], d = query.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double acc, diff
    out_np = np.empty(nq, dtype=np.float64)
    cdef double[::1] out = out_np
    best_np = np.empty(k, dtype=np.float64)
    cdef double[::1] best = best_np
    for i in range(nq):
        for c in range(k):
            best[c] = INFINITY
        for j in range(nr):
            if exclude_self and i == j:
                continue
            acc = 0.0
            for c in range(d):
                diff = query[i, c] - ref[j, c]
                acc += diff * diff
            _heap_insert(&best[0], k, acc)
        out[i] = sqrt(best[k - 1])
    return out_np


def hog_cells(double[:, ::1] gray, int cell, int bins):
    """Unsigned orientation histograms, one per ``cell``x``cell`` block.

    Gradients are centered differences on an edge-replicated image; each
    pixel votes its magnitude into the two nearest bin centers (centers at
    ``b * pi / bins``). Returns an array of shape (rows, cols, bins),
    unnormalized.
    """
    cdef Py_ssize_t H = gray.shape[0], W = gray.shape[1]
    cdef Py_ssize_t gh = H // cell, gw = W // cell
    out_np = np.zeros((gh, gw, bins), dtype=np.float64)
    cdef double[:, :, ::1] out = out_np
    cdef Py_ssize_t y, x, ym, yp, xm, xp, b0, b1
    cdef double gx, gy, mag, ang, pos, frac, width = M_PI / bins
    for y in range(gh * cell):
        ym = y - 1 if y > 0 else 0
        yp = y + 1 if y < H - 1 else H - 1
        for x in range(gw * cell):
            xm = x - 1 if x > 0 else 0
            xp = x + 1 if x < W - 1 else W - 1
            gx = gray[y, xp] - gray[y, xm]
            gy = gray[yp, x] - gray[ym, x]
            mag = sqrt(gx * gx + gy * gy)
            if mag == 0.0:
                continue
            ang = atan2(gy, gx)
            if ang < 0:
                ang += M_PI
            if ang >= M_PI:
                ang -= M_PI
            pos = ang / width
            b0 = <Py_ssize_t>floor(pos)
            frac = pos - b0
            b0 = b0 % bins
            b1 = (b0 + 1) % bins
            out[y // cell, x // cell, b0] += mag * (1.0 - frac)
            out[y // cell, x // cell, b1] += mag * frac
    return out_np
