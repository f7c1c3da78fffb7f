"""Numpy implementations of the compiled kernels (same signatures)."""
import numpy as np


def _round_robin(m):
    order = list(range(m))
    for _ in range(m - 1):
        yield [(order[i], order[m - 1 - i]) for i in range(m // 2)]
        order = [order[0], order[-1]] + order[1:-1]


def jacobi_eigh(A_in, tol=1e-14, max_sweeps=100):
    A = np.array(A_in, dtype=np.float64, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    if n <= 1:
        return np.diag(A).copy(), V, 0
    scale = np.linalg.norm(A)
    if scale == 0.0:
        return np.zeros(n), V, 0
    m = n if n % 2 == 0 else n + 1
    rounds = []
    for pairs in _round_robin(m):
        pq = np.array([(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n], dtype=np.intp)
        rounds.append((pq[:, 0], pq[:, 1]))
    iu = np.triu_indices(n, 1)
    sweep = 0
    while sweep < max_sweeps:
        if np.sqrt(2.0 * np.sum(A[iu] ** 2)) <= tol * scale:
            break
        for P, Q in rounds:
            apq = A[P, Q]
            live = apq != 0.0
            if not live.any():
                continue
            safe = np.where(live, apq, 1.0)
            theta = (A[Q, Q] - A[P, P]) / (2.0 * safe)
            root = np.sqrt(1.0 + theta * theta)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + root)
            t = np.where(live, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            Ap, Aq = A[:, P].copy(), A[:, Q].copy()
            A[:, P] = c * Ap - s * Aq
            A[:, Q] = s * Ap + c * Aq
            Ap, Aq = A[P, :].copy(), A[Q, :].copy()
            A[P, :] = c[:, None] * Ap - s[:, None] * Aq
            A[Q, :] = s[:, None] * Ap + c[:, None] * Aq
            A[P, Q] = np.where(live, 0.0, A[P, Q])
            A[Q, P] = np.where(live, 0.0, A[Q, P])
            Vp, Vq = V[:, P].copy(), V[:, Q].copy()
            V[:, P] = c * Vp - s * Vq
            V[:, Q] = s * Vp + c * Vq
        sweep += 1
    return np.diag(A).copy(), V, sweep


def knn_kth_distance(query, ref, k, exclude_self=False, chunk=512):
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    out = np.empty(len(query))
    ref_sq = np.einsum("ij,ij->i", ref, ref)
    for start in range(0, len(query), chunk):
        q = query[start:start + chunk]
        d2 = np.einsum("ij,ij->i", q, q)[:, None] + ref_sq[None, :] - 2.0 * q @ ref.T
        np.maximum(d2, 0.0, out=d2)
        if exclude_self:
            rows = np.arange(len(q))
            d2[rows, start + rows] = np.inf
        out[start:start + chunk] = np.sqrt(np.partition(d2, k - 1, axis=1)[:, k - 1])
    return out


def hog_cells(gray, cell, bins):
    gray = np.asarray(gray, dtype=np.float64)
    gh, gw = gray.shape[0] // cell, gray.shape[1] // cell
    g = np.pad(gray, 1, mode="edge")
    gx = g[1:-1, 2:] - g[1:-1, :-2]
    gy = g[2:, 1:-1] - g[:-2, 1:-1]
    gx, gy = gx[: gh * cell, : gw * cell], gy[: gh * cell, : gw * cell]
    mag = np.sqrt(gx * gx + gy * gy)
    ang = np.arctan2(gy, gx)
    ang = np.where(ang < 0, ang + np.pi, ang)
    ang = np.where(ang >= np.pi, ang - np.pi, ang)
    pos = ang / (np.pi / bins)
    b0 = np.floor(pos)
    frac = pos - b0
    b0 = b0.astype(np.intp) % bins
    b1 = (b0 + 1) % bins
    ys, xs = np.indices(mag.shape)
    cell_id = (ys // cell) * gw + xs // cell
    out = np.zeros((gh * gw, bins))
    np.add.at(out, (cell_id, b0), mag * (1.0 - frac))
    np.add.at(out, (cell_id, b1), mag * frac)
    return out.reshape(gh, gw, bins)
