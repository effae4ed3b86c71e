"""Compiled RANSAC loop for rigid registration from putative correspondences."""

import math

import numpy as np
from numba import njit


_MUL = np.uint64(2685821657736338717)


@njit(cache=True, inline="always")
def _draw(state, n):
    """Uniform integer in [0, n) from a xorshift64* stream held in state[0]."""
    x = state[0]
    x ^= x >> np.uint64(12)
    x ^= x << np.uint64(25)
    x ^= x >> np.uint64(27)
    state[0] = x
    return np.int64(((x * _MUL) >> np.uint64(33)) % np.uint64(n))


@njit(cache=True)
def _kabsch3(a, b):
    """Rigid (R, t) with R a_k + t ~ b_k for three points."""
    ca = (a[0] + a[1] + a[2]) / 3.0
    cb = (b[0] + b[1] + b[2]) / 3.0
    h = np.zeros((3, 3))
    for k in range(3):
        for r in range(3):
            for c in range(3):
                h[r, c] += (b[k, r] - cb[r]) * (a[k, c] - ca[c])
    u, _, vt = np.linalg.svd(h)
    d = np.linalg.det(u @ vt)
    if d < 0:
        for r in range(3):
            u[r, 2] = -u[r, 2]
    rot = u @ vt
    t = cb - rot @ ca
    return rot, t


@njit(cache=True)
def _frame_rotation(a, b):
    """Rotation taking the orthonormal frame of triangle a onto that of triangle b."""
    fa = np.empty((3, 3))
    fb = np.empty((3, 3))
    for f, p in ((fa, a), (fb, b)):
        e1 = p[1] - p[0]
        e1 /= math.sqrt(e1[0] ** 2 + e1[1] ** 2 + e1[2] ** 2)
        e2 = p[2] - p[0]
        n = np.array([e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]])
        n /= math.sqrt(n[0] ** 2 + n[1] ** 2 + n[2] ** 2)
        e3 = np.array([n[1] * e1[2] - n[2] * e1[1], n[2] * e1[0] - n[0] * e1[2], n[0] * e1[1] - n[1] * e1[0]])
        f[:, 0] = e1
        f[:, 1] = e3
        f[:, 2] = n
    return fb @ fa.T


@njit(cache=True)
def _agrees(rot, t, a, b, thr2):
    for r in range(3):
        m = rot @ a[r] + t - b[r]
        if m[0] * m[0] + m[1] * m[1] + m[2] * m[2] >= thr2:
            return False
    return True


@njit(cache=True)
def ransac_rigid(src, dst, thr, edge_similarity, max_iterations, confidence, seed):
    """Best (R, t, inlier count, iterations used) over triples of corresponding points."""
    state = np.array([np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(0x2545F4914F6CDD1D)])
    for _ in range(4):
        _draw(state, 2)
    n = src.shape[0]
    best_rot = np.eye(3)
    best_t = np.zeros(3)
    best_count = -1
    budget = max_iterations
    thr2 = thr * thr
    sim2 = edge_similarity * edge_similarity
    a = np.empty((3, 3))
    b = np.empty((3, 3))
    it = 0
    while it < budget:
        it += 1
        i = _draw(state, n)
        j = _draw(state, n - 1)
        if j >= i:
            j += 1
        k = _draw(state, n - 2)
        lo = min(i, j)
        hi = max(i, j)
        if k >= lo:
            k += 1
        if k >= hi:
            k += 1
        # edge-length consistency on the raw arrays before copying anything
        ok = True
        longest = 0.0
        for p, q in ((i, j), (i, k), (j, k)):
            ls = ((src[p, 0] - src[q, 0]) ** 2 + (src[p, 1] - src[q, 1]) ** 2
                  + (src[p, 2] - src[q, 2]) ** 2)
            ld = ((dst[p, 0] - dst[q, 0]) ** 2 + (dst[p, 1] - dst[q, 1]) ** 2
                  + (dst[p, 2] - dst[q, 2]) ** 2)
            if ls < sim2 * ld or ld < sim2 * ls:
                ok = False
                break
            longest = max(longest, ls)
        if not ok:
            continue
        for c in range(3):
            a[0, c] = src[i, c]
            a[1, c] = src[j, c]
            a[2, c] = src[k, c]
            b[0, c] = dst[i, c]
            b[1, c] = dst[j, c]
            b[2, c] = dst[k, c]
        e1 = a[1] - a[0]
        e2 = a[2] - a[0]
        cx = e1[1] * e2[2] - e1[2] * e2[1]
        cy = e1[2] * e2[0] - e1[0] * e2[2]
        cz = e1[0] * e2[1] - e1[1] * e2[0]
        if math.sqrt(cx * cx + cy * cy + cz * cz) <= 1e-3 * longest:
            continue
        # cheap screen with the triangle-frame rotation before the least-squares fit
        rot = _frame_rotation(a, b)
        t = (b[0] + b[1] + b[2]) / 3.0 - rot @ ((a[0] + a[1] + a[2]) / 3.0)
        if not _agrees(rot, t, a, b, 4.0 * thr2):
            continue
        rot, t = _kabsch3(a, b)
        if not _agrees(rot, t, a, b, thr2):
            continue
        count = 0
        for p in range(n):
            x = rot[0, 0] * src[p, 0] + rot[0, 1] * src[p, 1] + rot[0, 2] * src[p, 2] + t[0] - dst[p, 0]
            y = rot[1, 0] * src[p, 0] + rot[1, 1] * src[p, 1] + rot[1, 2] * src[p, 2] + t[1] - dst[p, 1]
            z = rot[2, 0] * src[p, 0] + rot[2, 1] * src[p, 1] + rot[2, 2] * src[p, 2] + t[2] - dst[p, 2]
            if x * x + y * y + z * z < thr2:
                count += 1
        if count > best_count:
            best_count = count
            best_rot = rot.copy()
            best_t = t.copy()
            w = (count / n) ** 3
            if w >= 1.0:
                budget = it
            elif w > 0.0:
                need = math.log(1.0 - confidence) / math.log(1.0 - w)
                if need < budget:
                    budget = max(it, int(math.ceil(need)))
    return best_rot, best_t, best_count, it
