"""Compiled ray-marching kernels shared by field rendering, training, visibility and fusion.

Grids are node-aligned: node (i, j, k) sits at lo + (i, j, k) * spacing and values between
nodes are trilinear. Occupancy is tracked per block of BLOCK^3 cells; a block flagged empty
must have zero density on all of its nodes (including the shared upper faces), which makes
skipping it exact.
"""

import math

import numpy as np
from numba import njit, prange

BLOCK = 8


@njit(cache=True, inline="always")
def ray_box(ox, oy, oz, dx, dy, dz, lo, hi, t_min, t_max):
    t0 = t_min
    t1 = t_max
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return 1.0, 0.0
        else:
            inv = 1.0 / d[a]
            ta = (lo[a] - o[a]) * inv
            tb = (hi[a] - o[a]) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True, inline="always")
def locate(x, y, z, lo, inv_sp, dims):
    gx = (x - lo[0]) * inv_sp[0]
    gy = (y - lo[1]) * inv_sp[1]
    gz = (z - lo[2]) * inv_sp[2]
    if gx < 0.0 or gy < 0.0 or gz < 0.0 or gx > dims[0] - 1 or gy > dims[1] - 1 or gz > dims[2] - 1:
        return -1, 0, 0, 0.0, 0.0, 0.0
    ix = min(int(gx), dims[0] - 2)
    iy = min(int(gy), dims[1] - 2)
    iz = min(int(gz), dims[2] - 2)
    return ix, iy, iz, gx - ix, gy - iy, gz - iz


@njit(cache=True, inline="always")
def locate_clamped(x, y, z, lo, inv_sp, dims):
    gx = min(max((x - lo[0]) * inv_sp[0], 0.0), dims[0] - 1.0)
    gy = min(max((y - lo[1]) * inv_sp[1], 0.0), dims[1] - 1.0)
    gz = min(max((z - lo[2]) * inv_sp[2], 0.0), dims[2] - 1.0)
    ix = min(int(gx), dims[0] - 2)
    iy = min(int(gy), dims[1] - 2)
    iz = min(int(gz), dims[2] - 2)
    return ix, iy, iz, gx - ix, gy - iy, gz - iz


@njit(cache=True, inline="always")
def tri(g, ix, iy, iz, fx, fy, fz):
    c00 = g[ix, iy, iz] * (1 - fx) + g[ix + 1, iy, iz] * fx
    c10 = g[ix, iy + 1, iz] * (1 - fx) + g[ix + 1, iy + 1, iz] * fx
    c01 = g[ix, iy, iz + 1] * (1 - fx) + g[ix + 1, iy, iz + 1] * fx
    c11 = g[ix, iy + 1, iz + 1] * (1 - fx) + g[ix + 1, iy + 1, iz + 1] * fx
    return (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz


@njit(cache=True, inline="always")
def tri_ch(g, ix, iy, iz, fx, fy, fz, ch):
    c00 = g[ix, iy, iz, ch] * (1 - fx) + g[ix + 1, iy, iz, ch] * fx
    c10 = g[ix, iy + 1, iz, ch] * (1 - fx) + g[ix + 1, iy + 1, iz, ch] * fx
    c01 = g[ix, iy, iz + 1, ch] * (1 - fx) + g[ix + 1, iy, iz + 1, ch] * fx
    c11 = g[ix, iy + 1, iz + 1, ch] * (1 - fx) + g[ix + 1, iy + 1, iz + 1, ch] * fx
    return (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz


@njit(cache=True, inline="always")
def block_exit(ox, oy, oz, dx, dy, dz, ix, iy, iz, lo, sp):
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    c = (ix // BLOCK, iy // BLOCK, iz // BLOCK)
    t = np.inf
    for a in range(3):
        if d[a] > 0.0:
            ta = (lo[a] + (c[a] + 1) * BLOCK * sp[a] - o[a]) / d[a]
        elif d[a] < 0.0:
            ta = (lo[a] + c[a] * BLOCK * sp[a] - o[a]) / d[a]
        else:
            continue
        if ta < t:
            t = ta
    return t


@njit(cache=True)
def march(density, color, occ, lo, inv_sp, sp, dims, ox, oy, oz, dx, dy, dz,
          t0, t1, step, offset, bg, sigma_scale, t_stop, shade=True):
    """Emission-absorption quadrature along one ray; returns (r, g, b, depth, opacity).

    With shade=False color is not looked up and r, g, b carry only the background term.
    """
    T = 1.0
    r = 0.0
    g = 0.0
    b = 0.0
    dacc = 0.0
    op = 0.0
    k = 0
    while True:
        t = t0 + (k + offset) * step
        if t >= t1:
            break
        x = ox + t * dx
        y = oy + t * dy
        z = oz + t * dz
        ix, iy, iz, fx, fy, fz = locate(x, y, z, lo, inv_sp, dims)
        if ix < 0:
            k += 1
            continue
        if occ[ix // BLOCK, iy // BLOCK, iz // BLOCK] == 0:
            te = block_exit(ox, oy, oz, dx, dy, dz, ix, iy, iz, lo, sp)
            kn = int(math.ceil((te - t0) / step - offset)) - 1
            k = max(k + 1, kn)
            continue
        sigma = tri(density, ix, iy, iz, fx, fy, fz) * sigma_scale
        if sigma > 0.0:
            alpha = 1.0 - math.exp(-sigma * step)
            w = T * alpha
            if shade:
                r += w * tri_ch(color, ix, iy, iz, fx, fy, fz, 0)
                g += w * tri_ch(color, ix, iy, iz, fx, fy, fz, 1)
                b += w * tri_ch(color, ix, iy, iz, fx, fy, fz, 2)
            dacc += w * t
            op += w
            T *= 1.0 - alpha
            if T < t_stop:
                break
        k += 1
    r += T * bg[0]
    g += T * bg[1]
    b += T * bg[2]
    return r, g, b, dacc / max(op, 1e-8), op


@njit(cache=True, parallel=True)
def render_rays(density, color, occ, lo, hi, inv_sp, sp, dims, origins, dirs, near, far,
                step, bg, sigma_scale, t_stop):
    n = origins.shape[0]
    out = np.empty((n, 5))
    for i in prange(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        t0, t1 = ray_box(ox, oy, oz, dx, dy, dz, lo, hi, near[i], far[i])
        if t0 >= t1:
            out[i, 0], out[i, 1], out[i, 2] = bg[0], bg[1], bg[2]
            out[i, 3] = 0.0
            out[i, 4] = 0.0
            continue
        r, g, b, dep, op = march(density, color, occ, lo, inv_sp, sp, dims, ox, oy, oz,
                                 dx, dy, dz, t0, t1, step, 0.5, bg, sigma_scale, t_stop)
        out[i, 0], out[i, 1], out[i, 2], out[i, 3], out[i, 4] = r, g, b, dep, op
    return out


@njit(cache=True, parallel=True)
def sample_points(density, color, lo, inv_sp, dims, pts):
    """Trilinear (sigma, r, g, b) at points; zero outside the grid box."""
    n = pts.shape[0]
    out = np.zeros((n, 4))
    for i in prange(n):
        ix, iy, iz, fx, fy, fz = locate(pts[i, 0], pts[i, 1], pts[i, 2], lo, inv_sp, dims)
        if ix < 0:
            continue
        out[i, 0] = tri(density, ix, iy, iz, fx, fy, fz)
        for ch in range(3):
            out[i, 1 + ch] = tri_ch(color, ix, iy, iz, fx, fy, fz, ch)
    return out


@njit(cache=True, parallel=True)
def sample_scalar_clamped(grid, lo, inv_sp, dims, pts):
    n = pts.shape[0]
    out = np.empty(n)
    for i in prange(n):
        ix, iy, iz, fx, fy, fz = locate_clamped(pts[i, 0], pts[i, 1], pts[i, 2], lo, inv_sp, dims)
        out[i] = tri(grid, ix, iy, iz, fx, fy, fz)
    return out


@njit(cache=True, parallel=True)
def visibility_counts(density, color, occ, lo, hi, inv_sp, sp, dims, pts, centers, rots, intr,
                      nearfar, step, sigma_scale, t_stop, tau_empty, depth_offset):
    """Per point, the number of cameras that see it (in-image and not occluded)."""
    n = pts.shape[0]
    ncam = centers.shape[0]
    bg = np.zeros(3)
    counts = np.zeros(n, dtype=np.int64)
    for i in prange(n):
        c = 0
        for l in range(ncam):
            vx = pts[i, 0] - centers[l, 0]
            vy = pts[i, 1] - centers[l, 1]
            vz = pts[i, 2] - centers[l, 2]
            zc = rots[l, 0, 2] * vx + rots[l, 1, 2] * vy + rots[l, 2, 2] * vz
            if zc <= 0.0:
                continue
            xc = rots[l, 0, 0] * vx + rots[l, 1, 0] * vy + rots[l, 2, 0] * vz
            yc = rots[l, 0, 1] * vx + rots[l, 1, 1] * vy + rots[l, 2, 1] * vz
            u = intr[l, 0] * xc / zc + intr[l, 2]
            v = intr[l, 1] * yc / zc + intr[l, 3]
            if u < 0.0 or v < 0.0 or u >= intr[l, 4] or v >= intr[l, 5]:
                continue
            dist = math.sqrt(vx * vx + vy * vy + vz * vz)
            if dist == 0.0:
                continue
            dx, dy, dz = vx / dist, vy / dist, vz / dist
            t0, t1 = ray_box(centers[l, 0], centers[l, 1], centers[l, 2], dx, dy, dz, lo, hi,
                             nearfar[l, 0], nearfar[l, 1])
            if t0 >= t1:
                c += 1
                continue
            _, _, _, dep, op = march(density, color, occ, lo, inv_sp, sp, dims,
                                     centers[l, 0], centers[l, 1], centers[l, 2], dx, dy, dz,
                                     t0, t1, step, 0.5, bg, sigma_scale, t_stop, False)
            if op < tau_empty or dist < dep + depth_offset:
                c += 1
        counts[i] = c
    return counts


@njit(cache=True, inline="always")
def _scatter(g, ix, iy, iz, fx, fy, fz, val):
    g[ix, iy, iz] += val * (1 - fx) * (1 - fy) * (1 - fz)
    g[ix + 1, iy, iz] += val * fx * (1 - fy) * (1 - fz)
    g[ix, iy + 1, iz] += val * (1 - fx) * fy * (1 - fz)
    g[ix + 1, iy + 1, iz] += val * fx * fy * (1 - fz)
    g[ix, iy, iz + 1] += val * (1 - fx) * (1 - fy) * fz
    g[ix + 1, iy, iz + 1] += val * fx * (1 - fy) * fz
    g[ix, iy + 1, iz + 1] += val * (1 - fx) * fy * fz
    g[ix + 1, iy + 1, iz + 1] += val * fx * fy * fz


@njit(cache=True, inline="always")
def _scatter_ch(g, ix, iy, iz, fx, fy, fz, ch, val):
    g[ix, iy, iz, ch] += val * (1 - fx) * (1 - fy) * (1 - fz)
    g[ix + 1, iy, iz, ch] += val * fx * (1 - fy) * (1 - fz)
    g[ix, iy + 1, iz, ch] += val * (1 - fx) * fy * (1 - fz)
    g[ix + 1, iy + 1, iz, ch] += val * fx * fy * (1 - fz)
    g[ix, iy, iz + 1, ch] += val * (1 - fx) * (1 - fy) * fz
    g[ix + 1, iy, iz + 1, ch] += val * fx * (1 - fy) * fz
    g[ix, iy + 1, iz + 1, ch] += val * (1 - fx) * fy * fz
    g[ix + 1, iy + 1, iz + 1, ch] += val * fx * fy * fz


@njit(cache=True)
def photometric_backward(density, color, occ, lo, inv_sp, sp, dims, origins, dirs, t0s, t1s,
                         targets, offsets, batch, step, bgs, t_stop, dist_weight, grad_sigma, grad_color):
    """Accumulate gradients of mean squared error plus a weighted distortion penalty.

    The penalty, per ray, is sum_ij w_i w_j |t_i - t_j| + step/3 sum_i w_i^2 over the
    compositing weights; it pulls each ray's weight into a short interval. bgs holds one
    background color per batch ray. Returns (summed squared error, summed penalty); grad
    arrays are added to, not overwritten.
    """
    nb = batch.shape[0]
    norm = 2.0 / (3.0 * nb)
    dscale = dist_weight / nb
    sse = 0.0
    dist_total = 0.0
    maxn = 2
    for bi in range(nb):
        i = batch[bi]
        maxn = max(maxn, int((t1s[i] - t0s[i]) / step) + 2)
    wbuf = np.empty(maxn)
    tbuf = np.empty(maxn)
    Tbuf = np.empty(maxn)
    dbuf = np.zeros(maxn)
    for bi in range(nb):
        i = batch[bi]
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        t0, t1 = t0s[i], t1s[i]
        off = offsets[bi]
        cr, cg, cb, _, _ = march(density, color, occ, lo, inv_sp, sp, dims, ox, oy, oz,
                                 dx, dy, dz, t0, t1, step, off, bgs[bi], 1.0, t_stop)
        er = cr - targets[i, 0]
        eg = cg - targets[i, 1]
        eb = cb - targets[i, 2]
        sse += er * er + eg * eg + eb * eb
        gr, gg, gb = norm * er, norm * eg, norm * eb
        if dist_weight > 0.0:
            n = _collect_weights(density, occ, lo, inv_sp, sp, dims, ox, oy, oz, dx, dy, dz,
                                 t0, t1, step, off, t_stop, wbuf, tbuf, Tbuf)
            dist_total += _distortion_grad(n, wbuf, tbuf, Tbuf, step, dscale, dbuf)
        # second pass: S_k = C - sum_{m<=k} w_m c_m is the radiance arriving from behind sample k
        T = 1.0
        ar = 0.0
        ag = 0.0
        ab = 0.0
        k = 0
        m = 0
        while True:
            t = t0 + (k + off) * step
            if t >= t1:
                break
            x = ox + t * dx
            y = oy + t * dy
            z = oz + t * dz
            ix, iy, iz, fx, fy, fz = locate(x, y, z, lo, inv_sp, dims)
            if ix < 0:
                k += 1
                continue
            if occ[ix // BLOCK, iy // BLOCK, iz // BLOCK] == 0:
                te = block_exit(ox, oy, oz, dx, dy, dz, ix, iy, iz, lo, sp)
                kn = int(math.ceil((te - t0) / step - off)) - 1
                k = max(k + 1, kn)
                continue
            sigma = tri(density, ix, iy, iz, fx, fy, fz)
            if sigma > 0.0:
                alpha = 1.0 - math.exp(-sigma * step)
                w = T * alpha
                c0 = tri_ch(color, ix, iy, iz, fx, fy, fz, 0)
                c1 = tri_ch(color, ix, iy, iz, fx, fy, fz, 1)
                c2 = tri_ch(color, ix, iy, iz, fx, fy, fz, 2)
                ar += w * c0
                ag += w * c1
                ab += w * c2
                tn = T * (1.0 - alpha)
                ds = step * (gr * (tn * c0 - (cr - ar)) + gg * (tn * c1 - (cg - ag))
                             + gb * (tn * c2 - (cb - ab)))
                if dist_weight > 0.0:
                    ds += dbuf[m]
                m += 1
                _scatter(grad_sigma, ix, iy, iz, fx, fy, fz, ds)
                _scatter_ch(grad_color, ix, iy, iz, fx, fy, fz, 0, gr * w)
                _scatter_ch(grad_color, ix, iy, iz, fx, fy, fz, 1, gg * w)
                _scatter_ch(grad_color, ix, iy, iz, fx, fy, fz, 2, gb * w)
                T = tn
                if T < t_stop:
                    break
            k += 1
    return sse, dist_total


@njit(cache=True)
def _collect_weights(density, occ, lo, inv_sp, sp, dims, ox, oy, oz, dx, dy, dz,
                     t0, t1, step, off, t_stop, wbuf, tbuf, Tbuf):
    """Weights, positions and post-sample transmittance of the non-empty samples; returns their count."""
    T = 1.0
    n = 0
    k = 0
    while True:
        t = t0 + (k + off) * step
        if t >= t1:
            break
        ix, iy, iz, fx, fy, fz = locate(ox + t * dx, oy + t * dy, oz + t * dz, lo, inv_sp, dims)
        if ix < 0:
            k += 1
            continue
        if occ[ix // BLOCK, iy // BLOCK, iz // BLOCK] == 0:
            te = block_exit(ox, oy, oz, dx, dy, dz, ix, iy, iz, lo, sp)
            kn = int(math.ceil((te - t0) / step - off)) - 1
            k = max(k + 1, kn)
            continue
        sigma = tri(density, ix, iy, iz, fx, fy, fz)
        if sigma > 0.0:
            alpha = 1.0 - math.exp(-sigma * step)
            wbuf[n] = T * alpha
            tbuf[n] = t
            T *= 1.0 - alpha
            Tbuf[n] = T
            n += 1
            if T < t_stop:
                break
        k += 1
    return n


@njit(cache=True)
def _distortion_grad(n, w, t, Tafter, step, scale, out):
    """Distortion penalty of one ray; out[m] = scale * d(penalty)/d(sigma_m)."""
    wtot = 0.0
    stot = 0.0
    for m in range(n):
        wtot += w[m]
        stot += w[m] * t[m]
    wb = 0.0
    sb = 0.0
    loss = 0.0
    for m in range(n):
        wa = wtot - wb - w[m]
        sa = stot - sb - w[m] * t[m]
        # out holds dL/dw for now
        out[m] = 2.0 * (t[m] * wb - sb + sa - t[m] * wa) + 2.0 * step / 3.0 * w[m]
        loss += 2.0 * w[m] * (t[m] * wb - sb) + step / 3.0 * w[m] * w[m]
        wb += w[m]
        sb += w[m] * t[m]
    # d w_k / d sigma_m is step * T_{m+1} for k = m and -step * w_k for k > m
    suffix = 0.0
    for m in range(n - 1, -1, -1):
        g = out[m]
        out[m] = scale * step * (Tafter[m] * g - suffix)
        suffix += g * w[m]
    return loss


@njit(cache=True, parallel=True)
def tv_gradient(s, weight, grad):
    """grad += d/ds of weight * mean over node pairs of (s_a - s_b)^2; returns the penalty."""
    nx, ny, nz = s.shape
    npairs = (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)
    scale = weight / npairs
    total = 0.0
    for i in prange(nx):
        acc = 0.0
        for j in range(ny):
            for k in range(nz):
                v = s[i, j, k]
                g = 0.0
                if i > 0:
                    g += v - s[i - 1, j, k]
                if i < nx - 1:
                    d = v - s[i + 1, j, k]
                    g += d
                    acc += d * d
                if j > 0:
                    g += v - s[i, j - 1, k]
                if j < ny - 1:
                    d = v - s[i, j + 1, k]
                    g += d
                    acc += d * d
                if k > 0:
                    g += v - s[i, j, k - 1]
                if k < nz - 1:
                    d = v - s[i, j, k + 1]
                    g += d
                    acc += d * d
                grad[i, j, k] += 2.0 * scale * g
        total += acc
    return scale * total


@njit(cache=True, parallel=True)
def adam_density(raw, grad_sigma, m, v, lr, b1, b2, eps, bc1, bc2, k_scale, sigma_out):
    """Adam on softplus-parameterized density; refreshes sigma_out = k_scale * softplus(raw)."""
    flat_raw = raw.reshape(-1)
    flat_g = grad_sigma.reshape(-1)
    flat_m = m.reshape(-1)
    flat_v = v.reshape(-1)
    flat_s = sigma_out.reshape(-1)
    for i in prange(flat_raw.shape[0]):
        x = flat_raw[i]
        sig = 1.0 / (1.0 + math.exp(-x)) if x > -40 else 0.0
        g = flat_g[i] * k_scale * sig
        mi = b1 * flat_m[i] + (1 - b1) * g
        vi = b2 * flat_v[i] + (1 - b2) * g * g
        flat_m[i] = mi
        flat_v[i] = vi
        x -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)
        flat_raw[i] = x
        sp = x + math.log1p(math.exp(-x)) if x > 0 else math.log1p(math.exp(x))
        flat_s[i] = k_scale * sp


@njit(cache=True, parallel=True)
def adam_color(raw, grad_color, m, v, lr, b1, b2, eps, bc1, bc2, color_out):
    """Adam on logit-parameterized color; refreshes color_out = sigmoid(raw)."""
    flat_raw = raw.reshape(-1)
    flat_g = grad_color.reshape(-1)
    flat_m = m.reshape(-1)
    flat_v = v.reshape(-1)
    flat_c = color_out.reshape(-1)
    for i in prange(flat_raw.shape[0]):
        c = flat_c[i]
        g = flat_g[i] * c * (1.0 - c)
        if g == 0.0 and flat_m[i] == 0.0:
            continue
        mi = b1 * flat_m[i] + (1 - b1) * g
        vi = b2 * flat_v[i] + (1 - b2) * g * g
        flat_m[i] = mi
        flat_v[i] = vi
        x = flat_raw[i] - lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)
        flat_raw[i] = x
        flat_c[i] = 1.0 / (1.0 + math.exp(-x))


def occupancy_from_density(density: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Block flags: 1 where any node of the block (incl. upper faces) exceeds threshold."""
    dims = np.array(density.shape)
    nb = -(-(dims - 1) // BLOCK)
    occ = np.zeros(tuple(nb), dtype=np.uint8)
    hot = density > threshold
    for bx in range(nb[0]):
        xs = slice(bx * BLOCK, min((bx + 1) * BLOCK + 1, dims[0]))
        hx = hot[xs]
        if not hx.any():
            continue
        for by in range(nb[1]):
            ys = slice(by * BLOCK, min((by + 1) * BLOCK + 1, dims[1]))
            hxy = hx[:, ys]
            if not hxy.any():
                continue
            for bz in range(nb[2]):
                zs = slice(bz * BLOCK, min((bz + 1) * BLOCK + 1, dims[2]))
                occ[bx, by, bz] = hxy[:, :, zs].any()
    return occ
