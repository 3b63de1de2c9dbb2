"""Numba kernels: fast marching, geodesic back-tracing and line integrals."""

from __future__ import annotations

import numpy as np
from numba import njit

FAR, TRIAL, KNOWN = 0, 1, 2


@njit(cache=True, nogil=True)
def _heap_push(keys, vals, size, key, val):
    i = size
    keys[i] = key
    vals[i] = val
    while i > 0:
        parent = (i - 1) // 2
        if keys[parent] <= keys[i]:
            break
        keys[parent], keys[i] = keys[i], keys[parent]
        vals[parent], vals[i] = vals[i], vals[parent]
        i = parent
    return size + 1


@njit(cache=True, nogil=True)
def _heap_pop(keys, vals, size):
    key = keys[0]
    val = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        child = left
        if left + 1 < size and keys[left + 1] < keys[left]:
            child = left + 1
        if keys[i] <= keys[child]:
            break
        keys[child], keys[i] = keys[i], keys[child]
        vals[child], vals[i] = vals[i], vals[child]
        i = child
    return key, val, size


@njit(cache=True, nogil=True)
def _axis_term(T, state, i, j, di, dj, h, second_order):
    """Upwind coefficient and value for one axis; coefficient 0 if no known neighbour."""
    nx, nz = T.shape
    best = np.inf
    coef = 0.0
    val = 0.0
    for s in (-1, 1):
        i1 = i + s * di
        j1 = j + s * dj
        if i1 < 0 or i1 >= nx or j1 < 0 or j1 >= nz or state[i1, j1] != KNOWN:
            continue
        t1 = T[i1, j1]
        if t1 >= best:
            continue
        best = t1
        coef = 1.0 / (h * h)
        val = t1
        if second_order:
            i2 = i + 2 * s * di
            j2 = j + 2 * s * dj
            if 0 <= i2 < nx and 0 <= j2 < nz and state[i2, j2] == KNOWN and T[i2, j2] <= t1:
                coef = 9.0 / (4.0 * h * h)
                val = (4.0 * t1 - T[i2, j2]) / 3.0
    return coef, val


@njit(cache=True, nogil=True)
def _local_update(T, state, slow, i, j, hx, hz, second_order):
    a1, v1 = _axis_term(T, state, i, j, 1, 0, hx, second_order)
    a2, v2 = _axis_term(T, state, i, j, 0, 1, hz, second_order)
    f2 = slow[i, j] * slow[i, j]
    cand = np.inf
    if a1 > 0:
        cand = min(cand, v1 + np.sqrt(f2 / a1))
    if a2 > 0:
        cand = min(cand, v2 + np.sqrt(f2 / a2))
    if a1 > 0 and a2 > 0:
        s = a1 + a2
        m = a1 * v1 + a2 * v2
        disc = m * m - s * (a1 * v1 * v1 + a2 * v2 * v2 - f2)
        if disc >= 0.0:
            t = (m + np.sqrt(disc)) / s
            if t >= max(v1, v2):
                cand = min(cand, t)
    return cand


@njit(cache=True, nogil=True)
def march(T, state, slow, hx, hz, second_order):
    """Fast marching from the KNOWN nodes of ``state``; updates ``T`` in place.

    Returns the number of accepted nodes (the initial KNOWN set included).
    """
    nx, nz = T.shape
    cap = 4 * nx * nz + 16
    keys = np.empty(cap)
    vals = np.empty(cap, dtype=np.int64)
    size = 0
    ni = np.array([-1, 1, 0, 0])
    nj = np.array([0, 0, -1, 1])
    accepted = 0
    for i in range(nx):
        for j in range(nz):
            if state[i, j] == KNOWN:
                accepted += 1
                continue
            near = False
            for q in range(4):
                ii = i + ni[q]
                jj = j + nj[q]
                if 0 <= ii < nx and 0 <= jj < nz and state[ii, jj] == KNOWN:
                    near = True
            if near:
                t = _local_update(T, state, slow, i, j, hx, hz, second_order)
                if t < T[i, j]:
                    T[i, j] = t
                    state[i, j] = TRIAL
                    size = _heap_push(keys, vals, size, t, i * nz + j)
    while size > 0:
        t, idx, size = _heap_pop(keys, vals, size)
        i = idx // nz
        j = idx - i * nz
        if state[i, j] == KNOWN or t > T[i, j]:
            continue
        state[i, j] = KNOWN
        accepted += 1
        for q in range(4):
            ii = i + ni[q]
            jj = j + nj[q]
            if ii < 0 or ii >= nx or jj < 0 or jj >= nz or state[ii, jj] == KNOWN:
                continue
            tn = _local_update(T, state, slow, ii, jj, hx, hz, second_order)
            if tn < T[ii, jj]:
                T[ii, jj] = tn
                state[ii, jj] = TRIAL
                if size >= cap:
                    return -1
                size = _heap_push(keys, vals, size, tn, ii * nz + jj)
    return accepted


@njit(cache=True, nogil=True)
def _bilinear(F, x0, z0, hx, hz, x, z):
    nx, nz = F.shape
    fx = (x - x0) / hx
    fz = (z - z0) / hz
    i = int(np.floor(fx))
    j = int(np.floor(fz))
    if i < 0:
        i = 0
    elif i > nx - 2:
        i = nx - 2
    if j < 0:
        j = 0
    elif j > nz - 2:
        j = nz - 2
    tx = fx - i
    tz = fz - j
    return ((1 - tx) * (1 - tz) * F[i, j] + tx * (1 - tz) * F[i + 1, j]
            + (1 - tx) * tz * F[i, j + 1] + tx * tz * F[i + 1, j + 1])


@njit(cache=True, nogil=True)
def _descent_dir(gx, gz, x0, z0, hx, hz, x, z):
    dx = -_bilinear(gx, x0, z0, hx, hz, x, z)
    dz = -_bilinear(gz, x0, z0, hx, hz, x, z)
    nrm = np.sqrt(dx * dx + dz * dz)
    if nrm == 0.0:
        return 0.0, 0.0, False
    return dx / nrm, dz / nrm, True


@njit(cache=True, nogil=True)
def _segment_clear(xs, zs, x, z, R, a, b):
    """True if the segment (xs,zs)-(x,z) misses the open rectangle (-R,R)x(a,b)."""
    t0 = 0.0
    t1 = 1.0
    dx = x - xs
    dz = z - zs
    for k in range(4):
        if k == 0:
            p, q = -dx, xs + R
        elif k == 1:
            p, q = dx, R - xs
        elif k == 2:
            p, q = -dz, zs - a
        else:
            p, q = dz, b - zs
        if p == 0.0:
            if q <= 0.0:
                return True
        else:
            r = q / p
            if p < 0.0:
                if r > t0:
                    t0 = r
            else:
                if r < t1:
                    t1 = r
    # strictly positive overlap length means the open interior is crossed
    if t1 - t0 <= 1e-12:
        return True
    xm = xs + 0.5 * (t0 + t1) * dx
    zm = zs + 0.5 * (t0 + t1) * dz
    return not (-R < xm < R and a < zm < b)


@njit(cache=True, nogil=True)
def trace(gx, gz, x0, z0, hx, hz, px, pz, sx, sz, step, max_steps,
          straight_finish, R, a, b, out):
    """Back-trace from (px, pz) along -grad u0 towards the source (sx, sz).

    Vertices are written to ``out`` starting at the receiver. Returns the
    vertex count, or -1 when ``max_steps`` is exceeded. With
    ``straight_finish`` the trace ends once the straight segment to the source
    avoids the open rectangle, where the medium is homogeneous.
    """
    nx, nz = gx.shape
    x = px
    z = pz
    out[0, 0] = x
    out[0, 1] = z
    n = 1
    cell = max(hx, hz)
    for _ in range(max_steps):
        ddx = sx - x
        ddz = sz - z
        if ddx * ddx + ddz * ddz <= cell * cell:
            break
        if straight_finish and _segment_clear(sx, sz, x, z, R, a, b):
            break
        inside = x0 <= x <= x0 + (nx - 1) * hx and z0 <= z <= z0 + (nz - 1) * hz
        if not inside:
            # left the computational box: only valid in the homogeneous exterior
            if straight_finish:
                break
            return -1
        d1x, d1z, ok = _descent_dir(gx, gz, x0, z0, hx, hz, x, z)
        if not ok:
            return -1
        d2x, d2z, ok = _descent_dir(gx, gz, x0, z0, hx, hz, x + 0.5 * step * d1x, z + 0.5 * step * d1z)
        if not ok:
            return -1
        x += step * d2x
        z += step * d2z
        if n >= out.shape[0] - 1:
            return -1
        out[n, 0] = x
        out[n, 1] = z
        n += 1
    else:
        return -1
    out[n, 0] = sx
    out[n, 1] = sz
    return n + 1


@njit(cache=True, nogil=True)
def integrate_p(gx, gz, x0, z0, hx, hz, px, pz, sx, sz, step, max_steps,
                p, gx0, gz0, ghx, ghz, R, a, b):
    """Line integral of bilinear ``p`` (supported in the closed rectangle) along the geodesic.

    Integration stops when the back-traced ray leaves the rectangle: a
    geodesic leaving a convex region through the homogeneous exterior does
    not re-enter it. Returns NaN on tracer failure.
    """
    nx, nz = gx.shape
    x = px
    z = pz
    slack = 1e-9
    acc = 0.0
    fprev = _bilinear(p, gx0, gz0, ghx, ghz, x, z)
    for _ in range(max_steps):
        if not (-R - slack <= x <= R + slack and a - slack <= z <= b + slack):
            return acc
        ddx = sx - x
        ddz = sz - z
        if ddx * ddx + ddz * ddz <= step * step:
            return acc
        inside = x0 <= x <= x0 + (nx - 1) * hx and z0 <= z <= z0 + (nz - 1) * hz
        if not inside:
            return np.nan
        d1x, d1z, ok = _descent_dir(gx, gz, x0, z0, hx, hz, x, z)
        if not ok:
            return np.nan
        d2x, d2z, ok = _descent_dir(gx, gz, x0, z0, hx, hz, x + 0.5 * step * d1x, z + 0.5 * step * d1z)
        if not ok:
            return np.nan
        xn = x + step * d2x
        zn = z + step * d2z
        in_rect = -R <= xn <= R and a <= zn <= b
        fnew = _bilinear(p, gx0, gz0, ghx, ghz, xn, zn) if in_rect else 0.0
        acc += 0.5 * step * (fprev + fnew)
        fprev = fnew
        x = xn
        z = zn
    return np.nan


@njit(cache=True, nogil=True)
def integrate_many(gx, gz, x0, z0, hx, hz, pts, active, sx, sz, step, max_steps,
                   p, gx0, gz0, ghx, ghz, R, a, b, out):
    """:func:`integrate_p` for every row of ``pts`` with ``active`` set; others get 0."""
    for r in range(pts.shape[0]):
        if active[r]:
            out[r] = integrate_p(gx, gz, x0, z0, hx, hz, pts[r, 0], pts[r, 1], sx, sz, step,
                                 max_steps, p, gx0, gz0, ghx, ghz, R, a, b)
        else:
            out[r] = 0.0
