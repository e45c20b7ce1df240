"""Hot gather loops, jitted with numba when available.

Only straight data movement lives here; all arithmetic stays in the
calling modules.  The numpy fallbacks are bit-identical, just slower.
"""

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


@njit(cache=True)
def _im2col_fill(xp, k, cols):
    b, hp, wp, c = xp.shape
    h = hp - (k - 1)
    w = wp - (k - 1)
    run = k * c  # contiguous (kj, ci) span within one padded row
    for bi in range(b):
        for i in range(h):
            for ki in range(k):
                src = xp[bi, i + ki].reshape(wp * c)
                base = ki * run
                for j in range(w):
                    s0 = j * c
                    for m in range(run):
                        cols[bi, i, j, base + m] = src[s0 + m]


@njit(cache=True)
def _maxpool2_fwd(x, out, idx):
    b, h, w, c = x.shape
    for bi in range(b):
        for i in range(h // 2):
            for j in range(w // 2):
                for ci in range(c):
                    v0 = x[bi, 2 * i, 2 * j, ci]
                    v1 = x[bi, 2 * i, 2 * j + 1, ci]
                    v2 = x[bi, 2 * i + 1, 2 * j, ci]
                    v3 = x[bi, 2 * i + 1, 2 * j + 1, ci]
                    best = v0
                    slot = 0
                    if v1 > best:
                        best = v1
                        slot = 1
                    if v2 > best:
                        best = v2
                        slot = 2
                    if v3 > best:
                        best = v3
                        slot = 3
                    out[bi, i, j, ci] = best
                    idx[bi, i, j, ci] = slot


@njit(cache=True)
def _stroke_distance_fill(vertices, h0, w0, nrows, ncols, half_width,
                          softness, cutoff, cov, tpar, seg, ux, uy):
    """Per-pixel nearest point on a polyline + logistic coverage.

    Segment-driven: each segment only visits pixels inside its own
    cutoff-grown bounding box.  A segment skipped at a pixel is farther
    than the cutoff there, so coverage and the winning branch (lowest
    index on ties, like np.argmin) are exactly those of the dense scan
    wherever coverage is nonzero.  Pixel (r, c) of the window has
    center (w0 + c + 0.5, h0 + r + 0.5).
    """
    m = vertices.shape[0] - 1
    n = nrows * ncols
    dist2 = np.full(n, np.inf)
    ex_arr = np.empty(n)
    ey_arr = np.empty(n)
    seg[:] = 0
    tpar[:] = 0.0
    cov[:] = 0.0
    ux[:] = 0.0
    uy[:] = 0.0
    touched_r0, touched_r1 = nrows, 0
    touched_c0, touched_c1 = ncols, 0
    for j in range(m):
        ax = vertices[j, 0]
        ay = vertices[j, 1]
        bx = vertices[j + 1, 0]
        by = vertices[j + 1, 1]
        dx = bx - ax
        dy = by - ay
        len2 = dx * dx + dy * dy
        # pixel range covered by this segment's influence
        xlo = min(ax, bx) - cutoff - 0.6
        xhi = max(ax, bx) + cutoff + 0.6
        ylo = min(ay, by) - cutoff - 0.6
        yhi = max(ay, by) + cutoff + 0.6
        r0 = max(0, int(np.floor(ylo - h0 - 0.5)))
        r1 = min(nrows, int(np.ceil(yhi - h0 + 0.5)))
        c0 = max(0, int(np.floor(xlo - w0 - 0.5)))
        c1 = min(ncols, int(np.ceil(xhi - w0 + 0.5)))
        if r0 < r1 and c0 < c1:
            touched_r0 = min(touched_r0, r0)
            touched_r1 = max(touched_r1, r1)
            touched_c0 = min(touched_c0, c0)
            touched_c1 = max(touched_c1, c1)
        for r in range(r0, r1):
            py = h0 + r + 0.5
            base = r * ncols
            for ci in range(c0, c1):
                px = w0 + ci + 0.5
                if len2 > 0.0:
                    t = ((px - ax) * dx + (py - ay) * dy) / len2
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                else:
                    t = 0.0
                ex = px - (ax + t * dx)
                ey = py - (ay + t * dy)
                d2 = ex * ex + ey * ey
                idx = base + ci
                if d2 < dist2[idx]:
                    dist2[idx] = d2
                    seg[idx] = j
                    tpar[idx] = t
                    ex_arr[idx] = ex
                    ey_arr[idx] = ey
    for r in range(touched_r0, touched_r1):
        base = r * ncols
        for ci in range(touched_c0, touched_c1):
            idx = base + ci
            d2 = dist2[idx]
            if d2 == np.inf:
                continue
            d = np.sqrt(d2)
            if d > 0.0:
                ux[idx] = ex_arr[idx] / d
                uy[idx] = ey_arr[idx] / d
            if d <= cutoff:
                cov[idx] = 1.0 / (1.0 + np.exp(-(half_width - d) / softness))


@njit(cache=True)
def _stroke_vjp_fill(d_cov, cov, tpar, seg, ux, uy, softness, grad):
    """Scatter d(loss)/d(vertex) for one stroke; sequential, deterministic."""
    n = d_cov.shape[0]
    for i in range(n):
        c = cov[i]
        if c <= 0.0:
            continue
        dd = d_cov[i] * (-c * (1.0 - c) / softness)
        if dd == 0.0:
            continue
        j = seg[i]
        t = tpar[i]
        gx = dd * ux[i]
        gy = dd * uy[i]
        grad[j, 0] += -(1.0 - t) * gx
        grad[j, 1] += -(1.0 - t) * gy
        grad[j + 1, 0] += -t * gx
        grad[j + 1, 1] += -t * gy


@njit(cache=True)
def _maxpool2_bwd(dy, idx, dx):
    b, h2, w2, c = dy.shape
    for bi in range(b):
        for i in range(h2):
            for j in range(w2):
                for ci in range(c):
                    slot = idx[bi, i, j, ci]
                    g = dy[bi, i, j, ci]
                    dx[bi, 2 * i, 2 * j, ci] = g if slot == 0 else 0.0
                    dx[bi, 2 * i, 2 * j + 1, ci] = g if slot == 1 else 0.0
                    dx[bi, 2 * i + 1, 2 * j, ci] = g if slot == 2 else 0.0
                    dx[bi, 2 * i + 1, 2 * j + 1, ci] = g if slot == 3 else 0.0


def im2col(xp, k, cols):
    """Fill ``cols`` (B, H, W, k*k*C) from the already-padded ``xp``."""
    if HAVE_NUMBA:
        _im2col_fill(xp, k, cols)
    else:
        b, h, w, _ = cols.shape
        c = xp.shape[3]
        view = cols.reshape(b, h, w, k, k, c)
        for ki in range(k):
            for kj in range(k):
                view[:, :, :, ki, kj, :] = xp[:, ki:ki + h, kj:kj + w, :]
    return cols


def maxpool2_forward(x, out, idx):
    """First-max 2x2/stride-2 pooling; fills ``out`` and the slot ``idx``."""
    if HAVE_NUMBA:
        _maxpool2_fwd(x, out, idx)
        return out, idx
    b, h, w, c = x.shape
    win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = np.ascontiguousarray(win).reshape(b, h // 2, w // 2, c, 4)
    idx[...] = win.argmax(axis=-1)
    out[...] = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(dy, idx, dx):
    """Scatter ``dy`` back through the recorded pooling slots into ``dx``."""
    if HAVE_NUMBA:
        _maxpool2_bwd(dy, idx, dx)
        return dx
    b, h, w, c = dx.shape
    scat = np.zeros((b, h // 2, w // 2, c, 4), dtype=dy.dtype)
    np.put_along_axis(scat, idx[..., None], dy[..., None], axis=-1)
    dx[...] = (scat.reshape(b, h // 2, w // 2, c, 2, 2)
               .transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c))
    return dx


def stroke_distance(vertices, h0, w0, nrows, ncols, half_width, softness,
                    cutoff):
    """Nearest-point data and coverage for one stroke over a pixel window.

    Returns flat arrays of length nrows*ncols: coverage, the clamped
    segment parameter, the winning segment index, and the unit direction
    from the closest point to the pixel center.
    """
    n = nrows * ncols
    cov = np.empty(n)
    tpar = np.empty(n)
    seg = np.empty(n, dtype=np.int64)
    ux = np.empty(n)
    uy = np.empty(n)
    if HAVE_NUMBA:
        _stroke_distance_fill(vertices, h0, w0, nrows, ncols, half_width,
                              softness, cutoff, cov, tpar, seg, ux, uy)
        return cov, tpar, seg, ux, uy
    ys = np.arange(h0, h0 + nrows, dtype=np.float64) + 0.5
    xs = np.arange(w0, w0 + ncols, dtype=np.float64) + 0.5
    px = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    a = vertices[:-1]
    d = vertices[1:] - vertices[:-1]
    len2 = np.einsum("ij,ij->i", d, d)
    safe = np.where(len2 > 0.0, len2, 1.0)
    rel = px[:, None, :] - a[None, :, :]
    t = np.einsum("nmi,mi->nm", rel, d) / safe
    t = np.clip(t, 0.0, 1.0, out=t)
    t[:, len2 == 0.0] = 0.0
    diff = rel - t[:, :, None] * d[None]
    dist2 = np.einsum("nmi,nmi->nm", diff, diff)
    seg[:] = np.argmin(dist2, axis=1)
    rows = np.arange(n)
    dist = np.sqrt(dist2[rows, seg])
    tpar[:] = t[rows, seg]
    u = diff[rows, seg]
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(dist[:, None] > 0.0, u / dist[:, None], 0.0)
    ux[:] = u[:, 0]
    uy[:] = u[:, 1]
    cov[:] = 0.0
    inside = dist <= cutoff
    cov[inside] = 1.0 / (1.0 + np.exp(-(half_width - dist[inside]) / softness))
    return cov, tpar, seg, ux, uy


def stroke_vjp(d_cov, cov, tpar, seg, ux, uy, softness, n_vertices):
    """Gradient of sum(d_cov * coverage) w.r.t. the stroke's vertices."""
    grad = np.zeros((n_vertices, 2))
    if HAVE_NUMBA:
        _stroke_vjp_fill(d_cov, cov, tpar, seg, ux, uy, softness, grad)
        return grad
    dd = d_cov * (-cov * (1.0 - cov) / softness)
    ga_x = dd * (-(1.0 - tpar)) * ux
    ga_y = dd * (-(1.0 - tpar)) * uy
    gb_x = dd * (-tpar) * ux
    gb_y = dd * (-tpar) * uy
    grad[:, 0] = np.bincount(seg, weights=ga_x, minlength=n_vertices)
    grad[:, 0] += np.bincount(seg + 1, weights=gb_x, minlength=n_vertices)
    grad[:, 1] = np.bincount(seg, weights=ga_y, minlength=n_vertices)
    grad[:, 1] += np.bincount(seg + 1, weights=gb_y, minlength=n_vertices)
    return grad
