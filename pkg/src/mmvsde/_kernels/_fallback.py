"""Pure numpy versions of the compiled kernels in ``_core.pyx``.

Semantics match the compiled versions exactly: the Philox words and the
uniforms are bit-identical, and Dykstra runs every point to its own
stopping time.
"""

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK = np.uint64(0xFFFFFFFF)
_TWO_M53 = 1.0 / 9007199254740992.0


def philox_raw(k0, k1, c0, c1, c2, c3):
    c0 = np.asarray(c0, dtype=np.uint64)
    c1 = np.asarray(c1, dtype=np.uint64)
    c2 = np.asarray(c2, dtype=np.uint64)
    c3 = np.asarray(c3, dtype=np.uint64)
    k0 = int(k0) & 0xFFFFFFFF
    k1 = int(k1) & 0xFFFFFFFF
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> np.uint64(32), p0 & _MASK
        hi1, lo1 = p1 >> np.uint64(32), p1 & _MASK
        c0, c1, c2, c3 = hi1 ^ c1 ^ np.uint64(k0), lo1, hi0 ^ c3 ^ np.uint64(k1), lo0
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return np.stack([c0, c1, c2, c3], axis=1).astype(np.uint32)


def philox_uniforms(k0, k1, c0, c1, c2, c3):
    w = philox_raw(k0, k1, c0, c1, c2, c3)
    out = np.empty((w.shape[0], 2))
    out[:, 0] = ((w[:, 0] >> 5).astype(np.float64) * 67108864.0 + (w[:, 1] >> 6) + 0.5) * _TWO_M53
    out[:, 1] = ((w[:, 2] >> 5).astype(np.float64) * 67108864.0 + (w[:, 3] >> 6) + 0.5) * _TWO_M53
    return out


def dykstra_project(points, normals, offsets, tol, max_iter):
    """Dykstra's algorithm onto {x : normals @ x <= offsets}; rows of ``normals`` have unit length."""
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    m = normals.shape[0]
    x = points.copy()
    iters = np.zeros(n, dtype=np.int64)
    conv = np.ones(n, dtype=bool)

    infeasible = np.zeros(n, dtype=bool)
    for j in range(m):
        v = np.zeros(n)
        for k in range(d):
            v = v + normals[j, k] * x[:, k]
        infeasible |= v > offsets[j]
    active = np.nonzero(infeasible)[0]
    if active.size == 0:
        return x, iters, conv
    conv[active] = False
    xa = x[active]
    e = np.zeros((active.size, m, d))
    tol2 = tol * tol
    for it in range(1, max_iter + 1):
        ch = np.zeros(active.size)
        for j in range(m):
            y = xa + e[:, j, :]
            v = np.zeros(active.size)
            for k in range(d):
                v = v + normals[j, k] * y[:, k]
            viol = np.maximum(v - offsets[j], 0.0)
            xa = y - viol[:, None] * normals[j]
            de = (y - xa) - e[:, j, :]
            for k in range(d):
                ch = ch + de[:, k] * de[:, k]
            e[:, j, :] = y - xa
        iters[active] = it
        done = ch <= tol2
        if np.any(done):
            idx = active[done]
            x[idx] = xa[done]
            conv[idx] = True
            keep = ~done
            active, xa, e = active[keep], xa[keep], e[keep]
            if active.size == 0:
                break
    if active.size:
        x[active] = xa
    return x, iters, conv
