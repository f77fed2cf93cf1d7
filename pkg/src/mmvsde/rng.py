"""Counter-based random streams.

Every draw is a pure function of ``(seed, channel, particle, step, sub)``,
hashed with Philox4x32-10. Nothing depends on call order or on how the
particles are split across workers.
"""

from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum

import numpy as np

from . import _kernels


class Channel(IntEnum):
    BROWNIAN = 1
    BRIDGE = 2
    JUMP_COUNT = 3
    JUMP_TIME = 4
    JUMP_MARK = 5
    INITIAL = 6
    AUX = 7


def seed_key(seed):
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be in [0, 2**64)")
    return seed & 0xFFFFFFFF, seed >> 32


def _as_u32(a, n):
    a = np.asarray(a)
    if a.ndim == 0:
        return np.full(n, int(a), dtype=np.uint32)
    return np.ascontiguousarray(a, dtype=np.uint32)


def uniform_pairs(seed, channel, particles, step=0, sub=0, workers=1, backend=None):
    """Two independent uniforms on (0, 1) per key, shape (n, 2).

    ``particles``, ``step`` and ``sub`` broadcast against each other.
    """
    particles, step, sub = np.broadcast_arrays(
        np.asarray(particles, dtype=np.int64), np.asarray(step, dtype=np.int64),
        np.asarray(sub, dtype=np.int64))
    shape = particles.shape
    n = particles.size
    k0, k1 = seed_key(seed)
    c0 = _as_u32(step.ravel(), n)
    c1 = _as_u32(sub.ravel(), n)
    c2 = _as_u32(particles.ravel(), n)
    c3 = np.full(n, int(channel), dtype=np.uint32)
    impl = _kernels.get_backend(backend)
    if workers <= 1 or n < 2 * workers:
        out = impl.philox_uniforms(k0, k1, c0, c1, c2, c3)
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(
                lambda ab: impl.philox_uniforms(k0, k1, c0[ab[0]:ab[1]], c1[ab[0]:ab[1]],
                                                c2[ab[0]:ab[1]], c3[ab[0]:ab[1]]),
                zip(bounds[:-1], bounds[1:])))
        out = np.concatenate(parts, axis=0)
    return out.reshape(shape + (2,))


def uniforms(seed, channel, particles, step=0, sub=0, workers=1, backend=None):
    """One uniform per key (the first of the pair)."""
    return uniform_pairs(seed, channel, particles, step, sub, workers, backend)[..., 0]


def normals(seed, channel, particles, step, dim, sub_base=0, workers=1, backend=None):
    """Standard normals of shape (n, dim) via Box-Muller, one Philox call per pair."""
    particles = np.asarray(particles, dtype=np.int64)
    npairs = (dim + 1) // 2
    subs = sub_base + np.arange(npairs)
    u = uniform_pairs(seed, channel, particles[:, None], np.asarray(step)[..., None] if np.ndim(step) else step,
                      subs[None, :], workers, backend)
    r = np.sqrt(-2.0 * np.log(u[..., 0]))
    theta = 2.0 * np.pi * u[..., 1]
    n = particles.shape[0]
    if dim == 1:
        return (r[:, 0] * np.cos(theta[:, 0]))[:, None]
    z = np.empty((n, npairs, 2))
    z[..., 0] = r * np.cos(theta)
    z[..., 1] = r * np.sin(theta)
    return z.reshape(n, 2 * npairs)[:, :dim]
