"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Prints best-of-``repeat`` wall time per kernel and backend, the speedup,
and whether both backends returned identical results.
"""

import argparse
import time
from dataclasses import replace

import numpy as np

from mmvsde import _kernels
from mmvsde.config import load
from mmvsde.monotone import ConvexDomain
from mmvsde.rng import Channel, normals
from mmvsde.solver import simulate


def best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(quick):
    n = 200_000 if quick else 1_000_000
    rng = np.random.default_rng(0)
    c = [np.arange(n, dtype=np.uint32), np.full(n, 7, np.uint32), np.full(n, 3, np.uint32), np.zeros(n, np.uint32)]

    tri = ConvexDomain.halfspaces([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]], [0.0, 0.0, 1.0], [0.25, 0.25])
    normals_2d = np.ascontiguousarray(tri.normals)  # unit rows, as the kernel expects
    offsets = np.ascontiguousarray(tri.offsets)
    pts = np.ascontiguousarray(rng.normal(scale=1.5, size=(n // 10, 2)))

    sc = load("simplex_2d", particles=2000 if quick else 10000)

    def sim(backend):
        scheme = replace(sc.scheme, backend=backend, record="summary")
        return simulate(sc.kernel, sc.operator, sc.levy, scheme, 0).x_final

    yield f"philox_uniforms n={n}", lambda impl, name: impl.philox_uniforms(12345, 678, *c)
    yield f"normals n={n}", lambda impl, name: normals(1, Channel.BROWNIAN, np.arange(n), 5, 1, backend=name)
    yield f"dykstra triangle n={n // 10}", lambda impl, name: impl.dykstra_project(pts, normals_2d, offsets,
                                                                                   1e-12, 10_000)[0]
    yield f"simulate simplex_2d N={sc.scheme.particles}", lambda impl, name: sim(name)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    backends = _kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is timed")
    print(f"{'kernel':<36}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}{'identical':>11}")
    for label, fn in cases(args.quick):
        times, outs = [], []
        for b in backends:
            impl = _kernels.get_backend(b)
            t, out = best_of(lambda: fn(impl, b), args.repeat)
            times.append(t)
            outs.append(out)
        speed = f"{times[-1] / times[0]:.1f}x" if len(times) == 2 else "-"
        same = all(np.array_equal(outs[0], o) for o in outs[1:])
        print(f"{label:<36}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times) + f"{speed:>10}{str(same):>11}")


if __name__ == "__main__":
    main()
