"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--paths 100000] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from oneworld import _fallback

try:
    from oneworld import _kernels as _compiled
except ImportError:
    _compiled = None


def cases(n_paths: int):
    rng = np.random.default_rng(0)
    streams = np.arange(n_paths, dtype=np.uint64)
    out = {"normal_pairs": lambda m: m.normal_pairs(1, 3, 0, streams)}
    for dims, shape in ((1, (2048,)), (2, (256, 256))):
        f = np.ascontiguousarray(rng.standard_normal((dims,) + shape))
        mask = np.zeros(shape, dtype=np.uint8)
        origin = np.full(dims, -10.0)
        spacing = 20.0 / np.array(shape, dtype=float)
        x = np.ascontiguousarray(rng.uniform(-10.0, 10.0, (n_paths, dims)))
        z = np.ascontiguousarray(rng.standard_normal((n_paths, 2)))
        alive = np.ones(n_paths, dtype=np.uint8)
        out[f"interp_periodic_{dims}d"] = (
            lambda m, f=f, mask=mask, o=origin, s=spacing, x=x: m.interp_periodic(f, mask, o, s, x))
        out[f"em_step_{dims}d"] = (
            lambda m, f=f, mask=mask, o=origin, s=spacing, x=x, z=z, a=alive:
            m.em_step(x.copy(), a, f, f, mask, mask, 0.5, o, s, 1e-3, 0.03, z))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = [("python", _fallback)] + ([("cython", _compiled)] if _compiled else [])
    print(f"{'kernel':<20}" + "".join(f"{name:>12}" for name, _ in backends) + f"{'speedup':>10}")
    for name, fn in cases(args.paths).items():
        times = [min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) for _, mod in backends]
        row = f"{name:<20}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)
    if _compiled is None:
        print("compiled extension not available; only the fallback was timed")


if __name__ == "__main__":
    main()
