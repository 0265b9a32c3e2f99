"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--paths N] [--steps N] [--repeat R]

Times raw normal generation and full GBM terminal simulation for both
backends, and checks that they agree.
"""
import argparse
import time

import numpy as np

from sdeerr import get_backend, rng, sde


def best_of(repeat, fn):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=200_000)
    ap.add_argument("--steps", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    try:
        backends = [get_backend("python"), get_backend("compiled")]
    except RuntimeError as exc:
        raise SystemExit(f"benchmark needs both backends: {exc}")

    key = rng.stream_key(2024, rng.INCREMENTS)
    part = sde.Partition.equidistant(1.0, args.steps)
    spec = sde.gbm()
    print(f"{args.paths} paths x {args.steps} steps, best of {args.repeat}")
    print(f"{'task':<22}{'python s':>10}{'compiled s':>12}{'speedup':>9}{'max |diff|':>12}")

    def normals(b):
        out = np.empty((args.paths, args.steps))
        b.normals_block(key, 0, 0, out)
        return out

    tasks = [("normals", normals)]
    for scheme in ("euler", "milstein"):
        tasks.append((f"gbm {scheme}", lambda b, s=scheme: sde.simulate(
            spec, part, s, args.paths, 7, backend=b, threads=1).terminal))

    for label, task in tasks:
        (t_py, a), (t_c, b) = (best_of(args.repeat, lambda bk=bk: task(bk)) for bk in backends)
        diff = float(np.max(np.abs(a - b)))
        print(f"{label:<22}{t_py:>10.3f}{t_c:>12.3f}{t_py / t_c:>8.1f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()
