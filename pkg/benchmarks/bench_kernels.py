"""Compiled core vs numpy fallback on the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is timed on both backends (best of ``repeat``) and the outputs
are compared for bit-identity.
"""

import argparse
import json
import timeit

import numpy as np

from bseelab import kernels
from bseelab.forward import simulate_linear
from bseelab.model_space import Semigroup, build_generator
from bseelab.stochastic import TimeGrid, sample_brownian


def cases():
    grid = TimeGrid(0.0, 1.0, 128)
    noise = sample_brownian(1, 4000, grid)
    m = 8
    sg = Semigroup(build_generator("dirichlet_laplacian_1d", m, {"h": 1.0 / (m + 1), "nu": 0.05}))
    K = 0.3 * np.eye(m)[None]
    v = np.full((1, m), 0.1)
    S = sg(grid.dt)
    x = np.random.default_rng(0).standard_normal((4000, m))
    dw = noise.increments[:, 0]
    return {
        "counter_normals 4000x512": lambda b: kernels.counter_normals(7, 4000, 512, backend=b),
        "linear_step P=4000 m=8": lambda b: kernels.linear_step(S, x, None, K, None, v, dw, grid.dt, backend=b),
        "simulate_linear N=128 P=4000 m=8": lambda b: simulate_linear(sg, grid, noise, np.ones(m), K=K, v=v,
                                                                      backend=b).values,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the table as JSON")
    args = ap.parse_args(argv)
    if kernels._compiled is None:
        raise SystemExit("compiled core is not built; run `pip install -e . --no-build-isolation` first")
    rows = []
    for name, fn in cases().items():
        times = {b: min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) for b in ("python", "compiled")}
        same = bool(np.array_equal(fn("python"), fn("compiled")))
        rows.append({"kernel": name, "python_s": times["python"], "compiled_s": times["compiled"],
                     "speedup": times["python"] / times["compiled"], "bit_identical": same})
    print(f"{'kernel':36s} {'python [s]':>11s} {'compiled [s]':>13s} {'speedup':>8s}  identical")
    for r in rows:
        print(f"{r['kernel']:36s} {r['python_s']:11.4f} {r['compiled_s']:13.4f} {r['speedup']:8.2f}  {r['bit_identical']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
