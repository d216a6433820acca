"""Compare the compiled and pure-Python Bulirsch-Stoer kernels.

Usage: python3 benchmarks/bench_integrator.py [--sims N] [--t-end T] [--repeat R]

Both kernels integrate the same sampled initial conditions; the script
reports the best-of-R wall time per backend, the speed-up, and whether the
sampled trajectories are bit-identical.
"""

import argparse
import time

import numpy as np

from tbpinn.datagen import DEFAULT_DT, record_rng, sample_initial_condition
from tbpinn.integrator import available_backends, sample_trajectory


def run(backend, ics, t_end):
    return [sample_trajectory(ic, t_end, DEFAULT_DT, backend=backend) for ic in ics]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sims", type=int, default=10)
    ap.add_argument("--t-end", type=float, default=2.5)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=42)
    a = ap.parse_args()

    ics = [sample_initial_condition(record_rng(a.seed, i), i).state() for i in range(a.sims)]
    backends = available_backends()
    if "cython" not in backends:
        print("compiled kernel not built; only the python backend is available")

    best, outputs = {}, {}
    for name in backends:
        times = []
        for _ in range(a.repeat):
            start = time.perf_counter()
            outputs[name] = run(name, ics, a.t_end)
            times.append(time.perf_counter() - start)
        best[name] = min(times)
        print(f"{name:>7}: {best[name]:.3f}s for {a.sims} simulations to t={a.t_end} (best of {a.repeat})")

    if len(best) == 2:
        print(f"speed-up: {best['python'] / best['cython']:.1f}x")
        same = all(
            np.array_equal(x.vectors(), y.vectors()) and x.verdict == y.verdict
            for x, y in zip(outputs["cython"], outputs["python"])
        )
        print(f"bit-identical trajectories: {same}")


if __name__ == "__main__":
    main()
