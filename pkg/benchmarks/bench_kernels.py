"""Time one block of the standard instance under each head-evaluation backend.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--blocks 1]
"""

import argparse
import time

import numpy as np

from icgd_forge.builder import build_stack, make_plan, run_stack
from icgd_forge.kernels import BACKENDS
from icgd_forge.network import DomainBox, NetworkShape, random_instance


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--eps", type=float, default=1e-2)
    args = p.parse_args()

    shape = NetworkShape(2, 2, 4, 3, 8)
    data = random_instance(shape, np.random.default_rng(0))
    plan = make_plan(shape, 0.05, DomainBox(1.0), data.B_x, data.B_y, eps_target=args.eps)
    stack = build_stack(plan, args.blocks)
    print(f"standard instance: D = {plan.layout.D}, tokens = {shape.n + 1}, layers = {stack.n_layers}")
    results = {}
    for backend in BACKENDS:
        run_stack(stack, data, check_slots=False, backend=backend)  # warm the packed-head caches
        times = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            trace = run_stack(stack, data, check_slots=False, backend=backend)
            times.append(time.perf_counter() - t0)
        results[backend] = (min(times), trace.w_bar)
        print(f"{backend:>9}: best {min(times) * 1e3:8.2f} ms, median {np.median(times) * 1e3:8.2f} ms over {args.repeat} runs")
    if len(results) == 2:
        (tc, wc), (tn, wn) = results["compiled"], results["numpy"]
        print(f"speedup compiled/numpy: {tn / tc:.2f}x, max trajectory difference {np.max(np.abs(wc - wn)):.1e}")


if __name__ == "__main__":
    main()
