"""Time the compiled mixture kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py --n 4096 --dim 2 --components 4
"""

import argparse
import timeit

import numpy as np

from segflow import _kernels_py

try:
    from segflow import _kernels
except ImportError:
    _kernels = None


def make_inputs(n, dim, components, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dim))
    shift = rng.normal(scale=0.3, size=(n, dim))
    log_w = np.log(rng.dirichlet(np.ones(components)))
    means = rng.normal(size=(components, dim))
    variances = rng.uniform(0.05, 1.0, size=(components, dim))
    return x, shift, log_w, means, variances


def best_time(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=4096, help="points per call")
    parser.add_argument("--dim", type=int, default=2)
    parser.add_argument("--components", type=int, default=4)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    x, shift, log_w, means, variances = make_inputs(args.n, args.dim, args.components, args.seed)
    cases = {
        "gmm_velocity_batch": lambda mod: mod.gmm_velocity_batch(x, 0.5, shift, log_w, means, variances),
        "gmm_logpdf_batch": lambda mod: mod.gmm_logpdf_batch(x, shift, log_w, means, variances),
    }
    print(f"n={args.n} dim={args.dim} components={args.components}")
    print(f"{'kernel':<20} {'numpy (ms)':>12} {'compiled (ms)':>14} {'speedup':>8}")
    for name, call in cases.items():
        slow = best_time(lambda: call(_kernels_py), args.repeat, args.number)
        if _kernels is None:
            print(f"{name:<20} {slow * 1e3:12.3f} {'n/a':>14} {'n/a':>8}")
            continue
        assert np.allclose(call(_kernels), call(_kernels_py), rtol=1e-12, atol=1e-12)
        fast = best_time(lambda: call(_kernels), args.repeat, args.number)
        print(f"{name:<20} {slow * 1e3:12.3f} {fast * 1e3:14.3f} {slow / fast:7.1f}x")


if __name__ == "__main__":
    main()
