"""Time the numba and numpy paths of the hot kernels on realistic inputs.

    python3 benchmarks/bench_kernels.py [--epochs 300] [--repeat 20]

The band matrix comes from the normal equations of a simulated scenario, so
bandwidth and conditioning match what the solvers see.  Both paths are run
on identical inputs and their outputs are compared before timing.
"""
import argparse
import time

import numpy as np

from gnssfg import _accel
from gnssfg.graph import linearize
from gnssfg.sim import EstimatorConfig, ScenarioConfig, generate, to_graph
from gnssfg.solver import normal_equations


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def band_inputs(n_epochs):
    scen = generate(ScenarioConfig(n_epochs=n_epochs, n_satellites=10, rng_seed=1))
    graph, init = to_graph(scen, EstimatorConfig())
    ab, g = normal_equations(linearize(graph, init))
    return ab, -g


def range_inputs(n_rows, seed=0):
    rng = np.random.default_rng(seed)
    rx = rng.normal(0.0, 50.0, (n_rows, 3))
    sat = rng.normal(0.0, 1.0, (n_rows, 3))
    sat *= 2.6e7 / np.linalg.norm(sat, axis=1)[:, None]
    offset = rng.normal(100.0, 5.0, n_rows)
    meas = np.linalg.norm(sat - rx, axis=1) + offset + rng.normal(0.0, 1.0, n_rows)
    inv_sigma = np.full(n_rows, 1.0)
    psi = rng.uniform(0.0, 1.0, n_rows)
    dpsi = np.ones(n_rows)
    return rx, sat, offset, meas, inv_sigma, psi, dpsi


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--rows", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    if not _accel.HAVE_NUMBA:
        print("numba unavailable or disabled: the 'numba' column runs the plain-Python loops")
    impl = _accel.IMPLEMENTATIONS
    ab, rhs = band_inputs(args.epochs)
    rows = range_inputs(args.rows)

    # warm the JIT and check agreement once
    lb_j, fail_j = impl["numba"]["band_cholesky"](ab, _accel.PIVOT_RTOL)
    lb_n, fail_n = impl["numpy"]["band_cholesky"](ab, _accel.PIVOT_RTOL)
    assert fail_j == fail_n == -1
    x_j = impl["numba"]["band_solve"](lb_j, rhs)
    x_n = impl["numpy"]["band_solve"](lb_n, rhs)
    rel = np.linalg.norm(x_j - x_n) / np.linalg.norm(x_n)
    r_j = impl["numba"]["range_rows"](*rows)
    r_n = impl["numpy"]["range_rows"](*rows)
    rows_err = max(float(np.max(np.abs(a - b))) for a, b in zip(r_j[:4], r_n[:4]))

    print(f"band matrix: n={ab.shape[1]}, bandwidth={ab.shape[0] - 1}; solution rel. diff {rel:.2e}")
    print(f"range rows: {args.rows}; max abs diff {rows_err:.2e}")
    print(f"{'kernel':<16}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    cases = [
        ("band_cholesky", (ab, _accel.PIVOT_RTOL)),
        ("band_solve", (lb_n, rhs)),
        ("range_rows", rows),
    ]
    for name, a in cases:
        tj = best_of(impl["numba"][name], a, args.repeat)
        tn = best_of(impl["numpy"][name], a, args.repeat)
        print(f"{name:<16}{tj * 1e3:>12.3f}{tn * 1e3:>12.3f}{tn / tj:>10.1f}x")


if __name__ == "__main__":
    main()
