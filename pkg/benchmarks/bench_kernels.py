"""Compiled vs numpy kernel timings.

Times the noise fill, the two rollout kernels and a full ``control_step``
for every available backend and prints one row per case::

    python3 benchmarks/bench_kernels.py --rollouts 2500 --horizon 250 --repeats 5

Rows are medians over ``--repeats`` calls after one warm-up call.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from logmppi import backend
from logmppi.controller import CartpoleProblem, ControllerConfig, MPPIController
from logmppi.costmap import CollisionLookup, RobotFootprint, inflate, world_grid
from logmppi.costs import ControlCostSpec, control_weights
from logmppi.dynamics import CartpoleConfig, DiffDriveConfig
from logmppi.sampling import GaussianNoiseSpec, match_nln_params, sample_batch
from logmppi.world import generate_forest, navigation_problem


def median_ms(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def forest_lookup() -> CollisionLookup:
    world = generate_forest((25.0, 25.0), d_obs_min=2.0, seed=0, start=(1.0, 1.0, 0.785), goal=(24.0, 24.0, 0.0))
    grid = inflate(world_grid(world.discs(), (25.0, 25.0)), 0.3)
    return CollisionLookup(grid, RobotFootprint(0.3))


def cases(m: int, n: int, threads: int):
    nln = match_nln_params([0.002, 0.0022])
    gauss = GaussianNoiseSpec([0.023, 0.028])
    du2 = np.empty((m, n, 2))

    nav_cfg = ControllerConfig(n, m, 0.169, 1200.0, nln, 3, 51)
    nav = navigation_problem(nav_cfg, DiffDriveConfig(), (24.0, 24.0, 0.0))
    nav.lookup = forest_lookup()
    nominal2 = np.tile([1.5, 0.0], (n, 1))
    x_nav = np.array([1.0, 1.0, 0.785])

    cart = CartpoleConfig()
    cart_noise = match_nln_params([0.0225])
    cart_problem = CartpoleProblem(cart, ControlCostSpec(control_weights(0.07, [0.0225], 0.5), 1000.0, 0.07))
    du1 = np.empty((m, n, 1))
    sample_batch(cart_noise, m, n, 0, out=du1)
    nominal1 = np.zeros((n, 1))

    def step(kernel):
        ctl = MPPIController(nav_cfg, nav, seed=0, threads=threads, kernel=kernel)
        ctl.nominal = nominal2.copy()
        return lambda: ctl.control_step(x_nav)

    for name in backend.BACKENDS:
        k = backend.get(name)
        yield name, "fill_noise gaussian", lambda k=k: sample_batch(gauss, m, n, 1, threads=threads, out=du2, kernel=k)
        yield name, "fill_noise nln", lambda k=k: sample_batch(nln, m, n, 1, threads=threads, out=du2, kernel=k)
        sample_batch(nln, m, n, 2, out=du2)
        du_nav = du2.copy()
        yield name, "diffdrive rollouts + costmap", lambda k=k: nav.evaluate(x_nav, nominal2, du_nav.copy(), None, threads, k)
        yield name, "cartpole rollouts", lambda k=k: cart_problem.evaluate(np.zeros(4), nominal1, du1.copy(), None, threads, k)
        yield name, "control_step nln navigation", step(name)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rollouts", type=int, default=2500)
    parser.add_argument("--horizon", type=int, default=250)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--threads", type=int, default=backend.default_threads())
    args = parser.parse_args(argv)

    print(f"M={args.rollouts} N={args.horizon} threads={args.threads} active backend={backend.NAME}")
    results = {}
    for name, case, fn in cases(args.rollouts, args.horizon, args.threads):
        results[(name, case)] = median_ms(fn, args.repeats)
    names = list(backend.BACKENDS)
    header = f"{'case':32s}" + "".join(f"{n + ' ms':>14s}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10s}"
    print(header)
    for case in dict.fromkeys(c for _, c in results):
        row = f"{case:32s}" + "".join(f"{results[(n, case)]:14.2f}" for n in names)
        if len(names) == 2:
            row += f"{results[('python', case)] / results[('compiled', case)]:10.1f}x"
        print(row)


if __name__ == "__main__":
    main()
