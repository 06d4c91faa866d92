"""Compare the numba and numpy kernel paths.

Usage::

    python benchmarks/bench_kernels.py [--n-loads 10000 100000] [--hours 24] [--repeat 3]

For each population size the script times a short closed-loop run with both
backends, checks that the traces are bit-identical and prints the speedup.
It also times the chain sampler used by the Monte-Carlo oracles.
"""

import argparse
import os
import time

import numpy as np

from meanfield_dr import kernels
from meanfield_dr.cli import build_reference
from meanfield_dr.gridsim import SimConfig, run_closed_loop
from meanfield_dr.loadmodel import build_nominal_pool_model


def _with_backend(name, fn):
    old = os.environ.get(kernels.ENV_FLAG)
    os.environ[kernels.ENV_FLAG] = "1" if name == "numba" else "0"
    try:
        return fn()
    finally:
        if old is None:
            os.environ.pop(kernels.ENV_FLAG, None)
        else:
            os.environ[kernels.ENV_FLAG] = old


def _best_of(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_closed_loop(n_loads, hours, repeat):
    _, _, r = build_reference(hours, seed=13)
    cfg = SimConfig(n_loads=n_loads, burn_in_steps=120)
    res = {}
    for name in ("numba", "numpy"):
        _with_backend(name, lambda: run_closed_loop(cfg, r[:12]))  # warm-up / JIT
        res[name] = _with_backend(name, lambda: _best_of(lambda: run_closed_loop(cfg, r), repeat))
    same = np.array_equal(res["numba"][1].zeta, res["numpy"][1].zeta) and \
        np.array_equal(res["numba"][1].final_qos, res["numpy"][1].final_qos)
    steps = cfg.burn_in + r.size
    print(f"closed loop  N={n_loads:>7d}  steps={steps:>5d}  numba {res['numba'][0]:7.3f}s  "
          f"numpy {res['numpy'][0]:7.3f}s  speedup {res['numpy'][0] / res['numba'][0]:5.1f}x  identical={same}")
    return same


def bench_chains(n_chains, n_steps, repeat):
    fam = build_nominal_pool_model()
    succ, cum = fam.succ, kernels.cumulative_rows(fam.P0, fam.succ)
    keys = kernels.stream_keys(0, n_chains)
    x0 = np.zeros(n_chains, dtype=np.int64)
    run = lambda: kernels.simulate_chains(x0, keys, n_steps, succ, cum)
    res = {}
    for name in ("numba", "numpy"):
        _with_backend(name, lambda: kernels.simulate_chains(x0, keys, 4, succ, cum))
        res[name] = _with_backend(name, lambda: _best_of(run, repeat))
    same = np.array_equal(res["numba"][1], res["numpy"][1])
    print(f"chains       {n_chains} x {n_steps}  numba {res['numba'][0]:7.3f}s  numpy {res['numpy'][0]:7.3f}s  "
          f"speedup {res['numpy'][0] / res['numba'][0]:5.1f}x  identical={same}")
    return same


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--n-loads", type=int, nargs="+", default=[10_000, 100_000])
    p.add_argument("--hours", type=float, default=24.0)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        print("numba not importable; only the numpy path is available")
        return 1
    ok = all(bench_closed_loop(n, args.hours, args.repeat) for n in args.n_loads)
    ok &= bench_chains(256, 20_000, args.repeat)
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
