"""Time the compiled kernels against the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``. Each kernel is called on
identical inputs through both backends; results are checked to agree
before timings are reported.
"""
import argparse
import timeit

import numpy as np

from gpccopf import _core_py, backend
from gpccopf.grid import Injections, load_case


def _pf_args(case):
    inj = Injections.from_dispatch(case)
    pvpq = np.sort(np.concatenate([case.pv, case.pq]))
    fixed = np.concatenate([[case.slack], case.pv])

    def call(core):
        v, th = np.ones(case.n_bus), np.zeros(case.n_bus)
        v[fixed] = case.v_set[fixed]
        core.newton_pf(case.g_matrix, case.b_matrix, v, th, inj.p, inj.q, pvpq, case.pq,
                       1e-10, 20)
        return v, th

    return call


def _kernels(rng):
    X1, X2 = rng.normal(size=(200, 37)), rng.normal(size=(200, 37))
    inv_ls2 = rng.uniform(0.1, 1.0, 37)
    V = rng.normal(size=(200, 8))
    A = rng.normal(size=(8, 8))
    M = -0.1 * (A @ A.T) - np.eye(8)
    logk = rng.normal(size=200) * 0.1
    x1, X75 = rng.normal(size=(1, 8)), rng.normal(size=(75, 8))
    return {
        "se_ard 1x75x8": lambda core: core.se_ard(x1, X75, inv_ls2[:8], 1.3),
        "se_ard 200x200x37": lambda core: core.se_ard(X1, X2, inv_ls2, 1.3),
        "em_q 200 points": lambda core: core.em_q(V, M, logk, -0.2),
        "newton_pf ieee9": _pf_args(load_case("ieee9")),
        "newton_pf ieee39": _pf_args(load_case("ieee39")),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=50)
    args = parser.parse_args()
    if not backend.COMPILED:
        raise SystemExit("compiled extension unavailable; build with pip install -e .")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'cython [ms]':>14}{'numpy [ms]':>14}{'speed-up':>10}")
    # GP code calls backend.se_ard, which switches to numpy above
    # backend.GRAM_CUTOFF entries; single-point predictions stay compiled
    for name, fn in _kernels(rng).items():
        a, b = fn(backend.core), fn(_core_py)
        for x, y in zip(np.atleast_1d(a) if not isinstance(a, tuple) else a,
                        np.atleast_1d(b) if not isinstance(b, tuple) else b):
            np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-12)
        times = []
        for core in (backend.core, _core_py):
            t = timeit.repeat(lambda: fn(core), repeat=args.repeat, number=args.number)
            times.append(min(t) / args.number * 1e3)
        print(f"{name:<22}{times[0]:>14.4f}{times[1]:>14.4f}{times[1] / times[0]:>9.1f}x")


if __name__ == "__main__":
    main()
