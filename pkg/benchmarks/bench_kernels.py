"""Compiled (numba) versus pure-numpy kernels.

Times one full Metropolis-within-Gibbs sweep of the joint model and the
individual likelihood kernels on a simulated triangle, and checks that both
backends agree on the results.

    python3 benchmarks/bench_kernels.py [--T 60] [--regions 3] [--repeat 200]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from gdmnowcast import kernels
from gdmnowcast.data import CensoredTriangle
from gdmnowcast.experiment import SimulationScenario, simulate_dataset
from gdmnowcast.mcmc.engine import GDMChain, McmcConfig
from gdmnowcast.mcmc.sweep import refresh_np, sweep_jit, sweep_np
from gdmnowcast.model import Model, ModelSpec, prepare_data


def _time(fn, repeat: int) -> float:
    fn()  # compile / warm caches
    t = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t) / repeat * 1e3


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--T", type=int, default=60)
    ap.add_argument("--regions", type=int, default=3)
    ap.add_argument("--d-max", type=int, default=7)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)

    sim = simulate_dataset(SimulationScenario(T=args.T, S=args.regions, d_max=args.d_max, seed=1))
    ct = CensoredTriangle(sim.triangle, args.T - 1)
    model = Model.for_data(ModelSpec(d_max=args.d_max, d_prime=4), ct)
    fd = prepare_data(model, ct)
    chain = GDMChain(model, fd, McmcConfig.testing(n_chains=1), 0)
    st = chain.st
    lay = st.layout
    rng = np.random.default_rng(0)
    normals = rng.standard_normal(lay.n_normals)
    uniforms = 1.0 - rng.random(lay.n_uniforms)

    rows = []
    a, b = st.copy(), st.copy()
    fast = _time(lambda: sweep_jit(*a.args(), normals, uniforms, 0.01), args.repeat)
    slow = _time(lambda: sweep_np(b, normals, uniforms, 0.01), max(args.repeat // 10, 5))
    rows.append(("full sweep", fast, slow))

    # identical inputs must give identical chains
    a, b = st.copy(), st.copy()
    for i in range(20):
        n = rng.standard_normal(lay.n_normals)
        u = 1.0 - rng.random(lay.n_uniforms)
        sweep_jit(*a.args(), n, u, 0.1)
        sweep_np(b, n, u, 0.1)
    same = all(np.allclose(getattr(a, f), getattr(b, f), rtol=1e-9, atol=1e-6)
               for f in ("beta", "iota", "psi", "theta", "phi", "y"))

    c = st.copy()
    refresh_np(c)
    cells = np.ascontiguousarray(c.z[:, :, :4])
    mask = np.ones(cells.shape, dtype=bool)
    lm = np.repeat(c.eta[:, :, None], 4, axis=2)
    args_nb = (cells, mask, lm, c.theta)
    rows.append(("nb_loglik_rows", _time(lambda: kernels.nb_loglik_rows_jit(*args_nb), args.repeat),
                 _time(lambda: kernels.nb_loglik_rows_np(*args_nb), args.repeat)))
    rows.append(("nb_mean_loglik_rows", _time(lambda: kernels.nb_mean_loglik_rows_jit(*args_nb), args.repeat),
                 _time(lambda: kernels.nb_mean_loglik_rows_np(*args_nb), args.repeat)))
    args_cm = (c.psi, c.goff, 0)
    rows.append(("cell_log_means", _time(lambda: kernels.cell_log_means_jit(*args_cm), args.repeat),
                 _time(lambda: kernels.cell_log_means_np(*args_cm), args.repeat)))

    print(f"T={args.T} S={args.regions} D={args.d_max}  backend in use: {kernels.BACKEND}")
    print(f"{'kernel':<22}{'numba ms':>12}{'numpy ms':>12}{'speed-up':>10}")
    for name, f, s in rows:
        print(f"{name:<22}{f:>12.4f}{s:>12.4f}{s / f:>9.1f}x")
    print(f"backends agree after 20 sweeps: {same}")


if __name__ == "__main__":
    main()
