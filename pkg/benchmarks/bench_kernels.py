#!/usr/bin/env python3
"""Time the numba element kernels against the pure-numpy fallbacks.

Run from the repository root:

    python3 benchmarks/bench_kernels.py [--nx 240] [--ny 80] [--repeat 5]

The same comparison at the solver level is a single environment switch:
``PFTOPT_FORCE_NUMPY=1 python3 -m pftopt.cli ...`` selects the numpy path.
"""

import argparse
import time

import numpy as np

from pftopt import _kernels
from pftopt.backend import USING_NUMBA
from pftopt.mesh import build_structured_mesh

KERNELS = [
    "vel_stiffness",
    "vel_mass",
    "vel_convection",
    "grad_reaction_skew",
    "div_coupling",
    "scalar_at_quad",
    "velocity_at_quad",
    "velocity_grad_at_quad",
    "p1_load",
    "vel_load",
    "integrate",
]


def build_args(mesh):
    lam, wq, psi = mesh.quad
    rng = np.random.default_rng(0)
    nodal2 = rng.standard_normal((mesh.num_vertices, 2))
    bub2 = rng.standard_normal((mesh.num_triangles, 2))
    coeff = rng.uniform(0.0, 2.0, (mesh.num_triangles, lam.shape[0]))
    wvals = _kernels.velocity_at_quad_numpy(mesh.triangles, nodal2, bub2, psi)
    wgrads = _kernels.velocity_grad_at_quad_numpy(
        mesh.triangles, mesh.grads, mesh.bubble_grads, nodal2, bub2
    )
    areas, grads, bgrads = mesh.areas, mesh.grads, mesh.bubble_grads
    tris = mesh.triangles
    nv = mesh.num_vertices
    return {
        "vel_stiffness": (areas, grads, bgrads, wq),
        "vel_mass": (areas, coeff, psi, wq),
        "vel_convection": (areas, grads, bgrads, wvals, psi, wq),
        "grad_reaction_skew": (areas, grads, bgrads, wvals, wgrads, psi, wq),
        "div_coupling": (areas, grads, bgrads, lam, wq),
        "scalar_at_quad": (tris, nodal2[:, 0].copy(), lam),
        "velocity_at_quad": (tris, nodal2, bub2, psi),
        "velocity_grad_at_quad": (tris, grads, bgrads, nodal2, bub2),
        "p1_load": (areas, tris, coeff, lam, wq, nv),
        "vel_load": (areas, tris, wvals, psi, wq, nv),
        "integrate": (areas, coeff, wq),
    }


def time_call(fn, args, repeat):
    fn(*args)  # warm-up (JIT compile on the numba path)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--nx", type=int, default=240)
    ap.add_argument("--ny", type=int, default=80)
    ap.add_argument("--repeat", type=int, default=5)
    opts = ap.parse_args()

    mesh = build_structured_mesh(opts.nx, opts.ny, 3.0, 1.0)
    args = build_args(mesh)
    print(f"mesh {opts.nx}x{opts.ny}: {mesh.num_triangles} triangles")
    print(f"numba available for active backend: {USING_NUMBA}")
    header = f"{'kernel':24s} {'numpy [ms]':>12s} {'numba [ms]':>12s} {'speedup':>9s}"
    print(header)
    print("-" * len(header))
    for name in KERNELS:
        t_np = time_call(_kernels.NUMPY_KERNELS[name], args[name], opts.repeat)
        if USING_NUMBA:
            t_nb = time_call(_kernels.ACTIVE_KERNELS[name], args[name], opts.repeat)
            print(
                f"{name:24s} {1e3 * t_np:12.3f} {1e3 * t_nb:12.3f} "
                f"{t_np / t_nb:8.1f}x"
            )
        else:
            print(f"{name:24s} {1e3 * t_np:12.3f} {'n/a':>12s} {'n/a':>9s}")


if __name__ == "__main__":
    main()
