"""Element-level quadrature kernels.

Every kernel exists in two semantically identical flavors: a loop version
compiled with numba (``*_loops``) and a vectorized numpy version
(``*_numpy``). The active flavor is chosen at import time by
:mod:`pftopt.backend`; ``benchmarks/bench_kernels.py`` times both.

Conventions: ``lam`` is the (nq, 3) table of barycentric coordinates of the
quadrature points, ``wq`` the (nq,) reference weights summing to 1, ``psi``
the (nq, 4) table of the four scalar velocity basis functions (three vertex
hats plus the cubic bubble scaled to 1 at the barycenter), ``grads`` the
(nt, 3, 2) constant hat gradients and ``bgrads`` the (nt, nq, 2) bubble
gradients. Physical integrals are ``area * sum_q wq * integrand``.
"""

import numpy as np

from .backend import USING_NUMBA, jit

# ---------------------------------------------------------------------------
# numpy implementations


def vel_stiffness_numpy(areas, grads, bgrads, wq):
    nt = areas.shape[0]
    S = np.empty((nt, 4, 4))
    S[:, :3, :3] = areas[:, None, None] * np.einsum("tak,tbk->tab", grads, grads)
    cross = areas[:, None] * np.einsum("q,tak,tqk->ta", wq, grads, bgrads)
    S[:, :3, 3] = cross
    S[:, 3, :3] = cross
    S[:, 3, 3] = areas * np.einsum("q,tqk,tqk->t", wq, bgrads, bgrads)
    return S


def vel_mass_numpy(areas, coeff, psi, wq):
    M = np.einsum("q,tq,qa,qb->tab", wq, coeff, psi, psi)
    return areas[:, None, None] * M


def vel_convection_numpy(areas, grads, bgrads, wvals, psi, wq):
    nt, nq = wvals.shape[0], wvals.shape[1]
    dpsi = np.empty((nt, nq, 4, 2))
    dpsi[:, :, :3, :] = grads[:, None, :, :]
    dpsi[:, :, 3, :] = bgrads
    C = np.einsum("q,tqk,tqbk,qa->tab", wq, wvals, dpsi, psi)
    return areas[:, None, None] * C


def grad_reaction_skew_numpy(areas, grads, bgrads, wvals, wgrads, psi, wq):
    nt, nq = wvals.shape[0], wvals.shape[1]
    dpsi = np.empty((nt, nq, 4, 2))
    dpsi[:, :, :3, :] = grads[:, None, :, :]
    dpsi[:, :, 3, :] = bgrads
    R = np.einsum("q,qa,qb,tqmk->tmkab", wq, psi, psi, wgrads)
    R -= np.einsum("q,qb,tqak,tqm->tmkab", wq, psi, dpsi, wvals)
    return 0.5 * areas[:, None, None, None, None] * R


def div_coupling_numpy(areas, grads, bgrads, lam, wq):
    nt, nq = bgrads.shape[0], bgrads.shape[1]
    dpsi = np.empty((nt, nq, 4, 2))
    dpsi[:, :, :3, :] = grads[:, None, :, :]
    dpsi[:, :, 3, :] = bgrads
    D = np.einsum("q,qi,tqak->tiak", wq, lam, dpsi)
    return areas[:, None, None, None] * D


def p1_stiffness_numpy(areas, grads):
    return areas[:, None, None] * np.einsum("tak,tbk->tab", grads, grads)


def p1_mass_numpy(areas, lam, wq):
    M = np.einsum("q,qa,qb->ab", wq, lam, lam)
    return areas[:, None, None] * M[None, :, :]


def scalar_at_quad_numpy(tris, nodal, lam):
    return np.einsum("ti,qi->tq", nodal[tris], lam)


def velocity_at_quad_numpy(tris, nodal, bub, psi):
    vals = np.einsum("tic,qi->tqc", nodal[tris], psi[:, :3])
    vals += bub[:, None, :] * psi[None, :, 3, None]
    return vals


def velocity_grad_at_quad_numpy(tris, grads, bgrads, nodal, bub):
    G = np.einsum("tim,tik->tmk", nodal[tris], grads)
    nq = bgrads.shape[1]
    G = np.repeat(G[:, None, :, :], nq, axis=1)
    G += bub[:, None, :, None] * bgrads[:, :, None, :]
    return G


def p1_load_numpy(areas, tris, vals, lam, wq, nv):
    contrib = areas[:, None] * np.einsum("q,tq,qi->ti", wq, vals, lam)
    out = np.zeros(nv)
    np.add.at(out, tris, contrib)
    return out


def vel_load_numpy(areas, tris, vals, psi, wq, nv):
    nt = areas.shape[0]
    contrib = areas[:, None, None] * np.einsum("q,tqc,qa->tac", wq, vals, psi)
    out = np.zeros((nv + nt, 2))
    np.add.at(out, tris, contrib[:, :3, :])
    out[nv:, :] = contrib[:, 3, :]
    return out


def integrate_numpy(areas, vals, wq):
    return float(np.einsum("t,q,tq->", areas, wq, vals))


# ---------------------------------------------------------------------------
# loop implementations (numba-compiled when the numba backend is active)


def _vel_stiffness_loops(areas, grads, bgrads, wq):
    nt = areas.shape[0]
    nq = wq.shape[0]
    S = np.zeros((nt, 4, 4))
    for t in range(nt):
        a = areas[t]
        for i in range(3):
            for j in range(3):
                S[t, i, j] = a * (
                    grads[t, i, 0] * grads[t, j, 0] + grads[t, i, 1] * grads[t, j, 1]
                )
        for i in range(3):
            acc = 0.0
            for q in range(nq):
                acc += wq[q] * (
                    grads[t, i, 0] * bgrads[t, q, 0] + grads[t, i, 1] * bgrads[t, q, 1]
                )
            S[t, i, 3] = a * acc
            S[t, 3, i] = a * acc
        acc = 0.0
        for q in range(nq):
            acc += wq[q] * (
                bgrads[t, q, 0] * bgrads[t, q, 0] + bgrads[t, q, 1] * bgrads[t, q, 1]
            )
        S[t, 3, 3] = a * acc
    return S


def _vel_mass_loops(areas, coeff, psi, wq):
    nt = areas.shape[0]
    nq = wq.shape[0]
    M = np.zeros((nt, 4, 4))
    for t in range(nt):
        for q in range(nq):
            w = areas[t] * wq[q] * coeff[t, q]
            for i in range(4):
                wpi = w * psi[q, i]
                for j in range(4):
                    M[t, i, j] += wpi * psi[q, j]
    return M


def _vel_convection_loops(areas, grads, bgrads, wvals, psi, wq):
    nt = areas.shape[0]
    nq = wq.shape[0]
    C = np.zeros((nt, 4, 4))
    for t in range(nt):
        for q in range(nq):
            w = areas[t] * wq[q]
            w1 = wvals[t, q, 0]
            w2 = wvals[t, q, 1]
            for j in range(4):
                if j < 3:
                    adv = w1 * grads[t, j, 0] + w2 * grads[t, j, 1]
                else:
                    adv = w1 * bgrads[t, q, 0] + w2 * bgrads[t, q, 1]
                for i in range(4):
                    C[t, i, j] += w * adv * psi[q, i]
    return C


def _grad_reaction_skew_loops(areas, grads, bgrads, wvals, wgrads, psi, wq):
    nt = areas.shape[0]
    nq = wq.shape[0]
    R = np.zeros((nt, 2, 2, 4, 4))
    for t in range(nt):
        for q in range(nq):
            w = 0.5 * areas[t] * wq[q]
            for i in range(4):
                if i < 3:
                    di0 = grads[t, i, 0]
                    di1 = grads[t, i, 1]
                else:
                    di0 = bgrads[t, q, 0]
                    di1 = bgrads[t, q, 1]
                for j in range(4):
                    pij = psi[q, i] * psi[q, j]
                    for m in range(2):
                        R[t, m, 0, i, j] += w * (
                            pij * wgrads[t, q, m, 0]
                            - psi[q, j] * di0 * wvals[t, q, m]
                        )
                        R[t, m, 1, i, j] += w * (
                            pij * wgrads[t, q, m, 1]
                            - psi[q, j] * di1 * wvals[t, q, m]
                        )
    return R


def _div_coupling_loops(areas, grads, bgrads, lam, wq):
    nt = areas.shape[0]
    nq = wq.shape[0]
    D = np.zeros((nt, 3, 4, 2))
    for t in range(nt):
        for q in range(nq):
            w = areas[t] * wq[q]
            for i in range(3):
                wl = w * lam[q, i]
                for j in range(4):
                    if j < 3:
                        D[t, i, j, 0] += wl * grads[t, j, 0]
                        D[t, i, j, 1] += wl * grads[t, j, 1]
                    else:
                        D[t, i, j, 0] += wl * bgrads[t, q, 0]
                        D[t, i, j, 1] += wl * bgrads[t, q, 1]
    return D


def _p1_stiffness_loops(areas, grads):
    nt = areas.shape[0]
    S = np.zeros((nt, 3, 3))
    for t in range(nt):
        for i in range(3):
            for j in range(3):
                S[t, i, j] = areas[t] * (
                    grads[t, i, 0] * grads[t, j, 0] + grads[t, i, 1] * grads[t, j, 1]
                )
    return S


def _p1_mass_loops(areas, lam, wq):
    nt = areas.shape[0]
    nq = wq.shape[0]
    M = np.zeros((nt, 3, 3))
    ref = np.zeros((3, 3))
    for q in range(nq):
        for i in range(3):
            for j in range(3):
                ref[i, j] += wq[q] * lam[q, i] * lam[q, j]
    for t in range(nt):
        for i in range(3):
            for j in range(3):
                M[t, i, j] = areas[t] * ref[i, j]
    return M


def _scalar_at_quad_loops(tris, nodal, lam):
    nt = tris.shape[0]
    nq = lam.shape[0]
    out = np.zeros((nt, nq))
    for t in range(nt):
        a = nodal[tris[t, 0]]
        b = nodal[tris[t, 1]]
        c = nodal[tris[t, 2]]
        for q in range(nq):
            out[t, q] = lam[q, 0] * a + lam[q, 1] * b + lam[q, 2] * c
    return out


def _velocity_at_quad_loops(tris, nodal, bub, psi):
    nt = tris.shape[0]
    nq = psi.shape[0]
    out = np.zeros((nt, nq, 2))
    for t in range(nt):
        for q in range(nq):
            for c in range(2):
                out[t, q, c] = (
                    psi[q, 0] * nodal[tris[t, 0], c]
                    + psi[q, 1] * nodal[tris[t, 1], c]
                    + psi[q, 2] * nodal[tris[t, 2], c]
                    + psi[q, 3] * bub[t, c]
                )
    return out


def _velocity_grad_at_quad_loops(tris, grads, bgrads, nodal, bub):
    nt = tris.shape[0]
    nq = bgrads.shape[1]
    out = np.zeros((nt, nq, 2, 2))
    for t in range(nt):
        for m in range(2):
            g0 = 0.0
            g1 = 0.0
            for i in range(3):
                g0 += nodal[tris[t, i], m] * grads[t, i, 0]
                g1 += nodal[tris[t, i], m] * grads[t, i, 1]
            for q in range(nq):
                out[t, q, m, 0] = g0 + bub[t, m] * bgrads[t, q, 0]
                out[t, q, m, 1] = g1 + bub[t, m] * bgrads[t, q, 1]
    return out


def _p1_load_loops(areas, tris, vals, lam, wq, nv):
    nt = tris.shape[0]
    nq = wq.shape[0]
    out = np.zeros(nv)
    for t in range(nt):
        for q in range(nq):
            w = areas[t] * wq[q] * vals[t, q]
            out[tris[t, 0]] += w * lam[q, 0]
            out[tris[t, 1]] += w * lam[q, 1]
            out[tris[t, 2]] += w * lam[q, 2]
    return out


def _vel_load_loops(areas, tris, vals, psi, wq, nv):
    nt = tris.shape[0]
    nq = wq.shape[0]
    out = np.zeros((nv + nt, 2))
    for t in range(nt):
        for q in range(nq):
            w = areas[t] * wq[q]
            for c in range(2):
                f = w * vals[t, q, c]
                out[tris[t, 0], c] += f * psi[q, 0]
                out[tris[t, 1], c] += f * psi[q, 1]
                out[tris[t, 2], c] += f * psi[q, 2]
                out[nv + t, c] += f * psi[q, 3]
    return out


def _integrate_loops(areas, vals, wq):
    nt = areas.shape[0]
    nq = wq.shape[0]
    total = 0.0
    for t in range(nt):
        s = 0.0
        for q in range(nq):
            s += wq[q] * vals[t, q]
        total += areas[t] * s
    return total


# ---------------------------------------------------------------------------
# backend dispatch

if USING_NUMBA:
    vel_stiffness = jit(_vel_stiffness_loops)
    vel_mass = jit(_vel_mass_loops)
    vel_convection = jit(_vel_convection_loops)
    grad_reaction_skew = jit(_grad_reaction_skew_loops)
    div_coupling = jit(_div_coupling_loops)
    p1_stiffness = jit(_p1_stiffness_loops)
    p1_mass = jit(_p1_mass_loops)
    scalar_at_quad = jit(_scalar_at_quad_loops)
    velocity_at_quad = jit(_velocity_at_quad_loops)
    velocity_grad_at_quad = jit(_velocity_grad_at_quad_loops)
    p1_load = jit(_p1_load_loops)
    vel_load = jit(_vel_load_loops)
    integrate = jit(_integrate_loops)
else:
    vel_stiffness = vel_stiffness_numpy
    vel_mass = vel_mass_numpy
    vel_convection = vel_convection_numpy
    grad_reaction_skew = grad_reaction_skew_numpy
    div_coupling = div_coupling_numpy
    p1_stiffness = p1_stiffness_numpy
    p1_mass = p1_mass_numpy
    scalar_at_quad = scalar_at_quad_numpy
    velocity_at_quad = velocity_at_quad_numpy
    velocity_grad_at_quad = velocity_grad_at_quad_numpy
    p1_load = p1_load_numpy
    vel_load = vel_load_numpy
    integrate = integrate_numpy

NUMPY_KERNELS = {
    "vel_stiffness": vel_stiffness_numpy,
    "vel_mass": vel_mass_numpy,
    "vel_convection": vel_convection_numpy,
    "grad_reaction_skew": grad_reaction_skew_numpy,
    "div_coupling": div_coupling_numpy,
    "p1_stiffness": p1_stiffness_numpy,
    "p1_mass": p1_mass_numpy,
    "scalar_at_quad": scalar_at_quad_numpy,
    "velocity_at_quad": velocity_at_quad_numpy,
    "velocity_grad_at_quad": velocity_grad_at_quad_numpy,
    "p1_load": p1_load_numpy,
    "vel_load": vel_load_numpy,
    "integrate": integrate_numpy,
}

ACTIVE_KERNELS = {
    "vel_stiffness": vel_stiffness,
    "vel_mass": vel_mass,
    "vel_convection": vel_convection,
    "grad_reaction_skew": grad_reaction_skew,
    "div_coupling": div_coupling,
    "p1_stiffness": p1_stiffness,
    "p1_mass": p1_mass,
    "scalar_at_quad": scalar_at_quad,
    "velocity_at_quad": velocity_at_quad,
    "velocity_grad_at_quad": velocity_grad_at_quad,
    "p1_load": p1_load,
    "vel_load": vel_load,
    "integrate": integrate,
}
