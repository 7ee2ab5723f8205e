"""Penalized incompressible-flow solvers on the MINI/P1 pair.

The velocity operator is mu * stiffness + drag-weighted mass plus a
convection block; pressure couples through divergence blocks placed in
exactly transposed positions. Convection always uses the skew-symmetrized
(Temam) form 0.5 * (b(w, v, q) - b(w, q, v)), so the convection matrix is
exactly antisymmetric and every adjoint is the literal transpose of the
assembled operator. Dirichlet rows and columns are eliminated with a
right-hand-side lift, which keeps that transposition exact.

``assemble_penalized_operator`` emits the saddle operator with one extra
row/column enforcing a zero pressure mean through a scalar multiplier;
``solve_linear`` solves such systems directly. The production solvers use
an equivalent fast path: the bubble unknowns are eliminated exactly per
element (static condensation), the pressure constant is fixed by pinning
one node during the solve, and returned pressures are shifted to zero
mean. The dense multiplier row makes SuperLU fill explode on larger
meshes, while pinning plus the condensed system factors two orders of
magnitude faster; both formulations agree on velocities to solver
precision for divergence-compatible data.

Time stepping follows the semi-implicit recursion: the advecting field is
lagged one step, so each step is one sparse direct solve. The transient
adjoint transposes the assembled step Jacobians, including the cross term
that couples consecutive steps through the lagged convection.
"""

import math
import re
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels
from .errors import InvalidCoefficientError, NonconvergenceError, SingularSystemError
from .mesh import BoundaryTag, ScalarFieldP1, StructuredMesh, VelocityFieldMini

CONVECTION_MODES = ("none", "standard", "skew", "adjoint")

DEFAULT_POINCARE = 0.56
DEFAULT_LADYZHENSKAYA = 2.0 / math.sqrt(math.pi)


# ---------------------------------------------------------------------------
# problem data


def default_ramp(t):
    """Inflow ramp used by the transient benchmark."""
    return 1.0 - math.exp(-30.0 * t)


@dataclass
class FlowProblemData:
    """Viscosity, Dirichlet data, forcing, and initial state.

    ``g_stationary`` holds full nodal Dirichlet values (only boundary rows
    are used); the transient Dirichlet data is ``ramp(t) * g_stationary``.
    Forces default to zero, the transient initial state to rest.
    """

    mesh: StructuredMesh
    mu: float
    g_stationary: np.ndarray
    ramp: object = default_ramp
    f_stationary: VelocityFieldMini | None = None
    f_transient: object = None  # callable t -> VelocityFieldMini
    u0: VelocityFieldMini | None = None
    c_P: float = DEFAULT_POINCARE
    c_L: float = DEFAULT_LADYZHENSKAYA

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("viscosity must be positive")
        self.g_stationary = np.asarray(self.g_stationary, dtype=float)
        if self.g_stationary.shape != (self.mesh.num_vertices, 2):
            raise ValueError("g_stationary must hold one 2-vector per vertex")
        net, inflow = boundary_fluxes(self.mesh, self.g_stationary)
        if inflow > 0 and abs(net) > 1e-10 * inflow:
            raise ValueError(
                f"Dirichlet data not divergence-compatible: net flux {net:g} "
                f"vs inflow flux {inflow:g}"
            )

    def initial_state(self):
        vel = self.u0 if self.u0 is not None else VelocityFieldMini.zero(self.mesh)
        return FlowState(
            vel, ScalarFieldP1(self.mesh, np.zeros(self.mesh.num_vertices)), 0.0
        )


def poiseuille_profile(mesh):
    """Nodal Dirichlet data: wall-parallel parabola on inflow and outflow.

    The parabola 1 - (2 (x2 - H/2) / H)^2 sits in the first (streamwise)
    component; walls carry zero velocity.
    """
    g = np.zeros((mesh.num_vertices, 2))
    y = mesh.vertices[:, 1]
    x = mesh.vertices[:, 0]
    h = mesh.height
    on_io = (np.abs(x) < 1e-14) | (np.abs(x - mesh.width) < 1e-14)
    prof = 1.0 - (2.0 * (y - 0.5 * h) / h) ** 2
    g[on_io, 0] = prof[on_io]
    on_wall = (np.abs(y) < 1e-14) | (np.abs(y - h) < 1e-14)
    g[on_wall, :] = 0.0
    return g


def channel_problem(mesh, mu):
    """Benchmark channel: Poiseuille Dirichlet data, no body force."""
    return FlowProblemData(mesh, mu, poiseuille_profile(mesh))


def boundary_fluxes(mesh, g_nodal):
    """(net outward flux, inflow-edge flux magnitude) of nodal Dirichlet data."""
    normals = {
        BoundaryTag.INFLOW: np.array([-1.0, 0.0]),
        BoundaryTag.OUTFLOW: np.array([1.0, 0.0]),
    }
    net = 0.0
    inflow = 0.0
    for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        if tag is BoundaryTag.WALL:
            n = (
                np.array([0.0, -1.0])
                if mesh.vertices[a, 1] < 0.5 * mesh.height
                else np.array([0.0, 1.0])
            )
        else:
            n = normals[tag]
        length = float(np.hypot(*(mesh.vertices[b] - mesh.vertices[a])))
        contrib = 0.5 * length * (g_nodal[a] @ n + g_nodal[b] @ n)
        net += contrib
        if tag is BoundaryTag.INFLOW:
            inflow += abs(contrib)
    return net, inflow


# ---------------------------------------------------------------------------
# states and systems


@dataclass
class FlowState:
    velocity: VelocityFieldMini
    pressure: ScalarFieldP1
    multiplier: float = 0.0

    def core_vector(self):
        """[ux dofs, uy dofs, pressure] without the mean multiplier."""
        mesh = self.velocity.mesh
        out = np.empty(core_dofs(mesh))
        out[: 2 * mesh.num_velocity_dofs] = self.velocity.dof_vector()
        out[2 * mesh.num_velocity_dofs :] = self.pressure.values
        return out

    def to_vector(self):
        return np.concatenate([self.core_vector(), [self.multiplier]])

    @classmethod
    def from_vector(cls, mesh, vec):
        nvd = mesh.num_velocity_dofs
        vel = VelocityFieldMini.from_dof_vector(mesh, vec[: 2 * nvd])
        pres = ScalarFieldP1(mesh, np.array(vec[2 * nvd : 2 * nvd + mesh.num_vertices]))
        mult = float(vec[-1]) if len(vec) == total_dofs(mesh) else 0.0
        return cls(vel, pres, mult)


@dataclass
class Trajectory:
    """Uniform-step sequence of flow states, states[n] at time n * dt."""

    dt: float
    states: list

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def horizon(self):
        return self.dt * (len(self.states) - 1)


@dataclass
class SaddleSystem:
    """Assembled saddle operator (with mean multiplier) and right-hand side."""

    mesh: StructuredMesh
    matrix: sp.csr_matrix
    rhs: np.ndarray
    dirichlet_dofs: np.ndarray | None = None


@dataclass
class SmallnessReport:
    c_P: float
    c_L: float
    lhs: float
    rhs: float
    holds: bool


def core_dofs(mesh):
    return 2 * mesh.num_velocity_dofs + mesh.num_vertices


def total_dofs(mesh):
    return core_dofs(mesh) + 1


def velocity_dirichlet_dofs(mesh):
    bv = mesh.boundary_vertices
    return np.concatenate([bv, mesh.num_velocity_dofs + bv])


def dirichlet_values(mesh, g_nodal):
    bv = mesh.boundary_vertices
    return np.concatenate([g_nodal[bv, 0], g_nodal[bv, 1]])


# ---------------------------------------------------------------------------
# element tensor caches (keyed on the mesh object)

_MESH_CACHE = {}


def _mesh_tables(mesh):
    key = id(mesh)
    tab = _MESH_CACHE.get(key)
    if tab is not None and tab["mesh"] is mesh:
        return tab
    lam, wq, psi = mesh.quad
    nvd = mesh.num_velocity_dofs
    nv = mesh.num_vertices
    nt = mesh.num_triangles
    vdofs = np.concatenate([mesh.triangles, nv + np.arange(nt)[:, None]], axis=1)
    vel_rows = np.repeat(vdofs, 4, axis=1).ravel()
    vel_cols = np.tile(vdofs, (1, 4)).ravel()
    S_el = _kernels.vel_stiffness(mesh.areas, mesh.grads, mesh.bubble_grads, wq)
    ones = np.ones((nt, lam.shape[0]))
    M_el = _kernels.vel_mass(mesh.areas, ones, psi, wq)
    D_el = _kernels.div_coupling(mesh.areas, mesh.grads, mesh.bubble_grads, lam, wq)
    div_rows = np.repeat(mesh.triangles, 4, axis=1).ravel()
    div_cols = np.tile(vdofs, (1, 3)).ravel()
    Dx = sp.coo_matrix(
        (D_el[:, :, :, 0].ravel(), (div_rows, div_cols)), shape=(nv, nvd)
    ).tocsr()
    Dy = sp.coo_matrix(
        (D_el[:, :, :, 1].ravel(), (div_rows, div_cols)), shape=(nv, nvd)
    ).tocsr()
    c_vec = _kernels.p1_load(mesh.areas, mesh.triangles, ones, lam, wq, nv)
    tab = {
        "mesh": mesh,
        "vdofs": vdofs,
        "vel_rows": vel_rows,
        "vel_cols": vel_cols,
        "S_el": S_el,
        "M_el": M_el,
        "Dx": Dx,
        "Dy": Dy,
        "c": c_vec,
        "S_mat": None,
        "M_mat": None,
        "D_parts": None,
    }
    _MESH_CACHE[key] = tab
    return tab


def _scalar_matrix(mesh, el):
    tab = _mesh_tables(mesh)
    nvd = mesh.num_velocity_dofs
    return sp.coo_matrix(
        (el.ravel(), (tab["vel_rows"], tab["vel_cols"])), shape=(nvd, nvd)
    ).tocsr()


def velocity_stiffness_matrix(mesh):
    tab = _mesh_tables(mesh)
    if tab["S_mat"] is None:
        tab["S_mat"] = _scalar_matrix(mesh, tab["S_el"])
    return tab["S_mat"]


def velocity_mass_matrix(mesh):
    tab = _mesh_tables(mesh)
    if tab["M_mat"] is None:
        tab["M_mat"] = _scalar_matrix(mesh, tab["M_el"])
    return tab["M_mat"]


def _div_parts(mesh):
    tab = _mesh_tables(mesh)
    if tab["D_parts"] is None:
        nv = mesh.num_vertices
        Dx, Dy = tab["Dx"], tab["Dy"]
        tab["D_parts"] = {
            "xv": Dx[:, :nv].tocsr(),
            "xb": Dx[:, nv:].tocsr(),
            "yv": Dy[:, :nv].tocsr(),
            "yb": Dy[:, nv:].tocsr(),
        }
    return tab["D_parts"]


def convection_matrix(mesh, advecting, mode="skew"):
    """Scalar-component convection matrix for a given advecting field."""
    if mode not in CONVECTION_MODES or mode == "none":
        raise ValueError(f"bad convection mode {mode!r}")
    lam, wq, psi = mesh.quad
    wvals = advecting.at_quad()
    C_el = _kernels.vel_convection(
        mesh.areas, mesh.grads, mesh.bubble_grads, wvals, psi, wq
    )
    C = _scalar_matrix(mesh, C_el)
    if mode == "standard":
        return C
    skew = 0.5 * (C - C.T)
    if mode == "adjoint":
        return (-skew).tocsr()
    return skew.tocsr()


def reaction_blocks(mesh, w):
    """Skew-form reaction blocks R[m][k] of v -> b_sk(v, w, .)."""
    lam, wq, psi = mesh.quad
    wvals = w.at_quad()
    wgrads = w.grad_at_quad()
    R_el = _kernels.grad_reaction_skew(
        mesh.areas, mesh.grads, mesh.bubble_grads, wvals, wgrads, psi, wq
    )
    return [[_scalar_matrix(mesh, R_el[:, m, k]) for k in range(2)] for m in range(2)]


# ---------------------------------------------------------------------------
# operator assembly


@dataclass
class VelocityBlocks:
    """Component blocks of the velocity operator: diagonal part shared by
    both components plus optional component-coupling reaction blocks."""

    mesh: StructuredMesh
    diag: sp.csr_matrix
    R: list | None = None

    def block(self, m, k):
        out = self.diag if m == k else None
        if self.R is not None:
            out = self.R[m][k] if out is None else out + self.R[m][k]
        return out


def velocity_blocks(
    mesh, mu, alpha_field, advecting=None, convection_mode="none", dt=None, reaction_field=None
):
    if convection_mode not in CONVECTION_MODES:
        raise ValueError(f"unknown convection mode {convection_mode!r}")
    if (advecting is None) != (convection_mode == "none"):
        raise ValueError("advecting field must be given iff convection_mode != 'none'")
    alpha_vals = alpha_field.values
    if np.min(alpha_vals) < -1e-14:
        raise InvalidCoefficientError(
            f"negative drag coefficient at node {int(np.argmin(alpha_vals))}"
        )
    lam, wq, psi = mesh.quad
    alpha_q = _kernels.scalar_at_quad(mesh.triangles, alpha_vals, lam)
    Ma_el = _kernels.vel_mass(mesh.areas, alpha_q, psi, wq)
    A = mu * velocity_stiffness_matrix(mesh) + _scalar_matrix(mesh, Ma_el)
    if dt is not None:
        A = A + (1.0 / dt) * velocity_mass_matrix(mesh)
    if advecting is not None:
        A = A + convection_matrix(mesh, advecting, convection_mode)
    R = reaction_blocks(mesh, reaction_field) if reaction_field is not None else None
    return VelocityBlocks(mesh, A.tocsr(), R)


def core_matrix(mesh, blocks):
    """Full operator over [ux, uy, p] (no mean-constraint row)."""
    d = _div_parts(mesh)
    tab = _mesh_tables(mesh)
    Dx, Dy = tab["Dx"], tab["Dy"]
    return sp.bmat(
        [
            [blocks.block(0, 0), blocks.block(0, 1), -Dx.T],
            [blocks.block(1, 0), blocks.block(1, 1), -Dy.T],
            [-Dx, -Dy, None],
        ],
        format="csr",
    )


def assemble_penalized_operator(
    mesh, mu, alpha_field, advecting=None, convection_mode="none", dt=None, reaction_field=None
):
    """Assemble the saddle operator with the zero-mean pressure multiplier.

    The velocity diagonal carries mu * stiffness + alpha-weighted mass,
    optionally 1/dt * mass for a time step, plus the requested convection
    block; ``reaction_field`` adds the component-coupling skew reaction
    blocks used by linearizations. Returns a SaddleSystem with a zero
    right-hand side; boundary conditions are applied separately.
    """
    blocks = velocity_blocks(
        mesh, mu, alpha_field, advecting, convection_mode, dt, reaction_field
    )
    tab = _mesh_tables(mesh)
    nv = mesh.num_vertices
    c_col = sp.csr_matrix(tab["c"].reshape(nv, 1))
    zero_v = sp.csr_matrix((mesh.num_velocity_dofs, 1))
    core = core_matrix(mesh, blocks)
    mat = sp.bmat(
        [
            [core, sp.vstack([zero_v, zero_v, c_col])],
            [sp.hstack([zero_v.T, zero_v.T, c_col.T]), None],
        ],
        format="csr",
    )
    return SaddleSystem(mesh, mat, np.zeros(total_dofs(mesh)))


def field_load(mesh, F):
    """Core load vector of a vector field: entry a = int F . basis_a dx."""
    vals = F.at_quad()
    return velocity_load_from_quad(mesh, vals)


def velocity_load_from_quad(mesh, vals):
    """Core load vector from velocity integrand values at quad points."""
    nv = mesh.num_vertices
    nvd = mesh.num_velocity_dofs
    lam, wq, psi = mesh.quad
    lv = _kernels.vel_load(mesh.areas, mesh.triangles, vals, psi, wq, nv)
    out = np.zeros(core_dofs(mesh))
    out[:nvd] = lv[:, 0]
    out[nvd : 2 * nvd] = lv[:, 1]
    return out


def apply_dirichlet(matrix, rhs, dofs, values):
    """Row/column elimination with right-hand-side lift.

    Returns the eliminated matrix (unit diagonal on constrained rows, the
    original sparsity retained as stored zeros) and the adjusted rhs.
    """
    n = matrix.shape[0]
    mask = np.zeros(n, dtype=bool)
    mask[dofs] = True
    g_ext = np.zeros(n)
    g_ext[dofs] = values
    rhs = rhs - matrix @ g_ext
    A = matrix.tocsr(copy=True)
    rows = np.repeat(np.arange(n), np.diff(A.indptr))
    kill = mask[rows] | mask[A.indices]
    A.data[kill] = 0.0
    A = A + sp.diags(mask.astype(float), format="csr")
    rhs = rhs.copy()
    rhs[mask] = g_ext[mask]
    return A, rhs


def lu_factor(matrix):
    try:
        return spla.splu(matrix.tocsc(), permc_spec="COLAMD")
    except RuntimeError as exc:  # pragma: no cover - depends on SuperLU message
        m = re.search(r"\d+", str(exc))
        raise SingularSystemError(str(exc), pivot=int(m.group()) if m else None) from exc


class FactorCache:
    """Direct solves that reuse a stale factorization via refinement.

    Along a time march the step matrix drifts slowly, so the previous
    factorization is an excellent solver for the current system: each
    solve is polished by iterative refinement until the true residual of
    the CURRENT matrix meets the certificate, and the cache refactorizes
    only when refinement stops contracting. Solutions are therefore exact
    direct solutions (to the certified residual) of the exact per-step
    systems; only the factorization work is amortized.
    """

    def __init__(self, target_rel=1e-11, hard_rel=1e-10, max_refine=8):
        self.lu = None
        self.target_rel = target_rel
        self.hard_rel = hard_rel
        self.max_refine = max_refine

    def _residual(self, A, x, b, trans):
        if trans == "N":
            return b - A @ x
        return b - A.T @ x

    def solve(self, A, b, trans="N"):
        if self.lu is None:
            self.lu = lu_factor(A)
        scale = 1.0 + np.linalg.norm(b)
        target = self.target_rel * scale
        x = self.lu.solve(b, trans=trans)
        r = self._residual(A, x, b, trans)
        res = np.linalg.norm(r)
        refreshed = False
        it = 0
        prev = np.inf
        while res > target:
            stalled = it >= self.max_refine or res > 0.5 * prev
            if stalled and not refreshed:
                self.lu = lu_factor(A)
                refreshed = True
                it = 0
                prev = np.inf
                x = self.lu.solve(b, trans=trans)
                r = self._residual(A, x, b, trans)
                res = np.linalg.norm(r)
                continue
            if stalled:
                break
            prev = res
            x = x + self.lu.solve(r, trans=trans)
            r = self._residual(A, x, b, trans)
            res = np.linalg.norm(r)
            it += 1
        if not res <= self.hard_rel * scale:
            raise SingularSystemError(
                f"refined solve residual too large: {res:g} (scale {scale:g})"
            )
        return x


def solve_linear(system):
    """Direct sparse solve of an assembled system, with a residual certificate."""
    lu = lu_factor(system.matrix)
    x = lu.solve(system.rhs)
    res = np.linalg.norm(system.matrix @ x - system.rhs)
    if not res <= 1e-10 * (1.0 + np.linalg.norm(system.rhs)):
        raise SingularSystemError(f"direct solve residual too large: {res:g}")
    return x


class CondensedSolver:
    """Exact solver for one core operator via bubble condensation.

    Bubble unknowns couple only inside their own triangle, so they are
    eliminated per element (2x2 block inverse); the reduced system over
    [vertex ux, vertex uy, p] is Dirichlet-eliminated, one pressure node is
    pinned to fix the constant, and the factorization solves both the
    operator and its transpose. Solutions are exact solutions of the core
    system (with the pinned-pressure gauge).
    """

    def __init__(self, mesh, blocks, dirichlet_vals):
        self.mesh = mesh
        nv = mesh.num_vertices
        nt = mesh.num_triangles
        nvd = mesh.num_velocity_dofs
        self.nv, self.nt, self.nvd = nv, nt, nvd
        d = _div_parts(mesh)

        parts = {}
        for m in range(2):
            for k in range(2):
                B = blocks.block(m, k)
                if B is None:
                    parts[m, k] = None
                    continue
                parts[m, k] = {
                    "vv": B[:nv, :nv],
                    "vb": B[:nv, nv:],
                    "bv": B[nv:, :nv],
                    "bb": B[nv:, nv:].diagonal(),
                }

        def pick(m, k, what, default=None):
            p = parts[m, k]
            return p[what] if p is not None else default

        zvv = None
        self.K_rr = sp.bmat(
            [
                [pick(0, 0, "vv"), pick(0, 1, "vv", zvv), -d["xv"].T],
                [pick(1, 0, "vv", zvv), pick(1, 1, "vv"), -d["yv"].T],
                [-d["xv"], -d["yv"], None],
            ],
            format="csr",
        )
        zvb = sp.csr_matrix((nv, nt))
        self.K_rb = sp.bmat(
            [
                [pick(0, 0, "vb"), pick(0, 1, "vb", zvb)],
                [pick(1, 0, "vb", zvb), pick(1, 1, "vb")],
                [-d["xb"], -d["yb"]],
            ],
            format="csr",
        )
        self.K_br = sp.bmat(
            [
                [pick(0, 0, "bv"), pick(0, 1, "bv", zvb.T), -d["xb"].T],
                [pick(1, 0, "bv", zvb.T), pick(1, 1, "bv"), -d["yb"].T],
            ],
            format="csr",
        )
        zb = np.zeros(nt)
        axx = pick(0, 0, "bb")
        axy = pick(0, 1, "bb", zb)
        ayx = pick(1, 0, "bb", zb)
        ayy = pick(1, 1, "bb")
        det = axx * ayy - axy * ayx
        self.Binv = sp.bmat(
            [
                [sp.diags(ayy / det), sp.diags(-axy / det)],
                [sp.diags(-ayx / det), sp.diags(axx / det)],
            ],
            format="csr",
        )

        S = (self.K_rr - self.K_rb @ (self.Binv @ self.K_br)).tocsr()
        bv_idx = mesh.boundary_vertices
        self.pin = 2 * nv  # first pressure dof fixes the constant
        self.dir_reduced = np.concatenate([bv_idx, nv + bv_idx, [self.pin]])
        self.dir_vals = np.concatenate([dirichlet_vals, [0.0]])
        self.S_elim, self._lift_rhs = apply_dirichlet(
            S, np.zeros(3 * nv), self.dir_reduced, self.dir_vals
        )
        self._lu = None
        self._csc = None
        # adjoint lift (homogeneous data): only the row/col zeroing matters
        self._dir_mask = np.zeros(3 * nv, dtype=bool)
        self._dir_mask[self.dir_reduced] = True

    @property
    def lu(self):
        if self._lu is None:
            self._lu = lu_factor(self.S_elim)
        return self._lu

    @property
    def S_csc(self):
        if self._csc is None:
            self._csc = self.S_elim.tocsc()
        return self._csc

    def _split(self, core_vec):
        nv, nt, nvd = self.nv, self.nt, self.nvd
        r = np.concatenate(
            [core_vec[:nv], core_vec[nvd : nvd + nv], core_vec[2 * nvd :]]
        )
        b = np.concatenate([core_vec[nv:nvd], core_vec[nvd + nv : 2 * nvd]])
        return r, b

    def _merge(self, r, b):
        nv, nt, nvd = self.nv, self.nt, self.nvd
        out = np.empty(2 * nvd + nv)
        out[:nv] = r[:nv]
        out[nv:nvd] = b[:nt]
        out[nvd : nvd + nv] = r[nv : 2 * nv]
        out[nvd + nv : 2 * nvd] = b[nt:]
        out[2 * nvd :] = r[2 * nv :]
        return out

    def solve(self, rhs_core, trans="N", cache=None):
        """Solve the core system (or its transpose) for a full core rhs.

        For the forward solve the stored Dirichlet values are imposed; the
        transposed solve uses homogeneous Dirichlet data (adjoint states
        vanish on the boundary). With a FactorCache the reduced solve
        reuses the cache's factorization through certified refinement.
        """
        rhs_r, rhs_b = self._split(rhs_core)
        if trans == "N":
            red = rhs_r - self.K_rb @ (self.Binv @ rhs_b)
            red[self._dir_mask] = 0.0
            red = red + self._lift_rhs
            if cache is None:
                x_r = self.lu.solve(red)
            else:
                x_r = cache.solve(self.S_csc, red)
            x_b = self.Binv @ (rhs_b - self.K_br @ x_r)
        else:
            red = rhs_r - self.K_br.T @ (self.Binv.T @ rhs_b)
            red[self._dir_mask] = 0.0
            if cache is None:
                x_r = self.lu.solve(red, trans="T")
            else:
                x_r = cache.solve(self.S_csc, red, trans="T")
            x_b = self.Binv.T @ (rhs_b - self.K_rb.T @ x_r)
        return self._merge(x_r, x_b)


def check_smallness(data, c_P=None, c_L=None):
    """Advisory uniqueness check: 2 c_P^2 c_L ||f_s|| < mu^2."""
    c_P = data.c_P if c_P is None else c_P
    c_L = data.c_L if c_L is None else c_L
    if c_P <= 0 or c_L <= 0:
        raise ValueError("constants must be positive")
    fnorm = data.f_stationary.l2_norm() if data.f_stationary is not None else 0.0
    lhs = 2.0 * c_P**2 * c_L * fnorm
    rhs = data.mu**2
    return SmallnessReport(c_P, c_L, lhs, rhs, lhs < rhs)


def _make_state(mesh, core_vec):
    """Wrap a core solution; pressure is shifted to exact zero mean."""
    state = FlowState.from_vector(mesh, core_vec)
    tab = _mesh_tables(mesh)
    area = tab["c"].sum()
    state.pressure.values -= (tab["c"] @ state.pressure.values) / area
    return state


def pressure_mean(state):
    mesh = state.pressure.mesh
    tab = _mesh_tables(mesh)
    return float(tab["c"] @ state.pressure.values)


# ---------------------------------------------------------------------------
# stationary solvers


def velocity_vnorm(mesh, dof_vec):
    """Gradient (V-) seminorm of a velocity dof vector."""
    S = velocity_stiffness_matrix(mesh)
    nvd = mesh.num_velocity_dofs
    ux = dof_vec[:nvd]
    uy = dof_vec[nvd : 2 * nvd]
    val = ux @ (S @ ux) + uy @ (S @ uy)
    return math.sqrt(max(val, 0.0))


def solve_stationary(
    mesh, alpha_field, data, newton_tol=1e-10, max_newton=25, initial=None, cache=None
):
    """Newton's method for the penalized stationary Navier-Stokes system.

    Terminates when the V-norm of the Newton update (the difference of two
    consecutive approximations) drops below ``newton_tol`` or the residual
    does; raises NonconvergenceError with the residual history otherwise.
    The result carries the history as ``state.residual_history``. A shared
    FactorCache lets warm-started re-solves reuse factorizations.
    """
    report = check_smallness(data)
    if not report.holds:
        warnings.warn(
            "stationary uniqueness bound violated "
            f"(2 c_P^2 c_L ||f_s|| = {report.lhs:g} >= mu^2 = {report.rhs:g})",
            RuntimeWarning,
            stacklevel=2,
        )
    vals = dirichlet_values(mesh, data.g_stationary)
    f_load = (
        field_load(mesh, data.f_stationary)
        if data.f_stationary is not None
        else np.zeros(core_dofs(mesh))
    )
    nvd = mesh.num_velocity_dofs
    cache = cache if cache is not None else FactorCache()

    if initial is None:
        blocks = velocity_blocks(mesh, data.mu, alpha_field)
        solver = CondensedSolver(mesh, blocks, vals)
        z = solver.solve(f_load, cache=cache)
    else:
        z = initial.core_vector()

    residuals = []
    scale = 1.0 + np.linalg.norm(f_load)
    for it in range(max_newton + 1):
        vel = VelocityFieldMini.from_dof_vector(mesh, z[: 2 * nvd])
        blocks = velocity_blocks(
            mesh, data.mu, alpha_field, advecting=vel, convection_mode="skew"
        )
        K = core_matrix(mesh, blocks)
        res_vec = f_load - K @ z
        _mask_residual(mesh, res_vec)
        res = float(np.linalg.norm(res_vec))
        residuals.append(res)
        if res <= newton_tol * scale:
            break
        jac_blocks = velocity_blocks(
            mesh,
            data.mu,
            alpha_field,
            advecting=vel,
            convection_mode="skew",
            reaction_field=vel,
        )
        solver = CondensedSolver(mesh, jac_blocks, np.zeros_like(vals))
        delta = solver.solve(res_vec, cache=cache)
        z = z + delta
        if velocity_vnorm(mesh, delta[: 2 * nvd]) <= newton_tol:
            vel = VelocityFieldMini.from_dof_vector(mesh, z[: 2 * nvd])
            blocks = velocity_blocks(
                mesh, data.mu, alpha_field, advecting=vel, convection_mode="skew"
            )
            res_vec = f_load - core_matrix(mesh, blocks) @ z
            _mask_residual(mesh, res_vec)
            residuals.append(float(np.linalg.norm(res_vec)))
            break
    else:
        raise NonconvergenceError(
            f"Newton did not converge in {max_newton} iterations", residuals
        )
    state = _make_state(mesh, z)
    state.residual_history = residuals
    return state


def _mask_residual(mesh, res_vec):
    """Zero residual entries that are constraints, not equations."""
    nvd = mesh.num_velocity_dofs
    bv = mesh.boundary_vertices
    res_vec[bv] = 0.0
    res_vec[nvd + bv] = 0.0
    res_vec[2 * nvd] = 0.0  # pressure gauge row


def _linearized_solver(mesh, mu, alpha_field, v1, v2):
    blocks = velocity_blocks(
        mesh, mu, alpha_field, advecting=v2, convection_mode="skew", reaction_field=v1
    )
    nbv = mesh.boundary_vertices.shape[0]
    return CondensedSolver(mesh, blocks, np.zeros(2 * nbv))


def solve_stationary_linearized(mesh, alpha_field, mu, v1, v2, F_s, cache=None):
    """Solve the linearized stationary system with homogeneous Dirichlet data.

    ``F_s`` may be a VelocityFieldMini source or a preassembled core load.
    """
    solver = _linearized_solver(mesh, mu, alpha_field, v1, v2)
    rhs = F_s if isinstance(F_s, np.ndarray) else field_load(mesh, F_s)
    return _make_state(mesh, solver.solve(rhs, cache=cache))


def solve_stationary_adjoint(mesh, alpha_field, mu, v, G_s, cache=None):
    """Discrete transpose of the linearized solve at v1 = v2 = v."""
    solver = _linearized_solver(mesh, mu, alpha_field, v, v)
    rhs = G_s if isinstance(G_s, np.ndarray) else field_load(mesh, G_s)
    return _make_state(mesh, solver.solve(rhs, trans="T", cache=cache))


# ---------------------------------------------------------------------------
# transient solvers


def num_steps(T, dt):
    n = round(T / dt)
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"horizon T={T} is not an integer multiple of dt={dt}")
    return int(n)


def _transient_base(mesh, mu, alpha_field, dt):
    """Convection-free part of the step operator (fixed along the march)."""
    blocks = velocity_blocks(mesh, mu, alpha_field, dt=dt)
    return blocks.diag


def _step_blocks(mesh, base_diag, advecting):
    C = convection_matrix(mesh, advecting, "skew")
    return VelocityBlocks(mesh, (base_diag + C).tocsr())


def march_transient(mesh, alpha_field, data, T, dt):
    """Generate (n, state) along the semi-implicit march, starting at n=0.

    Each step solves one saddle system whose advecting field is the
    previous velocity; the Dirichlet data is ramped.
    """
    n_steps = num_steps(T, dt)
    g_b = dirichlet_values(mesh, data.g_stationary)
    M = velocity_mass_matrix(mesh)
    nvd = mesh.num_velocity_dofs
    base = _transient_base(mesh, data.mu, alpha_field, dt)
    cache = FactorCache()
    state = data.initial_state()
    yield 0, state
    z_prev = state.core_vector()
    for n in range(1, n_steps + 1):
        t_n = n * dt
        vel_prev = VelocityFieldMini.from_dof_vector(mesh, z_prev[: 2 * nvd])
        blocks = _step_blocks(mesh, base, vel_prev)
        rhs = np.zeros(core_dofs(mesh))
        rhs[:nvd] = (M @ z_prev[:nvd]) / dt
        rhs[nvd : 2 * nvd] = (M @ z_prev[nvd : 2 * nvd]) / dt
        if data.f_transient is not None:
            rhs = rhs + field_load(mesh, data.f_transient(t_n))
        solver = CondensedSolver(mesh, blocks, data.ramp(t_n) * g_b)
        z_prev = solver.solve(rhs, cache=cache)
        state = _make_state(mesh, z_prev)
        yield n, state


def solve_transient(mesh, alpha_field, data, T, dt):
    """March to horizon T and store every state (desk-scale problems)."""
    states = [state for _, state in march_transient(mesh, alpha_field, data, T, dt)]
    return Trajectory(dt, states)


def _apply_reaction_transposed(mesh, R, hat, nvd):
    hx = hat[:nvd]
    hy = hat[nvd : 2 * nvd]
    out = np.zeros_like(hat)
    out[:nvd] = R[0][0].T @ hx + R[1][0].T @ hy
    out[nvd : 2 * nvd] = R[0][1].T @ hx + R[1][1].T @ hy
    return out


def transient_adjoint_generic(mesh, alpha_field, data, traj, sources):
    """Exact discrete adjoint of the semi-implicit recursion.

    ``sources[n - 1]`` is the core load vector of the adjoint source at
    step n (n = 1..N). Returns [hat_u^1, ..., hat_u^N]; the recursion runs
    backward with a zero state beyond the final step, so the last adjoint
    state is driven only by the last source. Step matrices are rebuilt
    exactly as in the forward march and solved transposed; the
    lagged-convection cross term enters through the skew reaction blocks
    at the next forward velocity.
    """
    n_steps = len(traj.states) - 1
    if len(sources) != n_steps:
        raise ValueError("need one source per time step")
    dt = traj.dt
    M = velocity_mass_matrix(mesh)
    nvd = mesh.num_velocity_dofs
    base = _transient_base(mesh, data.mu, alpha_field, dt)
    nbv = mesh.boundary_vertices.shape[0]
    zero_bc = np.zeros(2 * nbv)
    cache = FactorCache()
    adj = [None] * n_steps
    hat_next = None
    for n in range(n_steps, 0, -1):
        rhs = sources[n - 1].copy()
        if hat_next is not None:
            rhs[:nvd] += (M @ hat_next[:nvd]) / dt
            rhs[nvd : 2 * nvd] += (M @ hat_next[nvd : 2 * nvd]) / dt
            R = reaction_blocks(mesh, traj.states[n + 1].velocity)
            rhs -= _apply_reaction_transposed(mesh, R, hat_next, nvd)
        blocks = _step_blocks(mesh, base, traj.states[n - 1].velocity)
        solver = CondensedSolver(mesh, blocks, zero_bc)
        hat = solver.solve(rhs, trans="T", cache=cache)
        adj[n - 1] = _make_state(mesh, hat)
        hat_next = hat
    return adj


def solve_transient_linearized(mesh, alpha_field, data, traj, sources):
    """Tangent dynamics of the semi-implicit recursion (homogeneous data).

    ``sources[n - 1]`` is the core load at step n. Returns
    [tilde_u^1, ..., tilde_u^N]; the initial perturbation is zero. Used to
    certify that the adjoint is the exact transpose of this map.
    """
    n_steps = len(traj.states) - 1
    if len(sources) != n_steps:
        raise ValueError("need one source per time step")
    dt = traj.dt
    M = velocity_mass_matrix(mesh)
    nvd = mesh.num_velocity_dofs
    base = _transient_base(mesh, data.mu, alpha_field, dt)
    nbv = mesh.boundary_vertices.shape[0]
    zero_bc = np.zeros(2 * nbv)
    cache = FactorCache()
    out = [None] * n_steps
    tilde = np.zeros(core_dofs(mesh))
    for n in range(1, n_steps + 1):
        rhs = sources[n - 1].copy()
        rhs[:nvd] += (M @ tilde[:nvd]) / dt
        rhs[nvd : 2 * nvd] += (M @ tilde[nvd : 2 * nvd]) / dt
        R = reaction_blocks(mesh, traj.states[n].velocity)
        tx = tilde[:nvd]
        ty = tilde[nvd : 2 * nvd]
        rhs[:nvd] -= R[0][0] @ tx + R[0][1] @ ty
        rhs[nvd : 2 * nvd] -= R[1][0] @ tx + R[1][1] @ ty
        blocks = _step_blocks(mesh, base, traj.states[n - 1].velocity)
        solver = CondensedSolver(mesh, blocks, zero_bc)
        tilde = solver.solve(rhs, cache=cache)
        out[n - 1] = _make_state(mesh, tilde)
    return out
