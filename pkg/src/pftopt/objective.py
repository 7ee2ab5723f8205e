"""Tracking objectives, their componentwise breakdown, and reduced gradients.

The stationary objective is tracking + porous penalty + gamma * GL energy;
the transient one averages the first two terms over the horizon with the
right-endpoint rule (step 0 excluded), matching the implicit time steps, so
the discrete adjoint gradient is exact for the discrete objective. The
finite-difference directional derivative lives here as the independent
oracle for that exactness.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels, flow
from .errors import InvalidCoefficientError
from .mesh import ScalarFieldP1, StructuredMesh, VelocityFieldMini
from .phasefield import (
    GinzburgLandauParams,
    InterpolationParams,
    PhaseField,
    gl_derivative,
    gl_energy,
    interpolation_fields,
)


@dataclass
class ObjectiveBreakdown:
    total: float
    tracking: float
    porous_penalty: float
    regularization: float

    @classmethod
    def from_components(cls, tracking, porous, regularization):
        return cls(tracking + porous + regularization, tracking, porous, regularization)


@dataclass
class ObservationMask:
    """Per-triangle 0/1 indicator of the observation domain."""

    mesh: StructuredMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.num_triangles,):
            raise ValueError("mask needs one value per triangle")
        if not np.all((self.values == 0.0) | (self.values == 1.0)):
            raise InvalidCoefficientError("mask values must be 0 or 1")

    @classmethod
    def full(cls, mesh):
        return cls(mesh, np.ones(mesh.num_triangles))

    @classmethod
    def from_rect(cls, mesh, x0, y0, x1, y1):
        """Triangles whose barycenter lies in the closed rectangle."""
        bc = mesh.vertices[mesh.triangles].mean(axis=1)
        inside = (bc[:, 0] >= x0) & (bc[:, 0] <= x1) & (bc[:, 1] >= y0) & (bc[:, 1] <= y1)
        return cls(mesh, inside.astype(float))


@dataclass
class ProblemSetup:
    """Everything the reduced objectives need besides the design variable."""

    mesh: StructuredMesh
    data: flow.FlowProblemData
    interp: InterpolationParams
    gl: GinzburgLandauParams
    newton_tol: float = 1e-11
    max_newton: int = 30

    def alpha_field(self, phi, target_mode=False):
        alpha, _ = interpolation_fields(phi, self.interp, target_mode)
        return alpha


def solve_state(phi, setup, target_mode=False, initial=None, cache=None):
    """Stationary state at the drag coefficient induced by phi."""
    return flow.solve_stationary(
        setup.mesh,
        setup.alpha_field(phi, target_mode),
        setup.data,
        newton_tol=setup.newton_tol,
        max_newton=setup.max_newton,
        initial=initial,
        cache=cache,
    )


def make_target_velocity(mesh, setup, phi_d, cache_path=None):
    """Target velocity: stationary solve at phi_d with the stiffer drag.

    Uses the target-mode interpolation so the obstacle is almost
    impermeable. When ``cache_path`` is given the result is persisted (or
    loaded verbatim when the file exists).
    """
    if cache_path is not None:
        try:
            return read_velocity_csv(cache_path, mesh)
        except FileNotFoundError:
            pass
    state = solve_state(phi_d, setup, target_mode=True)
    u_d = state.velocity
    if cache_path is not None:
        write_velocity_csv(cache_path, state)
    return u_d


def _tracking_porous_values(phi_q, u_q, ud_q, mask_vals, beta_q):
    diff = u_q - ud_q
    track = 0.5 * (phi_q + 1.0) * (diff[:, :, 0] ** 2 + diff[:, :, 1] ** 2)
    track *= mask_vals[:, None]
    porous = beta_q * (u_q[:, :, 0] ** 2 + u_q[:, :, 1] ** 2)
    return track, porous


def _integrals(mesh, track_vals, porous_vals):
    _, wq, _ = mesh.quad
    tracking = _kernels.integrate(mesh.areas, track_vals, wq)
    porous = _kernels.integrate(mesh.areas, porous_vals, wq)
    return tracking, porous


def eval_stationary_objective(phi, u_d, mask, setup, state=None):
    """Breakdown of the stationary objective at phi (solves unless given)."""
    if state is None:
        state = solve_state(phi, setup)
    mesh = setup.mesh
    phi_q = phi.at_quad()
    beta_q = setup.interp.beta_slope() * (1.0 - phi_q)
    track_vals, porous_vals = _tracking_porous_values(
        phi_q, state.velocity.at_quad(), u_d.at_quad(), mask.values, beta_q
    )
    tracking, porous = _integrals(mesh, track_vals, porous_vals)
    reg = setup.gl.gamma * gl_energy(phi, setup.gl)
    return ObjectiveBreakdown.from_components(tracking, porous, reg)


def eval_transient_objective(phi, u_d, mask, setup, T, dt):
    """Time-averaged transient objective (right-endpoint rule, step 0 excluded)."""
    breakdown, _ = transient_objective_and_final(phi, u_d, mask, setup, T, dt)
    return breakdown


def transient_objective_and_final(phi, u_d, mask, setup, T, dt):
    """Accumulate the transient breakdown along the march; keep the final state."""
    mesh = setup.mesh
    alpha = setup.alpha_field(phi)
    phi_q = phi.at_quad()
    beta_q = setup.interp.beta_slope() * (1.0 - phi_q)
    ud_q = u_d.at_quad()
    tracking = 0.0
    porous = 0.0
    final = None
    for n, state in flow.march_transient(mesh, alpha, setup.data, T, dt):
        final = state
        if n == 0:
            continue
        track_vals, porous_vals = _tracking_porous_values(
            phi_q, state.velocity.at_quad(), ud_q, mask.values, beta_q
        )
        tr, po = _integrals(mesh, track_vals, porous_vals)
        tracking += tr
        porous += po
    tracking *= dt / T
    porous *= dt / T
    reg = setup.gl.gamma * gl_energy(phi, setup.gl)
    return ObjectiveBreakdown.from_components(tracking, porous, reg), final


def _adjoint_source_quad(phi_q, u_q, ud_q, mask_vals, beta_q):
    """Quadrature values of (phi + 1)(u - u_d) chi + 2 beta u."""
    src = (phi_q + 1.0)[:, :, None] * (u_q - ud_q) * mask_vals[:, None, None]
    src += 2.0 * beta_q[:, :, None] * u_q
    return src


def _gradient_pieces(mesh, setup, phi_q, mask_vals, u_field, ud_q, hat_field):
    """Nodal loads of the design derivative integrand at one state/adjoint pair."""
    lam, wq, _ = mesh.quad
    u_q = u_field.at_quad()
    diff = u_q - ud_q
    beta_prime = setup.interp.beta_prime()
    alpha_prime = setup.interp.alpha_prime()
    vals = 0.5 * mask_vals[:, None] * (diff[:, :, 0] ** 2 + diff[:, :, 1] ** 2)
    vals += beta_prime * (u_q[:, :, 0] ** 2 + u_q[:, :, 1] ** 2)
    hat_q = hat_field.at_quad()
    vals -= alpha_prime * (u_q[:, :, 0] * hat_q[:, :, 0] + u_q[:, :, 1] * hat_q[:, :, 1])
    return _kernels.p1_load(mesh.areas, mesh.triangles, vals, lam, wq, mesh.num_vertices)


def reduced_gradient_stationary(phi, u_d, mask, setup, state=None, cache=None):
    """Exact derivative of the discrete stationary objective wrt nodal phi."""
    mesh = setup.mesh
    if state is None:
        state = solve_state(phi, setup, cache=cache)
    phi_q = phi.at_quad()
    beta_q = setup.interp.beta_slope() * (1.0 - phi_q)
    ud_q = u_d.at_quad()
    src = _adjoint_source_quad(phi_q, state.velocity.at_quad(), ud_q, mask.values, beta_q)
    g_load = flow.velocity_load_from_quad(mesh, src)
    alpha = setup.alpha_field(phi)
    hat = flow.solve_stationary_adjoint(
        mesh, alpha, setup.data.mu, state.velocity, g_load, cache=cache
    )
    grad = gl_derivative(phi, setup.gl)
    grad += _gradient_pieces(mesh, setup, phi_q, mask.values, state.velocity, ud_q, hat.velocity)
    return grad


def solve_transient_adjoint(phi, u_d, mask, setup, traj):
    """Adjoint trajectory for the transient tracking objective.

    Sources are (phi + 1)(u^n - u_d) chi + 2 beta(phi) u^n at each step;
    the recursion runs backward from the final step and is the exact
    transpose of the semi-implicit steps. The returned list is in forward
    index order: element n-1 is the adjoint at step n.
    """
    mesh = setup.mesh
    phi_q = phi.at_quad()
    beta_q = setup.interp.beta_slope() * (1.0 - phi_q)
    ud_q = u_d.at_quad()
    sources = []
    for state in traj.states[1:]:
        src = _adjoint_source_quad(phi_q, state.velocity.at_quad(), ud_q, mask.values, beta_q)
        sources.append(flow.velocity_load_from_quad(mesh, src))
    alpha = setup.alpha_field(phi)
    return flow.transient_adjoint_generic(mesh, alpha, setup.data, traj, sources)


def reduced_gradient_transient(phi, u_d, mask, setup, T, dt, traj=None):
    """Exact derivative of the discrete transient objective wrt nodal phi."""
    mesh = setup.mesh
    if traj is None:
        traj = flow.solve_transient(mesh, setup.alpha_field(phi), setup.data, T, dt)
    adjoint = solve_transient_adjoint(phi, u_d, mask, setup, traj)
    phi_q = phi.at_quad()
    ud_q = u_d.at_quad()
    acc = np.zeros(mesh.num_vertices)
    for state, hat in zip(traj.states[1:], adjoint):
        acc += _gradient_pieces(
            mesh, setup, phi_q, mask.values, state.velocity, ud_q, hat.velocity
        )
    grad = gl_derivative(phi, setup.gl)
    grad += (dt / T) * acc
    return grad


def fd_directional_derivative(evaluator, phi, dphi, h):
    """Central finite difference (J(phi + h dphi) - J(phi - h dphi)) / (2h)."""
    dphi = np.asarray(dphi, dtype=float)
    if np.all(dphi == 0.0):
        return 0.0
    mesh = phi.mesh
    for sign in (+1.0, -1.0):
        vals = phi.values + sign * h * dphi
        if np.max(np.abs(vals)) > 1.0 + 1e-12:
            raise ValueError("perturbed phase field leaves the admissible box")
    plus = evaluator(PhaseField(mesh, np.clip(phi.values + h * dphi, -1, 1)))
    minus = evaluator(PhaseField(mesh, np.clip(phi.values - h * dphi, -1, 1)))
    return (plus - minus) / (2.0 * h)


class StationaryProvider:
    """Objective/gradient pair sharing one Newton solve per design.

    The last solved state doubles as the warm start for the next solve,
    which keeps Newton at one or two steps along an optimization run.
    """

    def __init__(self, setup, u_d, mask):
        self.setup = setup
        self.u_d = u_d
        self.mask = mask
        self._key = None
        self._state = None
        self._warm = None
        self._cache = flow.FactorCache()

    def _solve(self, phi):
        key = phi.values.tobytes()
        if key != self._key:
            self._state = solve_state(phi, self.setup, initial=self._warm, cache=self._cache)
            self._warm = self._state
            self._key = key
        return self._state

    def objective(self, phi):
        return eval_stationary_objective(phi, self.u_d, self.mask, self.setup, state=self._solve(phi))

    def gradient(self, phi):
        return reduced_gradient_stationary(
            phi, self.u_d, self.mask, self.setup, state=self._solve(phi), cache=self._cache
        )


class TransientProvider:
    """Objective/gradient pair sharing one stored trajectory per design."""

    def __init__(self, setup, u_d, mask, T, dt):
        self.setup = setup
        self.u_d = u_d
        self.mask = mask
        self.T = T
        self.dt = dt
        self._key = None
        self._traj = None

    def _solve(self, phi):
        key = phi.values.tobytes()
        if key != self._key:
            self._traj = flow.solve_transient(
                self.setup.mesh, self.setup.alpha_field(phi), self.setup.data, self.T, self.dt
            )
            self._key = key
        return self._traj

    def objective(self, phi):
        mesh = self.setup.mesh
        traj = self._solve(phi)
        phi_q = phi.at_quad()
        beta_q = self.setup.interp.beta_slope() * (1.0 - phi_q)
        ud_q = self.u_d.at_quad()
        tracking = 0.0
        porous = 0.0
        for state in traj.states[1:]:
            track_vals, porous_vals = _tracking_porous_values(
                phi_q, state.velocity.at_quad(), ud_q, self.mask.values, beta_q
            )
            tr, po = _integrals(mesh, track_vals, porous_vals)
            tracking += tr
            porous += po
        tracking *= self.dt / self.T
        porous *= self.dt / self.T
        reg = self.setup.gl.gamma * gl_energy(phi, self.setup.gl)
        return ObjectiveBreakdown.from_components(tracking, porous, reg)

    def gradient(self, phi):
        return reduced_gradient_transient(
            phi, self.u_d, self.mask, self.setup, self.T, self.dt, traj=self._solve(phi)
        )


def mean_speed(u_field, region_vals):
    """Mean |u| over the sub-region marked per triangle (quadrature mean)."""
    mesh = u_field.mesh
    _, wq, _ = mesh.quad
    u_q = u_field.at_quad()
    speed = np.sqrt(u_q[:, :, 0] ** 2 + u_q[:, :, 1] ** 2)
    num = _kernels.integrate(mesh.areas, speed * region_vals[:, None], wq)
    den = float((mesh.areas * region_vals).sum())
    if den == 0.0:
        raise ValueError("empty region")
    return num / den


# ---------------------------------------------------------------------------
# velocity-state CSV cache (exact round trip via 17 significant digits)


def write_velocity_csv(path, state, comment_lines=()):
    mesh = state.velocity.mesh
    with open(path, "w") as fh:
        for line in comment_lines:
            fh.write(f"# {line}\n")
        fh.write("field,index,value\n")
        for name, arr in (
            ("ux", state.velocity.nodal[:, 0]),
            ("uy", state.velocity.nodal[:, 1]),
            ("bx", state.velocity.bubble[:, 0]),
            ("by", state.velocity.bubble[:, 1]),
            ("p", state.pressure.values),
        ):
            for i, v in enumerate(arr):
                fh.write(f"{name},{i},{v:.17g}\n")
        fh.write(f"m,0,{state.multiplier:.17g}\n")


def read_velocity_csv(path, mesh):
    nodal = np.zeros((mesh.num_vertices, 2))
    bubble = np.zeros((mesh.num_triangles, 2))
    pressure = np.zeros(mesh.num_vertices)
    mult = 0.0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("field,"):
                continue
            name, idx, val = line.split(",")
            i = int(idx)
            v = float(val)
            if name == "ux":
                nodal[i, 0] = v
            elif name == "uy":
                nodal[i, 1] = v
            elif name == "bx":
                bubble[i, 0] = v
            elif name == "by":
                bubble[i, 1] = v
            elif name == "p":
                pressure[i] = v
            elif name == "m":
                mult = v
            else:
                raise ValueError(f"unknown field {name!r} in {path}")
    state = flow.FlowState(
        VelocityFieldMini(mesh, nodal, bubble), ScalarFieldP1(mesh, pressure), mult
    )
    return state.velocity
