"""Phase-field design variable, interpolation coefficients, and regularizer.

The design function phi lives in the admissible box |phi| <= 1: +1 marks
fluid, -1 the porous obstacle. The porous drag coefficient and the velocity
penalty weight interpolate affinely between those states and vanish at +1.
The regularizer is the Ginzburg-Landau energy with the double-obstacle
potential, whose indicator part is enforced by the optimizer's bounds, not
here.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .mesh import ScalarFieldP1, StructuredMesh

ADMISSIBLE_TOL = 1e-12


@dataclass
class PhaseField:
    """P1 nodal design function with every value in [-1, 1]."""

    mesh: StructuredMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.num_vertices,):
            raise ValueError(f"bad phase-field shape {self.values.shape}")
        if np.max(np.abs(self.values)) > 1.0 + ADMISSIBLE_TOL:
            raise ValueError("phase-field values exceed the [-1, 1] bound")
        np.clip(self.values, -1.0, 1.0, out=self.values)

    @classmethod
    def constant(cls, mesh, value):
        return cls(mesh, np.full(mesh.num_vertices, float(value)))

    def as_scalar_field(self):
        return ScalarFieldP1(self.mesh, self.values)

    def at_quad(self):
        lam, _, _ = self.mesh.quad
        return _kernels.scalar_at_quad(self.mesh.triangles, self.values, lam)


@dataclass
class InterpolationParams:
    """Coefficients of the porous-media interpolation.

    alpha(phi) = s_alpha * alpha_bar / (2 eps) * (1 - phi); in target mode
    the prefactor becomes 2 * s_target, i.e. s_target * alpha_bar / eps.
    beta(phi) = s_beta * alpha_bar / (2 eps) * (1 - phi). Both vanish at
    phi = 1. The derivatives wrt phi are the spatial constants
    ``alpha_prime`` and ``beta_prime``.
    """

    alpha_bar: float = 0.1
    eps: float = 0.0075
    alpha_scale: float = 100.0
    beta_scale: float = 1.0
    target_scale: float = 500.0

    def __post_init__(self):
        for name in ("alpha_bar", "eps", "alpha_scale", "beta_scale", "target_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def alpha_slope(self, target_mode=False):
        s = 2.0 * self.target_scale if target_mode else self.alpha_scale
        return s * self.alpha_bar / (2.0 * self.eps)

    def beta_slope(self):
        return self.beta_scale * self.alpha_bar / (2.0 * self.eps)

    def alpha_of(self, phi_vals, target_mode=False):
        return self.alpha_slope(target_mode) * (1.0 - phi_vals)

    def beta_of(self, phi_vals):
        return self.beta_slope() * (1.0 - phi_vals)

    def alpha_prime(self, target_mode=False):
        """d alpha / d phi (constant in space)."""
        return -self.alpha_slope(target_mode)

    def beta_prime(self):
        """d beta / d phi (constant in space)."""
        return -self.beta_slope()


@dataclass
class GinzburgLandauParams:
    eps: float
    gamma: float
    c0: float = field(default=math.pi / 2.0, init=False)

    def __post_init__(self):
        if self.eps <= 0 or self.gamma <= 0:
            raise ValueError("eps and gamma must be positive")


def clamp_to_admissible(mesh, values):
    """Clamp nodal values into [-1, 1] and wrap them as a PhaseField."""
    vals = np.clip(np.asarray(values, dtype=float), -1.0, 1.0)
    return PhaseField(mesh, vals)


def interpolation_fields(phi, params, target_mode=False):
    """Nodal drag coefficient alpha(phi) and penalty weight beta(phi).

    Both interpolations are affine in phi, so the nodal fields interpolate
    to exactly the quadrature-point values the assembly uses.
    """
    alpha = ScalarFieldP1(phi.mesh, params.alpha_of(phi.values, target_mode))
    beta = ScalarFieldP1(phi.mesh, params.beta_of(phi.values))
    return alpha, beta


def gl_energy(phi, params):
    """Ginzburg-Landau energy (without the gamma weight).

    (1/(2 c0)) * int (eps/2)|grad phi|^2 + (1/eps) * (1 - phi^2)/2 dx,
    evaluated with the package quadrature rule from the P1 interpolant.
    """
    mesh = phi.mesh
    lam, wq, _ = mesh.quad
    phi_q = phi.at_quad()
    pot = 0.5 * (1.0 - phi_q**2)
    pot_int = _kernels.integrate(mesh.areas, pot, wq)
    K3 = _kernels.p1_stiffness(mesh.areas, mesh.grads)
    loc = phi.values[mesh.triangles]
    grad_int = float(np.einsum("tij,ti,tj->", K3, loc, loc))
    return (0.5 * params.eps * grad_int + pot_int / params.eps) / (2.0 * params.c0)


def gl_derivative(phi, params):
    """Derivative of gamma * gl_energy as a nodal dual vector.

    Entry i = (gamma / 2 c0) * int eps grad(phi) . grad(hat_i)
    - (1/eps) phi hat_i dx. The box constraint is handled by the optimizer's
    projection, not folded in here.
    """
    mesh = phi.mesh
    lam, wq, _ = mesh.quad
    K3 = _kernels.p1_stiffness(mesh.areas, mesh.grads)
    loc = phi.values[mesh.triangles]
    grad_part = np.zeros(mesh.num_vertices)
    np.add.at(grad_part, mesh.triangles, np.einsum("tij,tj->ti", K3, loc))
    phi_q = phi.at_quad()
    pot_part = _kernels.p1_load(mesh.areas, mesh.triangles, -phi_q, lam, wq, mesh.num_vertices)
    return (params.gamma / (2.0 * params.c0)) * (params.eps * grad_part + pot_part / params.eps)


def h1_norm(mesh, values):
    """Standard H1 norm of a P1 nodal function."""
    K3 = _kernels.p1_stiffness(mesh.areas, mesh.grads)
    lam, wq, _ = mesh.quad
    M3 = _kernels.p1_mass(mesh.areas, lam, wq)
    loc = values[mesh.triangles]
    val = float(np.einsum("tij,ti,tj->", K3 + M3, loc, loc))
    return math.sqrt(max(val, 0.0))


def build_target_phasefield(mesh, center=(1.5, 0.5), axis_weights=(30.0, 80.0), eps=0.0075):
    """Benchmark target phase field with an elliptic obstacle.

    phi_d(x) = -Phi0((1/eps) (1 - sqrt(a1 (x1-c1)^2 + a2 (x2-c2)^2))) where
    Phi0(z) = sin(z) for |z| <= pi/2 and sign(z) otherwise, so the zero
    level line is the ellipse a1 (x1-c1)^2 + a2 (x2-c2)^2 = 1 and the value
    is -1 inside (obstacle) and +1 far outside (fluid).
    """
    a1, a2 = axis_weights
    if a1 <= 0 or a2 <= 0:
        raise ValueError("axis weights must be positive")
    x = mesh.vertices[:, 0] - center[0]
    y = mesh.vertices[:, 1] - center[1]
    z = (1.0 - np.sqrt(a1 * x**2 + a2 * y**2)) / eps
    vals = np.where(np.abs(z) <= math.pi / 2.0, np.sin(z), np.sign(z))
    return PhaseField(mesh, -vals)


def write_phasefield_csv(path, phi, comment_lines=()):
    with open(path, "w") as fh:
        for line in comment_lines:
            fh.write(f"# {line}\n")
        fh.write("node_index,phi\n")
        for i, v in enumerate(phi.values):
            fh.write(f"{i},{v:.17g}\n")


def read_phasefield_csv(path, mesh):
    vals = np.zeros(mesh.num_vertices)
    seen = 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("node_index"):
                continue
            idx, val = line.split(",")
            vals[int(idx)] = float(val)
            seen += 1
    if seen != mesh.num_vertices:
        raise ValueError(f"phase-field file has {seen} rows, mesh has {mesh.num_vertices} nodes")
    return PhaseField(mesh, vals)
