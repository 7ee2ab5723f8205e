"""Structured triangulation of the channel rectangle and MINI/P1 fields.

The hold-all rectangle (0, width) x (0, height) is meshed from an nx-by-ny
grid of cells, each split along the bottom-left to top-right diagonal. The
velocity space is the MINI element (vertex hats plus one cubic bubble per
triangle, scaled to 1 at the barycenter); scalars (pressure, phase field)
are P1. One symmetric 7-point triangle quadrature rule, exact to polynomial
degree 5, is used for every integral in the package.
"""

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

from . import _kernels
from .errors import OutOfDomainError

GEOM_TOL = 1e-12


class BoundaryTag(Enum):
    INFLOW = "Inflow"
    OUTFLOW = "Outflow"
    WALL = "Wall"


def _quadrature_degree5():
    """Symmetric 7-point rule on the reference triangle (degree 5)."""
    s15 = math.sqrt(15.0)
    a1 = (6.0 - s15) / 21.0
    a2 = (6.0 + s15) / 21.0
    w0 = 9.0 / 40.0
    w1 = (155.0 - s15) / 1200.0
    w2 = (155.0 + s15) / 1200.0
    lam = np.array(
        [
            [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            [1.0 - 2.0 * a1, a1, a1],
            [a1, 1.0 - 2.0 * a1, a1],
            [a1, a1, 1.0 - 2.0 * a1],
            [1.0 - 2.0 * a2, a2, a2],
            [a2, 1.0 - 2.0 * a2, a2],
            [a2, a2, 1.0 - 2.0 * a2],
        ]
    )
    wq = np.array([w0, w1, w1, w1, w2, w2, w2])
    return lam, wq


class StructuredMesh:
    """Uniform structured triangular mesh with tagged boundary edges."""

    def __init__(self, nx, ny, width, height):
        if nx < 1 or ny < 1:
            raise ValueError(f"cell counts must be positive, got nx={nx}, ny={ny}")
        if width <= 0 or height <= 0:
            raise ValueError(
                f"dimensions must be positive, got width={width}, height={height}"
            )
        self.nx = int(nx)
        self.ny = int(ny)
        self.width = float(width)
        self.height = float(height)
        self.dx = self.width / self.nx
        self.dy = self.height / self.ny

        xs = np.linspace(0.0, self.width, self.nx + 1)
        ys = np.linspace(0.0, self.height, self.ny + 1)
        X, Y = np.meshgrid(xs, ys)
        self.vertices = np.column_stack([X.ravel(), Y.ravel()])

        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        ix = ix.ravel()
        iy = iy.ravel()
        v00 = iy * (self.nx + 1) + ix
        v10 = v00 + 1
        v01 = v00 + (self.nx + 1)
        v11 = v01 + 1
        lower = np.column_stack([v00, v10, v11])
        upper = np.column_stack([v00, v11, v01])
        # lower triangle of cell k at index 2k, upper at 2k+1
        tris = np.empty((2 * self.nx * self.ny, 3), dtype=np.int64)
        tris[0::2] = lower
        tris[1::2] = upper
        self.triangles = tris

        edges = []
        tags = []
        for j in range(self.ny):
            a = j * (self.nx + 1)
            edges.append((a, a + self.nx + 1))
            tags.append(BoundaryTag.INFLOW)
            b = a + self.nx
            edges.append((b, b + self.nx + 1))
            tags.append(BoundaryTag.OUTFLOW)
        for i in range(self.nx):
            edges.append((i, i + 1))
            tags.append(BoundaryTag.WALL)
            top = self.ny * (self.nx + 1) + i
            edges.append((top, top + 1))
            tags.append(BoundaryTag.WALL)
        self.boundary_edges = np.array(edges, dtype=np.int64)
        self.boundary_tags = tags

    # -- sizes ------------------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    @property
    def num_velocity_dofs(self):
        """Scalar velocity DOFs per component: vertex hats then bubbles."""
        return self.num_vertices + self.num_triangles

    # -- geometry and FE tables (computed once, shared read-only) ---------

    @cached_property
    def areas(self):
        v = self.vertices
        t = self.triangles
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def grads(self):
        """Constant P1 hat gradients, shape (nt, 3, 2)."""
        v = self.vertices
        t = self.triangles
        x = v[t, 0]
        y = v[t, 1]
        g = np.empty((self.num_triangles, 3, 2))
        twoA = 2.0 * self.areas
        g[:, 0, 0] = (y[:, 1] - y[:, 2]) / twoA
        g[:, 0, 1] = (x[:, 2] - x[:, 1]) / twoA
        g[:, 1, 0] = (y[:, 2] - y[:, 0]) / twoA
        g[:, 1, 1] = (x[:, 0] - x[:, 2]) / twoA
        g[:, 2, 0] = (y[:, 0] - y[:, 1]) / twoA
        g[:, 2, 1] = (x[:, 1] - x[:, 0]) / twoA
        return g

    @cached_property
    def quad(self):
        """(lam, wq, psi): barycentric points, weights, basis value table."""
        lam, wq = _quadrature_degree5()
        psi = np.empty((lam.shape[0], 4))
        psi[:, :3] = lam
        psi[:, 3] = 27.0 * lam[:, 0] * lam[:, 1] * lam[:, 2]
        return lam, wq, psi

    @cached_property
    def quad_points(self):
        """Physical quadrature point coordinates, shape (nt, nq, 2)."""
        lam, _, _ = self.quad
        return np.einsum("qi,tic->tqc", lam, self.vertices[self.triangles])

    @cached_property
    def bubble_grads(self):
        """Bubble gradients at the quadrature points, shape (nt, nq, 2)."""
        lam, _, _ = self.quad
        g = self.grads
        prod = np.stack(
            [
                lam[:, 1] * lam[:, 2],
                lam[:, 0] * lam[:, 2],
                lam[:, 0] * lam[:, 1],
            ],
            axis=1,
        )  # (nq, 3)
        return 27.0 * np.einsum("qi,tik->tqk", prod, g)

    @cached_property
    def boundary_vertices(self):
        mask = np.zeros(self.num_vertices, dtype=bool)
        mask[self.boundary_edges.ravel()] = True
        return np.nonzero(mask)[0]

    # -- point location ----------------------------------------------------

    def locate(self, point):
        """Return (triangle index, barycentric coords) containing ``point``."""
        x, y = float(point[0]), float(point[1])
        if not (
            -GEOM_TOL <= x <= self.width + GEOM_TOL
            and -GEOM_TOL <= y <= self.height + GEOM_TOL
        ):
            raise OutOfDomainError(f"point ({x}, {y}) outside the domain")
        ix = min(int(x / self.dx), self.nx - 1)
        iy = min(int(y / self.dy), self.ny - 1)
        xi = (x - ix * self.dx) / self.dx
        eta = (y - iy * self.dy) / self.dy
        cell = iy * self.nx + ix
        if xi >= eta:
            # lower triangle (v00, v10, v11)
            tri = 2 * cell
            lam = np.array([1.0 - xi, xi - eta, eta])
        else:
            # upper triangle (v00, v11, v01)
            tri = 2 * cell + 1
            lam = np.array([1.0 - eta, xi, eta - xi])
        lam = np.clip(lam, 0.0, 1.0)
        lam /= lam.sum()
        return tri, lam


@dataclass
class ScalarFieldP1:
    """P1 nodal scalar field (pressure, phase field, coefficients)."""

    mesh: StructuredMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.num_vertices,):
            raise ValueError(
                f"expected {self.mesh.num_vertices} nodal values, "
                f"got shape {self.values.shape}"
            )

    def at_quad(self):
        lam, _, _ = self.mesh.quad
        return _kernels.scalar_at_quad(self.mesh.triangles, self.values, lam)


@dataclass
class VelocityFieldMini:
    """MINI velocity field: vertex values (nv, 2) plus bubbles (nt, 2)."""

    mesh: StructuredMesh
    nodal: np.ndarray
    bubble: np.ndarray

    def __post_init__(self):
        self.nodal = np.asarray(self.nodal, dtype=float)
        self.bubble = np.asarray(self.bubble, dtype=float)
        if self.nodal.shape != (self.mesh.num_vertices, 2):
            raise ValueError(f"bad nodal shape {self.nodal.shape}")
        if self.bubble.shape != (self.mesh.num_triangles, 2):
            raise ValueError(f"bad bubble shape {self.bubble.shape}")

    @classmethod
    def zero(cls, mesh):
        return cls(mesh, np.zeros((mesh.num_vertices, 2)), np.zeros((mesh.num_triangles, 2)))

    def dof_vector(self):
        """Flatten to the solver layout [ux hats, ux bubbles, uy hats, uy bubbles]."""
        nvd = self.mesh.num_velocity_dofs
        out = np.empty(2 * nvd)
        nv = self.mesh.num_vertices
        out[:nv] = self.nodal[:, 0]
        out[nv:nvd] = self.bubble[:, 0]
        out[nvd : nvd + nv] = self.nodal[:, 1]
        out[nvd + nv :] = self.bubble[:, 1]
        return out

    @classmethod
    def from_dof_vector(cls, mesh, vec):
        nvd = mesh.num_velocity_dofs
        nv = mesh.num_vertices
        nodal = np.column_stack([vec[:nv], vec[nvd : nvd + nv]])
        bubble = np.column_stack([vec[nv:nvd], vec[nvd + nv : 2 * nvd]])
        return cls(mesh, nodal, bubble)

    def at_quad(self):
        _, _, psi = self.mesh.quad
        return _kernels.velocity_at_quad(self.mesh.triangles, self.nodal, self.bubble, psi)

    def grad_at_quad(self):
        return _kernels.velocity_grad_at_quad(
            self.mesh.triangles, self.mesh.grads, self.mesh.bubble_grads, self.nodal, self.bubble
        )

    def l2_norm(self):
        vals = self.at_quad()
        _, wq, _ = self.mesh.quad
        sq = vals[:, :, 0] ** 2 + vals[:, :, 1] ** 2
        return math.sqrt(max(_kernels.integrate(self.mesh.areas, sq, wq), 0.0))


def build_structured_mesh(nx, ny, width, height):
    """Mesh the rectangle (0, width) x (0, height) from an nx-by-ny grid."""
    return StructuredMesh(nx, ny, width, height)


def evaluate_field(field, point):
    """Barycentric evaluation of a P1 scalar or MINI velocity at a point."""
    mesh = field.mesh
    tri, lam = mesh.locate(point)
    verts = mesh.triangles[tri]
    if isinstance(field, ScalarFieldP1):
        return float(np.dot(lam, field.values[verts]))
    bub = 27.0 * lam[0] * lam[1] * lam[2]
    out = lam @ field.nodal[verts] + bub * field.bubble[tri]
    return out


def sample_cross_section(field, p0, p1, n):
    """Sample a P1 field at n uniform points on the segment p0 -> p1.

    Returns a list of (arclength, value) pairs, endpoints included.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    length = float(np.hypot(*(p1 - p0)))
    out = []
    for k in range(n):
        t = k / (n - 1)
        pt = (1.0 - t) * p0 + t * p1
        out.append((t * length, evaluate_field(field, pt)))
    return out


def write_cross_section_csv(path, samples, comment_lines=()):
    with open(path, "w") as fh:
        for line in comment_lines:
            fh.write(f"# {line}\n")
        fh.write("s,value\n")
        for s, v in samples:
            fh.write(f"{s:.17g},{v:.17g}\n")


def export_fields(mesh, fields, path, title="pftopt fields"):
    """Write a legacy-ASCII VTK unstructured grid with point data.

    ``fields`` maps names to ScalarFieldP1 (scalars) or VelocityFieldMini
    (vertex values exported as 3-vectors with zero third component; bubbles
    vanish at vertices and are omitted).
    """
    for name, field in fields.items():
        if field.mesh is not mesh:
            raise ValueError(f"field {name!r} does not live on the given mesh")
    nv = mesh.num_vertices
    nt = mesh.num_triangles
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {nv} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g} 0\n")
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        for _ in range(nt):
            fh.write("5\n")
        if fields:
            fh.write(f"POINT_DATA {nv}\n")
            for name, field in fields.items():
                if isinstance(field, ScalarFieldP1):
                    fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for v in field.values:
                        fh.write(f"{v:.17g}\n")
                else:
                    fh.write(f"VECTORS {name} double\n")
                    for vx, vy in field.nodal:
                        fh.write(f"{vx:.17g} {vy:.17g} 0\n")
