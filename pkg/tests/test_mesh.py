import math
import os

import numpy as np
import pytest

from pftopt.errors import OutOfDomainError
from pftopt.mesh import (
    BoundaryTag,
    ScalarFieldP1,
    VelocityFieldMini,
    build_structured_mesh,
    evaluate_field,
    export_fields,
    sample_cross_section,
)


def test_smallest_grid():
    mesh = build_structured_mesh(1, 1, 1.0, 1.0)
    assert mesh.num_vertices == 4
    assert mesh.num_triangles == 2


def test_paper_grid_counts():
    mesh = build_structured_mesh(600, 200, 3.0, 1.0)
    assert mesh.num_vertices == 601 * 201 == 120801
    assert mesh.num_triangles == 2 * 600 * 200 == 240000


def test_invalid_dimensions():
    with pytest.raises(ValueError):
        build_structured_mesh(0, 4, 1.0, 1.0)
    with pytest.raises(ValueError):
        build_structured_mesh(4, 4, -1.0, 1.0)
    with pytest.raises(ValueError):
        build_structured_mesh(4, 4, 1.0, 0.0)


def test_areas_positive_and_sum():
    mesh = build_structured_mesh(13, 7, 3.0, 1.0)
    assert np.all(mesh.areas > 0)
    assert abs(mesh.areas.sum() - 3.0) < 1e-12 * 3.0


def test_boundary_tags_partition():
    mesh = build_structured_mesh(2, 1, 3.0, 1.0)
    seen = set()
    for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        xa, xb = mesh.vertices[a], mesh.vertices[b]
        key = tuple(sorted((a, b)))
        assert key not in seen
        seen.add(key)
        if tag is BoundaryTag.INFLOW:
            assert xa[0] == 0.0 and xb[0] == 0.0
        elif tag is BoundaryTag.OUTFLOW:
            assert xa[0] == 3.0 and xb[0] == 3.0
        else:
            assert xa[1] == xb[1] and xa[1] in (0.0, 1.0)
    # edge count of the structured boundary
    assert len(seen) == 2 * mesh.nx + 2 * mesh.ny


def test_quadrature_degree_five():
    mesh = build_structured_mesh(1, 1, 1.0, 1.0)
    lam, wq, _ = mesh.quad
    assert abs(wq.sum() - 1.0) < 1e-15
    # exact barycentric moments on the reference triangle:
    # integral of lam1^p over the triangle = area * 2 / ((p+1)(p+2))
    for p in range(6):
        exact = 2.0 / ((p + 1) * (p + 2))
        approx = float((wq * lam[:, 0] ** p).sum())
        assert abs(approx - exact) < 1e-14, p


def test_evaluate_constant_and_linear():
    mesh = build_structured_mesh(6, 3, 3.0, 1.0)
    const = ScalarFieldP1(mesh, np.full(mesh.num_vertices, 2.5))
    linear = ScalarFieldP1(mesh, mesh.vertices[:, 0].copy())
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = rng.uniform([0, 0], [3, 1])
        assert evaluate_field(const, p) == pytest.approx(2.5, abs=1e-13)
        assert evaluate_field(linear, p) == pytest.approx(p[0], abs=1e-13)
    assert evaluate_field(linear, (0.5, 0.5)) == pytest.approx(0.5, abs=1e-14)


def test_evaluate_bubble_at_barycenter():
    mesh = build_structured_mesh(2, 2, 1.0, 1.0)
    bub = np.zeros((mesh.num_triangles, 2))
    b = 0.7
    tri = 3
    bub[tri] = (b, 0.0)
    field = VelocityFieldMini(mesh, np.zeros((mesh.num_vertices, 2)), bub)
    bary = mesh.vertices[mesh.triangles[tri]].mean(axis=0)
    val = evaluate_field(field, bary)
    # bubble scaled to 1 at its own barycenter
    assert val[0] == pytest.approx(b, abs=1e-13)
    assert val[1] == pytest.approx(0.0, abs=1e-15)


def test_evaluate_outside_domain():
    mesh = build_structured_mesh(4, 4, 1.0, 1.0)
    field = ScalarFieldP1(mesh, np.zeros(mesh.num_vertices))
    with pytest.raises(OutOfDomainError):
        evaluate_field(field, (1.5, 0.5))
    with pytest.raises(OutOfDomainError):
        evaluate_field(field, (0.5, -0.1))


def test_cross_section_constant_and_linear():
    mesh = build_structured_mesh(120, 40, 3.0, 1.0)
    ones = ScalarFieldP1(mesh, np.ones(mesh.num_vertices))
    samples = sample_cross_section(ones, (1.0, 0.2), (2.0, 0.8), 3)
    assert len(samples) == 3
    assert samples[0][0] == 0.0
    for _, v in samples:
        assert v == pytest.approx(1.0, abs=1e-13)
    # vertical segment used for the phase-field comparison figure
    y_field = ScalarFieldP1(mesh, mesh.vertices[:, 1].copy())
    samples = sample_cross_section(y_field, (1.5, 0.6), (1.5, 0.65), 2)
    assert samples[0][1] == pytest.approx(0.6, abs=1e-13)
    assert samples[1][1] == pytest.approx(0.65, abs=1e-13)
    # horizontal segment
    x_field = ScalarFieldP1(mesh, mesh.vertices[:, 0].copy())
    samples = sample_cross_section(x_field, (1.7125, 0.5), (1.755, 0.5), 2)
    assert samples[0][1] == pytest.approx(1.7125, abs=1e-13)
    assert samples[1][1] == pytest.approx(1.755, abs=1e-13)


def _read_vtk_point_data(path):
    """Minimal legacy-VTK reader for round-trip checks."""
    scalars = {}
    vectors = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    i = 0
    npoints = 0
    while i < len(lines):
        tok = lines[i].split()
        if tok[:1] == ["POINTS"]:
            npoints = int(tok[1])
        if tok[:1] == ["SCALARS"]:
            name = tok[1]
            vals = []
            j = i + 2
            while len(vals) < npoints:
                vals.append(float(lines[j]))
                j += 1
            scalars[name] = np.array(vals)
            i = j - 1
        if tok[:1] == ["VECTORS"]:
            name = tok[1]
            vals = []
            j = i + 1
            while len(vals) < npoints:
                vals.append([float(x) for x in lines[j].split()])
                j += 1
            vectors[name] = np.array(vals)
            i = j - 1
        i += 1
    return scalars, vectors


def test_vtk_export_roundtrip(tmp_path):
    mesh = build_structured_mesh(5, 3, 3.0, 1.0)
    rng = np.random.default_rng(11)
    scalar = ScalarFieldP1(mesh, rng.standard_normal(mesh.num_vertices))
    vel = VelocityFieldMini(
        mesh,
        rng.standard_normal((mesh.num_vertices, 2)),
        rng.standard_normal((mesh.num_triangles, 2)),
    )
    path = tmp_path / "fields.vtk"
    export_fields(mesh, {"phi": scalar, "u": vel}, path)
    scalars, vectors = _read_vtk_point_data(path)
    np.testing.assert_array_equal(scalars["phi"], scalar.values)
    np.testing.assert_array_equal(vectors["u"][:, :2], vel.nodal)
    assert np.all(vectors["u"][:, 2] == 0.0)


def test_vtk_export_geometry_only(tmp_path):
    mesh = build_structured_mesh(2, 2, 1.0, 1.0)
    path = tmp_path / "geom.vtk"
    export_fields(mesh, {}, path)
    text = path.read_text()
    assert "POINTS 9 double" in text
    assert "CELL_TYPES 8" in text
    assert "POINT_DATA" not in text


def test_export_rejects_foreign_mesh(tmp_path):
    mesh = build_structured_mesh(2, 2, 1.0, 1.0)
    other = build_structured_mesh(2, 2, 1.0, 1.0)
    field = ScalarFieldP1(other, np.zeros(other.num_vertices))
    with pytest.raises(ValueError):
        export_fields(mesh, {"phi": field}, tmp_path / "x.vtk")
