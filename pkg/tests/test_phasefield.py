import math

import numpy as np
import pytest

from pftopt.mesh import build_structured_mesh
from pftopt.phasefield import (
    GinzburgLandauParams,
    InterpolationParams,
    PhaseField,
    build_target_phasefield,
    clamp_to_admissible,
    gl_derivative,
    gl_energy,
    interpolation_fields,
    read_phasefield_csv,
    write_phasefield_csv,
)


@pytest.fixture(scope="module")
def mesh():
    return build_structured_mesh(12, 4, 3.0, 1.0)


def test_clamp(mesh):
    vals = np.linspace(-2.0, 2.0, mesh.num_vertices)
    phi = clamp_to_admissible(mesh, vals)
    assert phi.values.max() == 1.0
    assert phi.values.min() == -1.0
    inside = np.abs(vals) <= 1.0
    np.testing.assert_array_equal(phi.values[inside], vals[inside])


def test_admissibility_enforced(mesh):
    with pytest.raises(ValueError):
        PhaseField(mesh, np.full(mesh.num_vertices, 1.5))


def test_interpolation_table1_values(mesh):
    # Table-1 parameters: alpha_bar = 0.1, eps = 0.0075
    params = InterpolationParams(alpha_bar=0.1, eps=0.0075)
    ones = PhaseField.constant(mesh, 1.0)
    alpha, beta = interpolation_fields(ones, params)
    assert np.all(alpha.values == 0.0)
    assert np.all(beta.values == 0.0)
    minus = PhaseField.constant(mesh, -1.0)
    alpha, beta = interpolation_fields(minus, params)
    assert alpha.values[0] == pytest.approx(100 * 0.1 / (2 * 0.0075) * 2, rel=1e-14)
    assert beta.values[0] == pytest.approx(0.1 / (2 * 0.0075) * 2, rel=1e-14)
    alpha_t, _ = interpolation_fields(minus, params, target_mode=True)
    assert alpha_t.values[0] == pytest.approx(500 * 0.1 / 0.0075 * 2, rel=1e-14)


def test_interpolation_monotone_nonnegative(mesh):
    params = InterpolationParams(eps=0.03)
    rng = np.random.default_rng(5)
    vals = np.sort(rng.uniform(-1, 1, mesh.num_vertices))[::-1].copy()
    phi = PhaseField(mesh, vals)
    alpha, beta = interpolation_fields(phi, params)
    assert np.all(alpha.values >= 0)
    assert np.all(beta.values >= 0)
    # alpha decreases as phi increases
    assert np.all(np.diff(alpha.values) >= -1e-12)


def test_gl_energy_constants(mesh):
    gl = GinzburgLandauParams(eps=0.0075, gamma=0.005)
    for c in (1.0, -1.0):
        assert abs(gl_energy(PhaseField.constant(mesh, c), gl)) < 1e-12
    zero = PhaseField.constant(mesh, 0.0)
    expected = 3.0 / (2.0 * math.pi * 0.0075)
    assert gl_energy(zero, gl) == pytest.approx(expected, rel=1e-12)


def test_gl_derivative_zero_and_constant(mesh):
    gl = GinzburgLandauParams(eps=0.03, gamma=0.005)
    zero = PhaseField.constant(mesh, 0.0)
    np.testing.assert_allclose(gl_derivative(zero, gl), 0.0, atol=1e-15)
    ones = PhaseField.constant(mesh, 1.0)
    d = gl_derivative(ones, gl)
    assert np.all(d < 0.0)
    # entries are -(gamma / (2 c0 eps)) * integral of each hat
    assert d.sum() == pytest.approx(
        -(0.005 / (2 * gl.c0 * 0.03)) * 3.0, rel=1e-12
    )


def test_gl_derivative_matches_fd(mesh):
    gl = GinzburgLandauParams(eps=0.03, gamma=0.005)
    rng = np.random.default_rng(17)
    h = 1e-5
    for _ in range(10):
        phi = PhaseField(mesh, rng.uniform(-0.9, 0.9, mesh.num_vertices))
        dphi = rng.uniform(-1, 1, mesh.num_vertices)
        ep = gl_energy(PhaseField(mesh, phi.values + h * dphi), gl)
        em = gl_energy(PhaseField(mesh, phi.values - h * dphi), gl)
        fd = (ep - em) / (2 * h)
        ad = float(gl_derivative(phi, gl) @ dphi) / gl.gamma
        assert ad == pytest.approx(fd, rel=1e-6)


def test_target_phasefield_branches():
    mesh = build_structured_mesh(120, 40, 3.0, 1.0)
    eps = 0.0075
    phi_d = build_target_phasefield(mesh, eps=eps)
    # center of the ellipse is deep inside the obstacle
    i_center = np.argmin(
        np.hypot(mesh.vertices[:, 0] - 1.5, mesh.vertices[:, 1] - 0.5)
    )
    assert phi_d.values[i_center] == -1.0
    # far field is pure fluid
    i_far = np.argmin(np.hypot(mesh.vertices[:, 0] - 0.1, mesh.vertices[:, 1] - 0.1))
    assert phi_d.values[i_far] == 1.0
    assert np.all(np.abs(phi_d.values) <= 1.0)
    # both phases occupy a nonempty node set
    assert (phi_d.values == 1.0).sum() > 0
    assert (phi_d.values == -1.0).sum() > 0


def test_target_phasefield_zero_level():
    # circle of radius 0.5 about (0.5, 0.5): the vertex (1.0, 0.5) lies
    # exactly on the zero level line, where the profile vanishes
    mesh = build_structured_mesh(4, 4, 2.0, 1.0)
    phi_d = build_target_phasefield(mesh, center=(0.5, 0.5), axis_weights=(4.0, 4.0), eps=0.1)
    idx = np.argmin(np.hypot(mesh.vertices[:, 0] - 1.0, mesh.vertices[:, 1] - 0.5))
    assert phi_d.values[idx] == 0.0


def test_target_phasefield_sign_change_brackets_ellipse():
    # wherever the nodal field changes sign along a mesh edge, the linear
    # zero crossing sits within one cell of the true ellipse
    mesh = build_structured_mesh(120, 40, 3.0, 1.0)
    phi_d = build_target_phasefield(mesh, eps=0.03)
    tris = mesh.triangles
    verts = mesh.vertices
    vals = phi_d.values
    metric_slope = math.sqrt(80.0)  # steepest growth of the ellipse function
    h_diag = math.hypot(mesh.dx, mesh.dy)
    found = 0
    for edge in ((0, 1), (1, 2), (2, 0)):
        a = tris[:, edge[0]]
        b = tris[:, edge[1]]
        sign_change = vals[a] * vals[b] < 0
        for ia, ib in zip(a[sign_change], b[sign_change]):
            t = vals[ia] / (vals[ia] - vals[ib])
            p = (1 - t) * verts[ia] + t * verts[ib]
            r = math.sqrt(30.0 * (p[0] - 1.5) ** 2 + 80.0 * (p[1] - 0.5) ** 2)
            assert abs(r - 1.0) <= metric_slope * h_diag
            found += 1
    assert found > 20


def test_phasefield_csv_roundtrip(tmp_path, mesh):
    rng = np.random.default_rng(2)
    phi = PhaseField(mesh, rng.uniform(-1, 1, mesh.num_vertices))
    path = tmp_path / "phi.csv"
    write_phasefield_csv(path, phi, ["config_hash=deadbeef"])
    back = read_phasefield_csv(path, mesh)
    np.testing.assert_array_equal(back.values, phi.values)
