import numpy as np
import pytest
import scipy.sparse as sp

import pftopt.optimizer as opt
from pftopt.mesh import build_structured_mesh
from pftopt.objective import ObjectiveBreakdown
from pftopt.phasefield import PhaseField


def random_spd(rng, n):
    Q = rng.standard_normal((n, n))
    A = Q @ Q.T + n * np.eye(n)
    return sp.csr_matrix(A)


def test_pdas_hand_example():
    # identity metric, phi_k = 0, tau g = (3, -0.2):
    # unconstrained step (-3, 0.2) clamps to (-1, 0.2); the multiplier on
    # the lower-active node is -2 under lambda = lambda_up - lambda_low
    A = sp.identity(2, format="csr")
    res = opt.pdas_project(A, np.zeros(2), np.array([3.0, -0.2]))
    np.testing.assert_allclose(res.phi_new, [-1.0, 0.2], atol=1e-14)
    np.testing.assert_allclose(res.multipliers, [-2.0, 0.0], atol=1e-14)
    assert list(res.active_lower) == [0]
    assert list(res.active_upper) == []


def test_pdas_zero_gradient():
    rng = np.random.default_rng(1)
    A = random_spd(rng, 6)
    phi_k = rng.uniform(-0.9, 0.9, 6)
    res = opt.pdas_project(A, phi_k, np.zeros(6))
    np.testing.assert_allclose(res.phi_new, phi_k, atol=1e-14)
    assert res.active_lower.size == 0 and res.active_upper.size == 0


def test_pdas_interior_one_iteration():
    rng = np.random.default_rng(2)
    A = random_spd(rng, 5)
    phi_k = np.zeros(5)
    g = 1e-3 * rng.standard_normal(5)
    res = opt.pdas_project(A, phi_k, g)
    assert res.iterations == 1
    expected = phi_k - sp.linalg.spsolve(A.tocsc(), g)
    np.testing.assert_allclose(res.phi_new, expected, atol=1e-12)


def test_pdas_rejects_asymmetric():
    A = sp.csr_matrix(np.array([[2.0, 1.0], [0.0, 2.0]]))
    with pytest.raises(ValueError):
        opt.pdas_project(A, np.zeros(2), np.ones(2))


def test_pdas_matches_brute_force():
    rng = np.random.default_rng(123)
    sizes = [2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 2, 3, 4, 5, 6, 7, 8, 9, 10]
    assert len(sizes) == 20
    for n in sizes:
        A = random_spd(rng, n)
        phi_k = rng.uniform(-1, 1, n)
        tau_g = rng.standard_normal(n) * n
        res = opt.pdas_project(A, phi_k, tau_g)
        oracle = opt.brute_force_box_qp(A, phi_k, tau_g)
        np.testing.assert_allclose(res.phi_new, oracle, atol=1e-10)
        # KKT certificates at the spec tolerances
        rep = opt.kkt_report(res, A, phi_k, tau_g)
        scale = max(1.0, np.abs(tau_g).max())
        assert rep["max_abs_phi"] <= 1.0
        assert rep["stationarity"] <= 1e-10 * scale
        assert rep["upper_sign_violation"] <= 1e-12
        assert rep["lower_sign_violation"] <= 1e-12
        assert rep["inactive_multiplier"] <= 1e-12 * scale


def test_metric_matrix_spd():
    mesh = build_structured_mesh(8, 4, 3.0, 1.0)
    cfg = opt.VmptConfig(gradient_weight=0.03, tol=1e-6)
    A = opt.metric_matrix(mesh, cfg)
    assert abs(A - A.T).max() < 1e-14
    w = np.linalg.eigvalsh(A.toarray())
    assert w.min() > 0


class QuadraticProblem:
    """J(phi) = 0.5 (phi - z)' A (phi - z) with the VMPT metric as Hessian."""

    def __init__(self, mesh, cfg, z):
        self.A = opt.metric_matrix(mesh, cfg)
        self.z = z
        self.evals = 0

    def objective(self, phi):
        d = phi.values - self.z
        val = 0.5 * float(d @ (self.A @ d))
        self.evals += 1
        return ObjectiveBreakdown(val, val, 0.0, 0.0)

    def gradient(self, phi):
        return self.A @ (phi.values - self.z)


def test_vmpt_quadratic_converges_fast():
    # metric equals the Hessian, so the first projection already lands on
    # the box-constrained minimizer and the method stops right after
    mesh = build_structured_mesh(6, 3, 3.0, 1.0)
    cfg = opt.VmptConfig(gradient_weight=0.03, tol=1e-10, max_iters=10)
    rng = np.random.default_rng(3)
    z = rng.uniform(-2.0, 2.0, mesh.num_vertices)
    prob = QuadraticProblem(mesh, cfg, z)
    phi0 = PhaseField.constant(mesh, 0.0)
    history = opt.run(prob.objective, prob.gradient, phi0, cfg)
    assert history.converged
    assert len(history.records) - 1 <= 3
    # KKT of the box-constrained quadratic at the final iterate
    phi = history.final_phi.values
    g = prob.gradient(history.final_phi)
    interior = np.abs(phi) < 1.0 - 1e-12
    assert np.max(np.abs(g[interior])) < 1e-9
    assert np.all(g[phi >= 1.0 - 1e-12] <= 1e-9)
    assert np.all(g[phi <= -1.0 + 1e-12] >= -1e-9)


def test_vmpt_already_converged_start():
    mesh = build_structured_mesh(6, 3, 3.0, 1.0)
    cfg = opt.VmptConfig(gradient_weight=0.03, tol=1e-8)
    prob = QuadraticProblem(mesh, cfg, np.zeros(mesh.num_vertices))
    phi0 = PhaseField.constant(mesh, 0.0)  # exactly the minimizer
    history = opt.run(prob.objective, prob.gradient, phi0, cfg)
    assert history.converged
    assert len(history.records) == 1


def test_vmpt_monotone_and_feasible():
    mesh = build_structured_mesh(6, 3, 3.0, 1.0)
    cfg = opt.VmptConfig(gradient_weight=0.03, tol=1e-9, max_iters=40)
    rng = np.random.default_rng(5)

    class Rosenbrockish:
        """Nonquadratic smooth objective with an interior/boundary mix."""

        def __init__(self):
            self.w = rng.uniform(0.5, 1.5, mesh.num_vertices)
            self.z = rng.uniform(-1.5, 1.5, mesh.num_vertices)

        def objective(self, phi):
            d = phi.values - self.z
            val = float(np.sum(self.w * d**2) + 0.1 * np.sum(d**4))
            return ObjectiveBreakdown(val, val, 0.0, 0.0)

        def gradient(self, phi):
            d = phi.values - self.z
            return 2 * self.w * d + 0.4 * d**3

    prob = Rosenbrockish()
    history = opt.run(
        prob.objective, prob.gradient, PhaseField.constant(mesh, 0.0), cfg
    )
    totals = history.totals()
    assert all(t1 <= t0 + 1e-15 for t0, t1 in zip(totals, totals[1:]))
    assert np.max(np.abs(history.final_phi.values)) <= 1.0


def test_stalled_line_search_raises():
    from pftopt.errors import StalledLineSearchError

    mesh = build_structured_mesh(4, 2, 3.0, 1.0)
    cfg = opt.VmptConfig(gradient_weight=0.03, tol=1e-12, max_backtracks=5, max_iters=5)

    def objective(phi):
        return ObjectiveBreakdown(1.0, 1.0, 0.0, 0.0)  # never decreases

    def gradient(phi):
        return np.ones(mesh.num_vertices)  # pretends descent exists

    with pytest.raises(StalledLineSearchError) as err:
        opt.run(objective, gradient, PhaseField.constant(mesh, 0.0), cfg)
    assert err.value.history is not None


def test_history_csv_roundtrip(tmp_path):
    mesh = build_structured_mesh(4, 2, 3.0, 1.0)
    cfg = opt.VmptConfig(gradient_weight=0.03, tol=1e-9)
    prob = QuadraticProblem(mesh, cfg, np.full(mesh.num_vertices, 0.4))
    history = opt.run(prob.objective, prob.gradient, PhaseField.constant(mesh, 0.0), cfg)
    path = tmp_path / "hist.csv"
    opt.write_history_csv(path, history, ["config_hash=fff"])
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == "iter,total,tracking,porous,regularization,step,h1_increment"
    assert len(lines) == 2 + len(history.records)
