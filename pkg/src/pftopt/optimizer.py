"""Variable-metric projection method with a PDAS-solved box projection.

Each outer iteration projects a scaled negative gradient through the metric
A = mass_weight * M + gradient_weight * K onto the admissible box via a
primal-dual active-set method, then accepts or halves the step with an
Armijo test on the true reduced objective. Projection guarantees a descent
direction, so accepted objective values are non-increasing. Iteration stops
when the H1 norm of the update falls below the tolerance.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels
from .errors import NonconvergenceError, StalledLineSearchError
from .objective import ObjectiveBreakdown
from .phasefield import PhaseField


@dataclass
class VmptConfig:
    mass_weight: float = 1.0
    gradient_weight: float = 0.03
    tau0: float = 1.0
    armijo_c: float = 1e-4
    max_backtracks: int = 30
    tol: float = 1e-6
    max_iters: int = 500

    def __post_init__(self):
        if min(self.mass_weight, self.gradient_weight, self.tau0, self.tol) <= 0:
            raise ValueError("metric weights, tau0, and tol must be positive")
        if not 0.0 < self.armijo_c < 1.0:
            raise ValueError("Armijo constant must lie in (0, 1)")


@dataclass
class PdasResult:
    phi_new: np.ndarray
    multipliers: np.ndarray
    active_lower: np.ndarray
    active_upper: np.ndarray
    iterations: int


@dataclass
class IterationRecord:
    iteration: int
    breakdown: ObjectiveBreakdown
    step: float
    h1_increment: float
    n_active_lower: int
    n_active_upper: int


@dataclass
class OptimizationHistory:
    records: list = field(default_factory=list)
    final_phi: PhaseField | None = None
    converged: bool = False
    message: str = ""

    def totals(self):
        return [r.breakdown.total for r in self.records]


def metric_matrix(mesh, config):
    """SPD projection metric: mass_weight * M + gradient_weight * K."""
    lam, wq, _ = mesh.quad
    M_el = _kernels.p1_mass(mesh.areas, lam, wq)
    K_el = _kernels.p1_stiffness(mesh.areas, mesh.grads)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    el = config.mass_weight * M_el + config.gradient_weight * K_el
    n = mesh.num_vertices
    return sp.coo_matrix((el.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def h1_matrix(mesh):
    lam, wq, _ = mesh.quad
    M_el = _kernels.p1_mass(mesh.areas, lam, wq)
    K_el = _kernels.p1_stiffness(mesh.areas, mesh.grads)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.num_vertices
    return sp.coo_matrix(((M_el + K_el).ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _check_spd(A):
    n = A.shape[0]
    asym = abs(A - A.T)
    if asym.nnz and asym.max() > 1e-10 * abs(A).max():
        raise ValueError("metric matrix is not symmetric")
    if np.any(A.diagonal() <= 0):
        raise ValueError("metric matrix has a nonpositive diagonal entry")
    if n <= 16:
        w = np.linalg.eigvalsh(A.toarray())
        if w.min() <= 0:
            raise ValueError("metric matrix is not positive definite")


def pdas_project(A, phi_k, tau_g, max_iter=100):
    """Minimize 0.5 (v - phi_k)' A (v - phi_k) + tau_g' (v - phi_k) on the box.

    Primal-dual active-set iteration with the complementarity update
    (c = 1); terminates when the guessed active sets stabilize. The
    multiplier convention is lambda = lambda_up - lambda_low, so
    stationarity reads A (v - phi_k) + tau_g + lambda = 0.
    """
    A = sp.csr_matrix(A)
    _check_spd(A)
    phi_k = np.asarray(phi_k, dtype=float)
    tau_g = np.asarray(tau_g, dtype=float)
    n = phi_k.shape[0]
    lower = np.zeros(n, dtype=bool)
    upper = np.zeros(n, dtype=bool)
    x = phi_k.copy()
    lam = np.zeros(n)
    for it in range(1, max_iter + 1):
        active = lower | upper
        x = np.where(lower, -1.0, np.where(upper, 1.0, 0.0))
        inactive = ~active
        idx = np.nonzero(inactive)[0]
        if idx.size:
            rhs = -tau_g[idx]
            if active.any():
                aidx = np.nonzero(active)[0]
                d_active = x[aidx] - phi_k[aidx]
                rhs = rhs - A[np.ix_(idx, aidx)] @ d_active
            A_II = sp.csc_matrix(A[np.ix_(idx, idx)])
            d_inactive = spla.splu(A_II).solve(rhs)
            x[idx] = phi_k[idx] + d_inactive
        lam = -(A @ (x - phi_k) + tau_g)
        new_upper = lam + (x - 1.0) > 0.0
        new_lower = lam + (x + 1.0) < 0.0
        if np.array_equal(new_upper, upper) and np.array_equal(new_lower, lower):
            return PdasResult(
                x, lam, np.nonzero(lower)[0], np.nonzero(upper)[0], it
            )
        lower = new_lower
        upper = new_upper
    raise NonconvergenceError(f"PDAS did not stabilize within {max_iter} iterations")


def kkt_report(result, A, phi_k, tau_g):
    """Max violations of the projection KKT system (for certification)."""
    d = result.phi_new - phi_k
    stationarity = float(np.max(np.abs(A @ d + tau_g + result.multipliers)))
    feasibility = float(np.max(np.abs(result.phi_new)))
    inactive = np.ones(phi_k.shape[0], dtype=bool)
    inactive[result.active_lower] = False
    inactive[result.active_upper] = False
    lam = result.multipliers
    sign_upper = float(-lam[result.active_upper].min()) if result.active_upper.size else 0.0
    sign_lower = float(lam[result.active_lower].max()) if result.active_lower.size else 0.0
    lam_inactive = float(np.max(np.abs(lam[inactive]))) if inactive.any() else 0.0
    return {
        "stationarity": stationarity,
        "max_abs_phi": feasibility,
        "upper_sign_violation": max(sign_upper, 0.0),
        "lower_sign_violation": max(sign_lower, 0.0),
        "inactive_multiplier": lam_inactive,
    }


def brute_force_box_qp(A, phi_k, tau_g):
    """Exhaustive active-set enumeration oracle for small instances.

    Every choice of active set and bound signs is tried: the inactive block
    is solved (all sign patterns of one set batched as multiple right-hand
    sides), infeasible or wrong-multiplier-sign candidates are discarded,
    and the best remaining objective value wins.
    """
    A = np.asarray(A.todense() if sp.issparse(A) else A, dtype=float)
    phi_k = np.asarray(phi_k, dtype=float)
    tau_g = np.asarray(tau_g, dtype=float)
    n = len(phi_k)
    if n > 14:
        raise ValueError("brute force limited to small instances")
    best = None
    best_val = np.inf
    for smask in range(1 << n):
        fixed = np.array([(smask >> i) & 1 for i in range(n)], dtype=bool)
        free = ~fixed
        nf = int(fixed.sum())
        # all +/-1 assignments on the fixed set, one column per pattern
        if nf:
            codes = np.arange(1 << nf)
            bits = (codes[None, :] >> np.arange(nf)[:, None]) & 1
            Xs = 2.0 * bits - 1.0  # (nf, 2^nf)
        else:
            Xs = np.zeros((0, 1))
        ncols = Xs.shape[1]
        X = np.empty((n, ncols))
        X[fixed] = Xs
        if free.any():
            rhs = -tau_g[free][:, None] - A[np.ix_(free, fixed)] @ (
                Xs - phi_k[fixed][:, None]
            )
            Xf = phi_k[free][:, None] + np.linalg.solve(A[np.ix_(free, free)], rhs)
            X[free] = Xf
            ok = np.all(np.abs(Xf) <= 1.0 + 1e-12, axis=0)
        else:
            ok = np.ones(ncols, dtype=bool)
        D = X - phi_k[:, None]
        lam = -(A @ D + tau_g[:, None])
        if nf:
            at_up = X[fixed] > 0
            ok &= np.all(np.where(at_up, lam[fixed] >= -1e-10, lam[fixed] <= 1e-10), axis=0)
        if not ok.any():
            continue
        vals = 0.5 * np.einsum("ij,ij->j", D, A @ D) + tau_g @ D
        vals = np.where(ok, vals, np.inf)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val = vals[j]
            best = X[:, j].copy()
    return best


@dataclass
class VmptState:
    phi: PhaseField
    breakdown: ObjectiveBreakdown
    gradient: np.ndarray
    tau: float


def vmpt_iterate(state, gradient_provider, objective_provider, config, A, H1):
    """One VMPT step: project, backtrack, accept.

    Returns (new state or None when the projected gradient vanishes,
    IterationRecord or None, converged flag).
    """
    phi_k = state.phi.values
    tau = state.tau
    last_d = None
    for bt in range(config.max_backtracks + 1):
        proj = pdas_project(A, phi_k, tau * state.gradient)
        d = proj.phi_new - phi_k
        last_d = d
        dnorm = float(np.max(np.abs(d)))
        if dnorm == 0.0:
            return state, None, True
        gd = float(state.gradient @ d)
        candidate = PhaseField(state.phi.mesh, proj.phi_new)
        breakdown = objective_provider(candidate)
        if breakdown.total <= state.breakdown.total + config.armijo_c * gd:
            incr = float(np.sqrt(max(d @ (H1 @ d), 0.0)))
            record = IterationRecord(
                0,
                breakdown,
                tau,
                incr,
                proj.active_lower.size,
                proj.active_upper.size,
            )
            converged = incr <= config.tol
            # grow the step when the first trial was accepted, keep it
            # after backtracking; tau0 is the initial step, not a cap
            next_tau = 2.0 * tau if bt == 0 else tau
            new_state = VmptState(
                candidate,
                breakdown,
                None if converged else gradient_provider(candidate),
                next_tau,
            )
            return new_state, record, converged
        tau *= 0.5
    incr = float(np.sqrt(max(last_d @ (H1 @ last_d), 0.0)))
    if incr <= config.tol:
        return state, None, True
    raise StalledLineSearchError(
        f"no Armijo step after {config.max_backtracks} backtracks (increment {incr:g})"
    )


def run(objective_provider, gradient_provider, phi0, config, mesh=None, iteration_callback=None):
    """Minimize the reduced objective from phi0; returns the iteration history.

    ``iteration_callback(k, record, phi)`` fires after each accepted step
    (snapshot hooks).
    """
    mesh = mesh if mesh is not None else phi0.mesh
    A = metric_matrix(mesh, config)
    H1 = h1_matrix(mesh)
    breakdown = objective_provider(phi0)
    history = OptimizationHistory()
    history.records.append(IterationRecord(0, breakdown, 0.0, 0.0, 0, 0))
    state = VmptState(phi0, breakdown, gradient_provider(phi0), config.tau0)
    try:
        for k in range(1, config.max_iters + 1):
            state, record, converged = vmpt_iterate(
                state, gradient_provider, objective_provider, config, A, H1
            )
            if record is not None:
                record.iteration = k
                history.records.append(record)
                if iteration_callback is not None:
                    iteration_callback(k, record, state.phi)
            if converged:
                history.converged = True
                history.message = (
                    "projected gradient vanished"
                    if record is None
                    else f"H1 increment {record.h1_increment:g} <= tol"
                )
                break
        else:
            history.message = f"max_iters = {config.max_iters} reached"
    except StalledLineSearchError as exc:
        exc.history = history
        raise
    history.final_phi = state.phi
    return history


def write_history_csv(path, history, comment_lines=()):
    with open(path, "w") as fh:
        for line in comment_lines:
            fh.write(f"# {line}\n")
        fh.write("iter,total,tracking,porous,regularization,step,h1_increment\n")
        for r in history.records:
            b = r.breakdown
            fh.write(
                f"{r.iteration},{b.total:.17g},{b.tracking:.17g},{b.porous_penalty:.17g},"
                f"{b.regularization:.17g},{r.step:.17g},{r.h1_increment:.17g}\n"
            )
