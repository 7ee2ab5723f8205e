"""Benchmark command line: reproduce the experiment suite from a config file.

Subcommands: ``target`` (build the obstacle phase field and target velocity),
``opt-stationary``, ``opt-transient --T``, ``sweep`` (horizon sweep with warm
starts plus gap table), ``gap-table`` (refit from existing outputs),
``cross-section``, ``gradient-check``. Exit codes: 0 success, 2 verification
failure, 3 solver nonconvergence, 4 config error.
"""

import argparse
import os
import sys

import numpy as np

from . import flow, objective as objective_mod, optimizer as opt_mod
from .config import BenchConfig, file_sha256, fit_loglog_slope
from .errors import ConfigError, NonconvergenceError, StalledLineSearchError
from .mesh import export_fields, sample_cross_section, write_cross_section_csv
from .objective import (
    ObservationMask,
    StationaryProvider,
    TransientProvider,
    fd_directional_derivative,
    make_target_velocity,
)
from .phasefield import (
    PhaseField,
    build_target_phasefield,
    read_phasefield_csv,
    write_phasefield_csv,
)

EXIT_OK = 0
EXIT_VERIFICATION = 2
EXIT_NONCONVERGENCE = 3
EXIT_CONFIG = 4


class _Runtime:
    """Shared lazily-built objects for one CLI invocation."""

    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.out = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.mesh = cfg.build_mesh()
        self.setup = cfg.setup(self.mesh)
        self.mask = cfg.mask(self.mesh)
        self._phi_d = None
        self._u_d = None

    def provenance(self, **extra):
        lines = [f"config_hash={self.cfg.config_hash()}"]
        for key, val in extra.items():
            lines.append(f"{key}={val}")
        return lines

    def path(self, name):
        return os.path.join(self.out, name)

    def ud_cache_path(self):
        p = str(self.cfg["paths.ud_cache"]).strip()
        return p if p else self.path("u_d_cache.csv")

    @property
    def phi_d(self):
        if self._phi_d is None:
            self._phi_d = build_target_phasefield(
                self.mesh,
                center=self.cfg.target_center(),
                axis_weights=self.cfg.target_axis_weights(),
                eps=self.cfg["phase.epsilon"],
            )
        return self._phi_d

    def target_velocity(self):
        """Target velocity, loaded from a hash-validated cache when possible."""
        if self._u_d is not None:
            return self._u_d
        cache = self.ud_cache_path()
        want = self.cfg.config_hash()
        if os.path.exists(cache):
            with open(cache) as fh:
                head = fh.readline()
            if f"config_hash={want}" in head:
                self._u_d = objective_mod.read_velocity_csv(cache, self.mesh)
                return self._u_d
        state = objective_mod.solve_state(self.phi_d, self.setup, target_mode=True)
        objective_mod.write_velocity_csv(
            cache, state, comment_lines=self.provenance()
        )
        self._u_d = state.velocity
        return self._u_d


def cmd_target(rt):
    phi_d = rt.phi_d
    u_d = rt.target_velocity()
    write_phasefield_csv(rt.path("phi_d.csv"), phi_d, rt.provenance())
    export_fields(
        rt.mesh,
        {"phi_d": phi_d.as_scalar_field()},
        rt.path("phi_d.vtk"),
        title=f"phi_d config_hash={rt.cfg.config_hash()}",
    )
    export_fields(
        rt.mesh,
        {"u_d": u_d},
        rt.path("u_d.vtk"),
        title=f"u_d config_hash={rt.cfg.config_hash()}",
    )
    obstacle = (phi_d.values[rt.mesh.triangles] <= 0.0).all(axis=1).astype(float)
    if obstacle.sum() > 0:
        speed = objective_mod.mean_speed(u_d, obstacle)
        print(f"target written; mean obstacle speed = {speed:.4g}")
    else:
        print("target written; obstacle region resolves no full triangle")
    return EXIT_OK


def _write_run_outputs(rt, tag, history, extra_comments=()):
    comments = list(rt.provenance(**dict(extra_comments)))
    comments.append(f"converged={history.converged} message={history.message}")
    opt_mod.write_history_csv(rt.path(f"history_{tag}.csv"), history, comments)
    write_phasefield_csv(rt.path(f"phi_{tag}.csv"), history.final_phi, comments)
    export_fields(
        rt.mesh,
        {f"phi_{tag}": history.final_phi.as_scalar_field()},
        rt.path(f"phi_{tag}.vtk"),
        title=f"phi_{tag} config_hash={rt.cfg.config_hash()}",
    )


def _snapshot_callback(rt, tag):
    stride = int(rt.cfg["run.snapshot_stride"])
    if stride <= 0:
        return None

    def cb(k, record, phi):
        if k % stride == 0:
            export_fields(
                rt.mesh,
                {"phi": phi.as_scalar_field()},
                rt.path(f"phi_{tag}_iter_{k:04d}.vtk"),
                title=f"phi_{tag} iter {k} config_hash={rt.cfg.config_hash()}",
            )

    return cb


def _initial_phi(rt, phi0_file):
    extra = {}
    if phi0_file:
        phi0 = read_phasefield_csv(phi0_file, rt.mesh)
        extra["warm_start"] = os.path.basename(phi0_file)
        extra["warm_start_sha256"] = file_sha256(phi0_file)
    else:
        phi0 = PhaseField.constant(rt.mesh, 1.0)
    return phi0, extra


def _vmpt_config(rt, tau0=None):
    cfg = rt.cfg.vmpt()
    if tau0 is not None and tau0 > 0:
        import dataclasses

        cfg = dataclasses.replace(cfg, tau0=tau0)
    return cfg


def _final_tau(history):
    """Step-size scale learned by a finished run (None for a no-op run)."""
    tau = history.records[-1].step
    return 2.0 * tau if tau > 0 else None


def cmd_opt_stationary(rt, phi0_file=None, tau0=None):
    u_d = rt.target_velocity()
    provider = StationaryProvider(rt.setup, u_d, rt.mask)
    phi0, extra = _initial_phi(rt, phi0_file)
    extra["ud_cache_sha256"] = file_sha256(rt.ud_cache_path())
    history = opt_mod.run(
        provider.objective,
        provider.gradient,
        phi0,
        _vmpt_config(rt, tau0),
        iteration_callback=_snapshot_callback(rt, "s"),
    )
    _write_run_outputs(rt, "s", history, extra.items())
    last = history.records[-1]
    print(
        f"stationary run: {len(history.records) - 1} iterations, "
        f"J = {last.breakdown.total:.6g}, converged = {history.converged}"
    )
    return EXIT_OK, history


def _horizon_tag(T):
    return f"T{T:g}".replace(".", "p")


def cmd_opt_transient(rt, T, phi0_file=None, tau0=None):
    u_d = rt.target_velocity()
    dt = rt.cfg["time.dt"]
    provider = TransientProvider(rt.setup, u_d, rt.mask, T, dt)
    phi0, extra = _initial_phi(rt, phi0_file)
    extra["ud_cache_sha256"] = file_sha256(rt.ud_cache_path())
    extra["T"] = T
    tag = _horizon_tag(T)
    history = opt_mod.run(
        provider.objective,
        provider.gradient,
        phi0,
        _vmpt_config(rt, tau0),
        iteration_callback=_snapshot_callback(rt, tag),
    )
    _write_run_outputs(rt, tag, history, extra.items())
    last = history.records[-1]
    print(
        f"T = {T:g}: {len(history.records) - 1} iterations, "
        f"J_T = {last.breakdown.total:.6g}, converged = {history.converged}"
    )
    return EXIT_OK, history


def _final_total(path):
    last = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("iter,"):
                continue
            last = line
    if last is None:
        raise ConfigError(f"no history rows in {path}")
    return float(last.split(",")[1])


def _write_gap_table(rt, rows, slope):
    path = rt.path("gap_table.csv")
    with open(path, "w") as fh:
        for line in rt.provenance(loglog_slope=f"{slope:.6g}"):
            fh.write(f"# {line}\n")
        fh.write("T,J_T,J_s,gap\n")
        for T, jt, js, gap in rows:
            fh.write(f"{T:.17g},{jt:.17g},{js:.17g},{gap:.17g}\n")
    return path


def cmd_sweep(rt):
    """Horizon sweep with warm starts, then the gap table with its slope.

    Besides warm-starting each horizon from the previous optimum, the
    learned Armijo step scale is chained along the runs, which skips the
    step ramp-up the projection metric would otherwise re-learn per run.
    """
    tau0 = None
    if not os.path.exists(rt.path("history_s.csv")):
        _, hist_s = cmd_opt_stationary(rt)
        tau0 = _final_tau(hist_s)
    J_s = _final_total(rt.path("history_s.csv"))
    u_d = rt.target_velocity()
    dt = rt.cfg["time.dt"]
    phi_prev_file = None
    failures = []
    rows = []
    for T in sorted(rt.cfg.horizons()):
        tag = _horizon_tag(T)
        try:
            _, hist = cmd_opt_transient(rt, T, phi0_file=phi_prev_file, tau0=tau0)
            tau0 = _final_tau(hist) or tau0
            J_T = _final_total(rt.path(f"history_{tag}.csv"))
            rows.append((T, J_T, J_s, abs(J_T - J_s)))
            phi_prev_file = rt.path(f"phi_{tag}.csv")
        except (NonconvergenceError, StalledLineSearchError) as exc:
            failures.append((T, str(exc)))
            print(f"T = {T:g} failed: {exc}", file=sys.stderr)
    if len(rows) >= 2:
        slope = fit_loglog_slope([(T, gap) for T, _, _, gap in rows])
    else:
        slope = float("nan")
    path = _write_gap_table(rt, rows, slope)
    print(f"gap table written to {path}; fitted log-log slope = {slope:.4g}")
    if failures:
        print(f"{len(failures)} horizon(s) failed", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_gap_table(rt):
    """Rebuild the gap table from existing sweep outputs."""
    J_s = _final_total(rt.path("history_s.csv"))
    rows = []
    for T in sorted(rt.cfg.horizons()):
        hist = rt.path(f"history_{_horizon_tag(T)}.csv")
        if os.path.exists(hist):
            J_T = _final_total(hist)
            rows.append((T, J_T, J_s, abs(J_T - J_s)))
    if len(rows) < 2:
        print("need at least two completed horizons", file=sys.stderr)
        return EXIT_VERIFICATION
    slope = fit_loglog_slope([(T, gap) for T, _, _, gap in rows])
    path = _write_gap_table(rt, rows, slope)
    print(f"gap table written to {path}; fitted log-log slope = {slope:.4g}")
    return EXIT_OK


def cmd_cross_section(rt, field_file, p0=None, p1=None, n=None):
    phi = read_phasefield_csv(field_file, rt.mesh)
    cfg_p0, cfg_p1 = rt.cfg.cross_section_points()
    p0 = p0 if p0 is not None else cfg_p0
    p1 = p1 if p1 is not None else cfg_p1
    n = n if n is not None else int(rt.cfg["cross_section.n"])
    samples = sample_cross_section(phi.as_scalar_field(), p0, p1, n)
    base = os.path.splitext(os.path.basename(field_file))[0]
    out = rt.path(f"cross_{base}.csv")
    write_cross_section_csv(
        out,
        samples,
        rt.provenance(
            field=os.path.basename(field_file),
            field_sha256=file_sha256(field_file),
            p0=f"{p0[0]:g}:{p0[1]:g}",
            p1=f"{p1[0]:g}:{p1[1]:g}",
        ),
    )
    print(f"cross-section written to {out}")
    return EXIT_OK


def cmd_gradient_check(rt, mode, n_directions=None, h_list=None):
    cells = rt.cfg["mesh.nx"] * rt.cfg["mesh.ny"]
    if cells > 2048:
        raise ConfigError(
            f"gradient-check needs a small mesh (nx*ny <= 2048), got {cells}"
        )
    n_directions = n_directions or int(rt.cfg["gradient_check.n_directions"])
    h_list = h_list if h_list else rt.cfg.fd_steps()
    threshold = 1e-5 if mode == "stationary" else 1e-6
    u_d = rt.target_velocity()
    rng = np.random.default_rng(int(rt.cfg["run.seed"]))
    phi = PhaseField(rt.mesh, rng.uniform(-0.7, 0.8, rt.mesh.num_vertices))
    dt = rt.cfg["time.dt"]
    T = sorted(rt.cfg.horizons())[0]
    if mode == "stationary":
        provider = StationaryProvider(rt.setup, u_d, rt.mask)
    else:
        provider = TransientProvider(rt.setup, u_d, rt.mask, T, dt)
    grad = provider.gradient(phi)

    def evaluator(p):
        if mode == "stationary":
            return objective_mod.eval_stationary_objective(p, u_d, rt.mask, rt.setup).total
        return objective_mod.eval_transient_objective(p, u_d, rt.mask, rt.setup, T, dt).total

    rows = []
    worst = 0.0
    for k in range(n_directions):
        dphi = rng.uniform(-1.0, 1.0, rt.mesh.num_vertices)
        if not np.any(dphi):
            raise ValueError("degenerate zero direction")
        adjoint_dd = float(grad @ dphi)
        for h in h_list:
            fd = fd_directional_derivative(evaluator, phi, dphi, h)
            rel = abs(adjoint_dd - fd) / max(abs(fd), 1e-300)
            rows.append((k, h, adjoint_dd, fd, rel))
    best_per_dir = {}
    for k, h, ad, fd, rel in rows:
        best_per_dir[k] = min(best_per_dir.get(k, np.inf), rel)
    worst = max(best_per_dir.values())
    passed = worst < threshold
    out = rt.path(f"gradient_check_{mode}.csv")
    with open(out, "w") as fh:
        for line in rt.provenance(mode=mode, threshold=threshold):
            fh.write(f"# {line}\n")
        fh.write("direction,h,adjoint_dd,fd_dd,rel_err\n")
        for k, h, ad, fd, rel in rows:
            fh.write(f"{k},{h:.17g},{ad:.17g},{fd:.17g},{rel:.17g}\n")
    status = "PASS" if passed else "FAIL"
    print(f"gradient-check {mode}: worst rel err {worst:.3e} (threshold {threshold:g}) {status}")
    return EXIT_OK if passed else EXIT_VERIFICATION


def _point_arg(text):
    parts = [float(tok) for tok in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected 'x,y'")
    return tuple(parts)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pftopt",
        description="Phase-field topology optimization benchmark for channel flow.",
    )
    parser.add_argument("--config", help="config file (flat dotted keys)")
    parser.add_argument("--out", help="output directory (overrides paths.output_dir)")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="force sequential assembly reductions (assembly is always "
        "sequential in this build, so outputs are bit-reproducible either way)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("target", help="build the target phase field and velocity")

    p = sub.add_parser("opt-stationary", help="optimize the stationary objective")
    p.add_argument("--phi0", help="warm-start phase-field CSV")

    p = sub.add_parser("opt-transient", help="optimize the transient objective")
    p.add_argument("--T", type=float, required=True, help="time horizon")
    p.add_argument("--phi0", help="warm-start phase-field CSV")

    sub.add_parser("sweep", help="horizon sweep with warm starts and gap table")
    sub.add_parser("gap-table", help="rebuild the gap table from existing outputs")

    p = sub.add_parser("cross-section", help="sample a phase field along a segment")
    p.add_argument("--field", required=True, help="phase-field CSV on the config mesh")
    p.add_argument("--p0", type=_point_arg, help="segment start 'x,y'")
    p.add_argument("--p1", type=_point_arg, help="segment end 'x,y'")
    p.add_argument("--n", type=int, help="number of samples")

    p = sub.add_parser("gradient-check", help="adjoint gradient vs finite differences")
    p.add_argument("--mode", choices=("stationary", "transient"), required=True)
    p.add_argument("--n-directions", type=int)
    p.add_argument("--h", help="comma-separated FD steps")

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = BenchConfig.from_file(args.config) if args.config else BenchConfig.defaults()
        out_dir = args.out or str(cfg["paths.output_dir"])
        rt = _Runtime(cfg, out_dir)
        if args.command == "target":
            return cmd_target(rt)
        if args.command == "opt-stationary":
            return cmd_opt_stationary(rt, args.phi0)[0]
        if args.command == "opt-transient":
            return cmd_opt_transient(rt, args.T, args.phi0)[0]
        if args.command == "sweep":
            return cmd_sweep(rt)
        if args.command == "gap-table":
            return cmd_gap_table(rt)
        if args.command == "cross-section":
            return cmd_cross_section(rt, args.field, args.p0, args.p1, args.n)
        if args.command == "gradient-check":
            h_list = [float(tok) for tok in args.h.split(",")] if args.h else None
            return cmd_gradient_check(rt, args.mode, args.n_directions, h_list)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonconvergenceError, StalledLineSearchError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
