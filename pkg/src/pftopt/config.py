"""Flat key-value configuration for the benchmark CLI.

The file format is one ``dotted.key = value`` pair per line, ``#`` comments
allowed. Unknown keys are hard errors: reproducibility beats flexibility.
Built-in defaults are the full paper-scale setup; the shipped desk-scale
profile overrides mesh, interface width, horizons, and tolerance.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .flow import channel_problem
from .mesh import build_structured_mesh
from .objective import ObservationMask, ProblemSetup
from .optimizer import VmptConfig
from .phasefield import GinzburgLandauParams, InterpolationParams

_DEFAULTS = {
    "mesh.nx": 600,
    "mesh.ny": 200,
    "mesh.width": 3.0,
    "mesh.height": 1.0,
    "physics.mu": 0.5,
    "phase.epsilon": 0.0075,
    "phase.gamma": 0.005,
    "phase.alpha_bar": 0.1,
    "phase.alpha_scale": 100.0,
    "phase.beta_scale": 1.0,
    "phase.target_scale": 500.0,
    "time.dt": 0.0125,
    "time.horizons": "0.5,1,2,4,8,16",
    "target.center_x": 1.5,
    "target.center_y": 0.5,
    "target.axis_weight_x": 30.0,
    "target.axis_weight_y": 80.0,
    "optimizer.mass_weight": 1.0,
    "optimizer.gradient_weight": "epsilon",
    "optimizer.tau0": 1.0,
    "optimizer.armijo_c": 1e-4,
    "optimizer.max_backtracks": 30,
    "optimizer.tol": 1e-6,
    "optimizer.max_iters": 500,
    "solver.newton_tol": 1e-10,
    "solver.max_newton": 30,
    "observation.mask": "full",
    "cross_section.p0": "1.5,0.6",
    "cross_section.p1": "1.5,0.65",
    "cross_section.n": 200,
    "gradient_check.n_directions": 5,
    "gradient_check.h": "1e-4,1e-5",
    "paths.output_dir": "out",
    "paths.ud_cache": "",
    "run.seed": 12345,
    "run.snapshot_stride": 0,
}

_INT_KEYS = {
    "mesh.nx",
    "mesh.ny",
    "optimizer.max_backtracks",
    "optimizer.max_iters",
    "solver.max_newton",
    "cross_section.n",
    "gradient_check.n_directions",
    "run.seed",
    "run.snapshot_stride",
}
_STR_KEYS = {
    "time.horizons",
    "observation.mask",
    "cross_section.p0",
    "cross_section.p1",
    "gradient_check.h",
    "paths.output_dir",
    "paths.ud_cache",
    "optimizer.gradient_weight",
}


def parse_config_text(text):
    values = dict(_DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = val
    return _coerce(values)


def _coerce(values):
    out = {}
    for key, val in values.items():
        if key in _STR_KEYS:
            out[key] = str(val)
        elif key in _INT_KEYS:
            try:
                out[key] = int(val)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"key {key!r}: expected integer, got {val!r}") from exc
        else:
            try:
                out[key] = float(val)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"key {key!r}: expected number, got {val!r}") from exc
    return out


def _parse_floats(text, key):
    try:
        vals = [float(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: expected comma-separated numbers") from exc
    if not vals:
        raise ConfigError(f"key {key!r}: empty list")
    return vals


def _parse_point(text, key):
    vals = _parse_floats(text, key)
    if len(vals) != 2:
        raise ConfigError(f"key {key!r}: expected 'x,y'")
    return tuple(vals)


@dataclass
class BenchConfig:
    """Typed view of a parsed configuration plus derived builders."""

    values: dict = field(default_factory=lambda: _coerce(dict(_DEFAULTS)))

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls(parse_config_text(fh.read()))

    @classmethod
    def defaults(cls):
        return cls()

    def __getitem__(self, key):
        return self.values[key]

    # -- derived objects ---------------------------------------------------

    def horizons(self):
        return _parse_floats(self["time.horizons"], "time.horizons")

    def fd_steps(self):
        return _parse_floats(self["gradient_check.h"], "gradient_check.h")

    def cross_section_points(self):
        return (
            _parse_point(self["cross_section.p0"], "cross_section.p0"),
            _parse_point(self["cross_section.p1"], "cross_section.p1"),
        )

    def build_mesh(self):
        return build_structured_mesh(
            self["mesh.nx"], self["mesh.ny"], self["mesh.width"], self["mesh.height"]
        )

    def interp(self):
        return InterpolationParams(
            alpha_bar=self["phase.alpha_bar"],
            eps=self["phase.epsilon"],
            alpha_scale=self["phase.alpha_scale"],
            beta_scale=self["phase.beta_scale"],
            target_scale=self["phase.target_scale"],
        )

    def gl_params(self):
        return GinzburgLandauParams(eps=self["phase.epsilon"], gamma=self["phase.gamma"])

    def setup(self, mesh):
        data = channel_problem(mesh, self["physics.mu"])
        return ProblemSetup(
            mesh,
            data,
            self.interp(),
            self.gl_params(),
            newton_tol=self["solver.newton_tol"],
            max_newton=self["solver.max_newton"],
        )

    def mask(self, mesh):
        spec = str(self["observation.mask"]).strip()
        if spec == "full":
            return ObservationMask.full(mesh)
        coords = _parse_floats(spec, "observation.mask")
        if len(coords) != 4:
            raise ConfigError(
                "observation.mask must be 'full' or 'x0,y0,x1,y1' rectangle"
            )
        return ObservationMask.from_rect(mesh, *coords)

    def vmpt(self):
        gw = self["optimizer.gradient_weight"]
        if isinstance(gw, str):
            if gw.strip() == "epsilon":
                gw = self["phase.epsilon"]
            else:
                try:
                    gw = float(gw)
                except ValueError as exc:
                    raise ConfigError(
                        "optimizer.gradient_weight must be a number or 'epsilon'"
                    ) from exc
        return VmptConfig(
            mass_weight=self["optimizer.mass_weight"],
            gradient_weight=gw,
            tau0=self["optimizer.tau0"],
            armijo_c=self["optimizer.armijo_c"],
            max_backtracks=self["optimizer.max_backtracks"],
            tol=self["optimizer.tol"],
            max_iters=self["optimizer.max_iters"],
        )

    def target_center(self):
        return (self["target.center_x"], self["target.center_y"])

    def target_axis_weights(self):
        return (self["target.axis_weight_x"], self["target.axis_weight_y"])

    def canonical_text(self):
        lines = []
        for key in sorted(self.values):
            lines.append(f"{key} = {self.values[key]}")
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def fit_loglog_slope(points):
    """Least-squares slope of log(gap) vs log(T)."""
    pts = list(points)
    if len(pts) < 2:
        raise ValueError("need at least two points")
    T = np.array([p[0] for p in pts], dtype=float)
    gap = np.array([p[1] for p in pts], dtype=float)
    if np.any(T <= 0) or np.any(gap <= 0):
        raise ValueError("log-log fit needs positive values")
    x = np.log(T)
    y = np.log(gap)
    slope = float(np.polyfit(x, y, 1)[0])
    return slope
