"""Run configuration: INI parsing, validation and the config digest.

Example file (every key optional; missing keys take the defaults shown)::

    [geometry]
    kind = circle          ; or laminate (cell-only test mode)
    center = 0.5, 0.5
    radius = 0.25
    gamma0 = 0.05
    fraction = 0.5         ; laminate only

    [coefficients]
    lambda_int = 10
    lambda_out = 1
    sigma_int = 1
    sigma_out = 1
    alpha = 1
    beta = 0.1

    [discretization]
    h = 0.02
    dt = 0.001
    theta = 1
    T = 0.25
    guard_n = 4            ; eps = 1/guard_n for the dt-halving check

    [sweep]
    n = 2, 4, 8, 16        ; eps = 1/n

    [initial]
    center = 0.5, 0.5
    radius = 0.4
    amplitude = 1

    [flags]
    second_corrector = false
    cutoff = true
    chain_rule = true
    snapshot_stride = 0

    [output]
    directory = run

    [run]
    seed = 0
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ConfigError, GeometryError
from .evolution import Bump
from .fem import CoefficientSet
from .geometry import InclusionShape, StripeLaminate

DEFAULTS = {
    "geometry": {"kind": "circle", "center": "0.5, 0.5", "radius": "0.25", "gamma0": "0.05",
                 "fraction": "0.5"},
    "coefficients": {"lambda_int": "10", "lambda_out": "1", "sigma_int": "1", "sigma_out": "1",
                     "alpha": "1", "beta": "0.1"},
    "discretization": {"h": "0.02", "dt": "0.001", "theta": "1", "T": "0.25", "guard_n": "4"},
    "sweep": {"n": "2, 4, 8, 16"},
    "initial": {"center": "0.5, 0.5", "radius": "0.4", "amplitude": "1"},
    "flags": {"second_corrector": "false", "cutoff": "true", "chain_rule": "true",
              "snapshot_stride": "0"},
    "output": {"directory": "run"},
    "run": {"seed": "0"},
}


@dataclass(frozen=True)
class RunConfig:
    kind: str = "circle"
    center: tuple = (0.5, 0.5)
    radius: float = 0.25
    gamma0: float = 0.05
    fraction: float = 0.5
    coeffs: CoefficientSet = field(default_factory=CoefficientSet)
    h: float = 0.02
    dt: float = 0.001
    theta: float = 1.0
    T: float = 0.25
    guard_n: int = 4
    sweep: tuple = (2, 4, 8, 16)
    bump: Bump = field(default_factory=Bump)
    second_corrector: bool = False
    cutoff: bool = True
    chain_rule: bool = True
    snapshot_stride: int = 0
    output: str = "run"
    seed: int = 0

    @property
    def eps_list(self):
        return [1.0 / n for n in self.sweep]

    @property
    def shape(self):
        if self.kind == "laminate":
            return StripeLaminate(self.fraction)
        return InclusionShape(center=self.center, radius=self.radius, clearance=self.gamma0)

    def to_dict(self):
        c = self.coeffs
        return {
            "geometry": {"kind": self.kind, "center": list(self.center), "radius": self.radius,
                         "gamma0": self.gamma0, "fraction": self.fraction},
            "coefficients": {"lambda_int": c.lam_int, "lambda_out": c.lam_out,
                             "sigma_int": c.sigma_int, "sigma_out": c.sigma_out,
                             "alpha": c.alpha, "beta": c.beta},
            "discretization": {"h": self.h, "dt": self.dt, "theta": self.theta, "T": self.T,
                               "guard_n": self.guard_n},
            "sweep": {"n": list(self.sweep)},
            "initial": {"center": list(self.bump.center), "radius": self.bump.radius,
                        "amplitude": self.bump.amplitude},
            "flags": {"second_corrector": self.second_corrector, "cutoff": self.cutoff,
                      "chain_rule": self.chain_rule, "snapshot_stride": self.snapshot_stride},
            "run": {"seed": self.seed},
        }

    def digest(self):
        """sha256 of the canonical numerical configuration (output dir excluded)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_ini(self):
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for sec, kv in self.to_dict().items():
            cp[sec] = {k: ", ".join(map(repr, v)) if isinstance(v, list) else
                       str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float)
                       else str(v) for k, v in kv.items()}
        cp["output"] = {"directory": self.output}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _floats(text, n=None):
    vals = [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} comma-separated numbers")
    return tuple(vals)


def parse_eps_list(text):
    """'0.5, 0.25' or '1/2, 1/4' -> tuple of n with eps = 1/n."""
    ns = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        e = Fraction(tok).limit_denominator(10 ** 6)
        if e <= 0:
            raise ValueError(f"eps value {tok} must be positive")
        inv = 1 / e
        if inv.denominator != 1:
            raise ValueError(f"eps value {tok} is not 1/n for an integer n")
        ns.append(int(inv))
    return tuple(ns)


_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


def parse_config(path, overrides=None):
    """Read and validate a run configuration.

    ``overrides`` maps dotted keys (e.g. ``"discretization.h"``) to strings
    and takes precedence over the file.  Raises :class:`ConfigError` with a
    line number for syntax errors and with the full list of violations for
    invalid values.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}", lineno=getattr(exc, "lineno", None)) from exc
    return config_from_parser(cp, overrides)


def config_from_mapping(mapping, overrides=None):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_dict({s: {k: str(v) for k, v in kv.items()} for s, kv in mapping.items()})
    return config_from_parser(cp, overrides)


def config_from_parser(cp, overrides=None):
    violations = []
    raw = {s: dict(kv) for s, kv in DEFAULTS.items()}
    for sec in cp.sections():
        if sec not in DEFAULTS:
            violations.append(f"{sec}: unknown section")
            continue
        for k, v in cp[sec].items():
            if k not in DEFAULTS[sec]:
                violations.append(f"{sec}.{k}: unknown key")
            else:
                raw[sec][k] = v
    for key, v in (overrides or {}).items():
        sec, _, k = key.partition(".")
        raw[sec][k] = str(v)

    def get(sec, key, conv):
        try:
            return conv(raw[sec][key])
        except (ValueError, ZeroDivisionError) as exc:
            violations.append(f"{sec}.{key}: cannot parse {raw[sec][key]!r} ({exc})")
            return conv(DEFAULTS[sec][key])

    def boolean(s):
        try:
            return _BOOL[s.strip().lower()]
        except KeyError:
            raise ValueError("expected true/false") from None

    kind = raw["geometry"]["kind"].strip()
    if kind not in ("circle", "laminate"):
        violations.append(f"geometry.kind: unknown shape {kind!r}")
        kind = "circle"
    center = get("geometry", "center", lambda s: _floats(s, 2))
    radius = get("geometry", "radius", float)
    gamma0 = get("geometry", "gamma0", float)
    fraction = get("geometry", "fraction", float)
    if not gamma0 > 0:
        violations.append("geometry.gamma0: must be positive")
    elif kind == "circle":
        try:
            InclusionShape(center=center, radius=radius, clearance=gamma0)
        except GeometryError as exc:
            violations.append(f"geometry.radius: clearance violation: {exc}")
    if kind == "laminate" and not 0 < fraction < 1:
        violations.append("geometry.fraction: must lie in (0, 1)")

    cvals = {k: get("coefficients", k, float) for k in DEFAULTS["coefficients"]}
    for k in ("lambda_int", "lambda_out", "sigma_int", "sigma_out"):
        if not cvals[k] > 0:
            violations.append(f"coefficients.{k}: must be positive")
    if not cvals["alpha"] >= 0:
        violations.append("coefficients.alpha: must be nonnegative")
    if not cvals["beta"] >= 0:
        violations.append("coefficients.beta: must be nonnegative")

    h = get("discretization", "h", float)
    dt = get("discretization", "dt", float)
    theta = get("discretization", "theta", float)
    T = get("discretization", "T", float)
    guard_n = get("discretization", "guard_n", int)
    if guard_n < 1:
        violations.append("discretization.guard_n: must be a positive integer")
    if not 0 < h < 0.5:
        violations.append("discretization.h: must lie in (0, 0.5)")
    if not 0.5 <= theta <= 1.0:
        violations.append("discretization.theta: must lie in [0.5, 1]")
    if not T > 0:
        violations.append("discretization.T: must be positive")
    if not dt > 0:
        violations.append("discretization.dt: must be positive")
    elif T > 0:
        k = round(T / dt)
        if k < 1 or abs(k * dt - T) > 1e-9 * T:
            violations.append("discretization.dt: T must be an integer multiple of dt")

    sweep = get("sweep", "n", lambda s: tuple(int(v) for v in s.split(",") if v.strip()))
    if not sweep or any(n < 1 for n in sweep):
        violations.append("sweep.n: needs positive integers")
    elif any(b <= a for a, b in zip(sweep, sweep[1:])):
        violations.append("sweep.n: eps = 1/n must be strictly decreasing (n increasing)")

    bc = get("initial", "center", lambda s: _floats(s, 2))
    br = get("initial", "radius", float)
    ba = get("initial", "amplitude", float)
    if not br > 0:
        violations.append("initial.radius: must be positive")
    room = min(bc[0], bc[1], 1 - bc[0], 1 - bc[1])
    if br + gamma0 > room:
        violations.append(f"initial.radius: bump support {br} plus clearance {gamma0} "
                          f"exceeds the distance {room} to the domain boundary")

    flags = {k: get("flags", k, boolean) for k in ("second_corrector", "cutoff", "chain_rule")}
    stride = get("flags", "snapshot_stride", int)
    if stride < 0:
        violations.append("flags.snapshot_stride: must be nonnegative")
    seed = get("run", "seed", int)

    if violations:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(violations), violations)

    return RunConfig(kind=kind, center=center, radius=radius, gamma0=gamma0, fraction=fraction,
                     coeffs=CoefficientSet(lam_int=cvals["lambda_int"], lam_out=cvals["lambda_out"],
                                           sigma_int=cvals["sigma_int"],
                                           sigma_out=cvals["sigma_out"],
                                           alpha=cvals["alpha"], beta=cvals["beta"]),
                     h=h, dt=dt, theta=theta, T=T, guard_n=guard_n, sweep=sweep,
                     bump=Bump(center=bc, radius=br, amplitude=ba),
                     second_corrector=flags["second_corrector"], cutoff=flags["cutoff"],
                     chain_rule=flags["chain_rule"], snapshot_stride=stride,
                     output=raw["output"]["directory"].strip(), seed=seed)
