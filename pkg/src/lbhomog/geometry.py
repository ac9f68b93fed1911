"""Analytic geometry of the periodic unit cell Y = (0, 1)^2.

The inclusion E_int is described by a signed distance ``d`` (negative inside,
positive in the outer phase E_out).  The interface normal ``nu = grad d``
points from the inclusion into the outer phase.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

PHASE_TOL = 1e-12

_GAUSS = {n: np.polynomial.legendre.leggauss(n) for n in (1, 2, 3, 4)}


class PhaseLabel(enum.IntEnum):
    INTERIOR = 0
    EXTERIOR = 1


def _as_points(p):
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    return np.atleast_2d(p), single


def gauss_legendre01(order: int):
    """Gauss-Legendre nodes and weights mapped to [0, 1]."""
    x, w = _GAUSS[order]
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True)
class InclusionShape:
    """Circular inclusion strictly inside the unit cell.

    ``clearance`` is the minimal gap between the inclusion and the cell
    boundary (in cell units); it also fixes the interface/boundary separation
    ``dist(interface, boundary) >= clearance * eps`` of the tiled domain.
    """

    center: tuple = (0.5, 0.5)
    radius: float = 0.25
    clearance: float = 0.05
    kind: str = "circle"

    relaxed = False

    def __post_init__(self):
        if self.kind != "circle":
            raise GeometryError(f"unsupported inclusion kind {self.kind!r}")
        c = tuple(float(v) for v in self.center)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "clearance", float(self.clearance))
        if len(c) != 2 or not all(0.0 < v < 1.0 for v in c):
            raise GeometryError(f"center {c} must lie in the open unit square")
        if not self.radius > 0.0:
            raise GeometryError("radius must be positive")
        if not self.clearance > 0.0:
            raise GeometryError("clearance must be positive")
        room = min(c[0], c[1], 1.0 - c[0], 1.0 - c[1])
        if self.radius + self.clearance > room + 1e-14:
            raise GeometryError(
                f"radius {self.radius} + clearance {self.clearance} exceeds the "
                f"distance {room} from the center to the cell boundary"
            )

    # -- pointwise queries -------------------------------------------------
    def signed_distance(self, p):
        p, single = _as_points(p)
        d = np.hypot(p[:, 0] - self.center[0], p[:, 1] - self.center[1]) - self.radius
        return d[0] if single else d

    def unit_normal(self, p):
        p, single = _as_points(p)
        v = p - np.asarray(self.center)
        rho = np.hypot(v[:, 0], v[:, 1])
        if np.any(rho < 1e-14 * max(self.radius, 1.0)):
            raise GeometryError("normal is undefined at the inclusion center")
        nu = v / rho[:, None]
        return nu[0] if single else nu

    def curvature(self, p):
        """Divergence of the normal field on the interface (1/r for a circle)."""
        p, single = _as_points(p)
        k = np.full(len(p), 1.0 / self.radius)
        return k[0] if single else k

    def phase_of(self, p):
        p, single = _as_points(p)
        d = self.signed_distance(p)
        if np.any(np.abs(d) <= PHASE_TOL):
            raise GeometryError("point lies on the interface; phase is ambiguous")
        lab = np.where(d < 0.0, PhaseLabel.INTERIOR, PhaseLabel.EXTERIOR)
        return PhaseLabel(int(lab[0])) if single else lab

    def project(self, p):
        """Closest point of the interface."""
        p, single = _as_points(p)
        q = np.asarray(self.center) + self.radius * self.unit_normal(p).reshape(-1, 2)
        return q[0] if single else q

    # -- parametrisation ---------------------------------------------------
    def angle_of(self, p):
        p, _ = _as_points(p)
        return np.arctan2(p[:, 1] - self.center[1], p[:, 0] - self.center[0])

    def point_at(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.stack(
            [self.center[0] + self.radius * np.cos(theta),
             self.center[1] + self.radius * np.sin(theta)], axis=-1)

    def edge_quadrature(self, a, b, order=2):
        """Quadrature on the arc of the interface spanned by chords ``a -> b``.

        Returns ``(points, weights, s)`` with shapes ``(E, q, 2)``, ``(E, q)``
        and ``(E, q)``; ``s`` in [0, 1] is the fraction of the arc travelled
        from ``a``, used to interpolate nodal data linearly along the edge.
        """
        ta = self.angle_of(a)
        tb = self.angle_of(b)
        dt = np.angle(np.exp(1j * (tb - ta)))
        x, w = gauss_legendre01(order)
        th = ta[:, None] + dt[:, None] * x[None, :]
        pts = self.point_at(th)
        wts = self.radius * np.abs(dt)[:, None] * w[None, :]
        s = np.broadcast_to(x, th.shape).copy()
        return pts, wts, s

    # -- analytic measures -------------------------------------------------
    @property
    def interface_length(self):
        return 2.0 * np.pi * self.radius

    @property
    def interior_area(self):
        return np.pi * self.radius ** 2

    @property
    def exterior_area(self):
        return 1.0 - self.interior_area

    def describe(self):
        return {"kind": self.kind, "center": list(self.center),
                "radius": self.radius, "clearance": self.clearance}


@dataclass(frozen=True)
class StripeLaminate:
    """Relaxed-geometry test shape: a stripe ``|y1 - 1/2| < theta/2``.

    The two interfaces are vertical lines that touch the top and bottom of
    the cell and close up only through periodicity.  This violates the
    separation hypothesis on purpose; it exists because its effective
    tensor is known in closed form.
    """

    fraction: float = 0.5
    kind: str = "laminate"

    relaxed = True
    clearance = 0.0

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise GeometryError("laminate volume fraction must be in (0, 1)")

    @property
    def interface_positions(self):
        return (0.5 - 0.5 * self.fraction, 0.5 + 0.5 * self.fraction)

    def signed_distance(self, p):
        p, single = _as_points(p)
        d = np.abs(p[:, 0] - 0.5) - 0.5 * self.fraction
        return d[0] if single else d

    def unit_normal(self, p):
        p, single = _as_points(p)
        s = np.sign(p[:, 0] - 0.5)
        if np.any(s == 0.0):
            raise GeometryError("normal is undefined on the stripe midline")
        nu = np.stack([s, np.zeros_like(s)], axis=1)
        return nu[0] if single else nu

    def curvature(self, p):
        p, single = _as_points(p)
        k = np.zeros(len(p))
        return k[0] if single else k

    def phase_of(self, p):
        p, single = _as_points(p)
        d = self.signed_distance(p)
        if np.any(np.abs(d) <= PHASE_TOL):
            raise GeometryError("point lies on the interface; phase is ambiguous")
        lab = np.where(d < 0.0, PhaseLabel.INTERIOR, PhaseLabel.EXTERIOR)
        return PhaseLabel(int(lab[0])) if single else lab

    def project(self, p):
        p, single = _as_points(p)
        q = p.copy()
        lo, hi = self.interface_positions
        q[:, 0] = np.where(p[:, 0] < 0.5, lo, hi)
        return q[0] if single else q

    def edge_quadrature(self, a, b, order=2):
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        x, w = gauss_legendre01(order)
        pts = a[:, None, :] + (b - a)[:, None, :] * x[None, :, None]
        L = np.linalg.norm(b - a, axis=1)
        return pts, L[:, None] * w[None, :], np.broadcast_to(x, (len(a), len(x))).copy()

    @property
    def interface_length(self):
        return 2.0

    @property
    def interior_area(self):
        return self.fraction

    @property
    def exterior_area(self):
        return 1.0 - self.fraction

    def describe(self):
        return {"kind": self.kind, "fraction": self.fraction}


def shape_from_description(desc):
    kind = desc.get("kind", "circle")
    if kind == "circle":
        return InclusionShape(center=tuple(desc["center"]), radius=desc["radius"],
                              clearance=desc.get("clearance", 0.05))
    if kind == "laminate":
        return StripeLaminate(fraction=desc["fraction"])
    raise GeometryError(f"unknown shape kind {kind!r}")
