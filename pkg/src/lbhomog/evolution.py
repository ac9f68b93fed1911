"""Theta-scheme time stepping for the micro and the homogenized problem.

Both problems are written as M u' + K u = 0 with homogeneous Dirichlet data
and advanced by

    (M + theta dt K) u^{k+1} = (M - (1 - theta) dt K) u^k

with the boundary dofs eliminated.  Every step is an iterative solve warm
started from the previous step.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, SolverError
from .fem import (CoefficientSet, amg_preconditioner, apply_constraints,
                  assemble_anisotropic_stiffness, assemble_bulk_mass,
                  assemble_bulk_stiffness, assemble_surface_mass,
                  assemble_surface_stiffness, solve_spd)

STEP_TOL = 1e-10
ENERGY_TOL = 1e-10
AMG_THRESHOLD = 20000


@dataclass(frozen=True)
class Bump:
    """Smooth compactly supported bump a exp(1 - 1/(1 - rho^2)), rho = |x - c|/R."""

    center: tuple = (0.5, 0.5)
    radius: float = 0.4
    amplitude: float = 1.0

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        rho2 = ((x - np.asarray(self.center)) ** 2).sum(axis=1) / self.radius ** 2
        out = np.zeros(len(x))
        inside = rho2 < 1.0
        out[inside] = self.amplitude * np.exp(1.0 - 1.0 / (1.0 - rho2[inside]))
        return out

    def boundary_gap(self):
        """Distance between the support and the boundary of the unit square."""
        c = self.center
        return min(c[0], c[1], 1 - c[0], 1 - c[1]) - self.radius


def project_initial(mesh, u0):
    """Nodal interpolation of the initial datum.

    ``u0`` is a callable on (N, 2) points, typically a :class:`Bump`, or
    ``None`` for zero data.
    """
    if u0 is None:
        return np.zeros(len(mesh.nodes))
    gap = getattr(u0, "boundary_gap", None)
    if gap is not None and gap() <= 0.0:
        raise ConfigError("initial data support touches the domain boundary",
                          ["initial.radius"])
    vals = np.asarray(u0(mesh.nodes), dtype=float)
    dn = getattr(mesh, "dirichlet_nodes", None)
    if dn is not None and len(dn) and np.any(vals[dn] != 0.0):
        raise ConfigError("initial data does not vanish on the domain boundary",
                          ["initial.radius"])
    return vals


def energy(M, u):
    """E = 1/2 u^T M u."""
    u = np.asarray(u, dtype=float)
    return 0.5 * float(u @ (M @ u))


def micro_operators(mesh, coeffs: CoefficientSet):
    """(M_total, K_total) of the eps-periodic problem on a tiled domain mesh."""
    eps = mesh.eps
    M = assemble_bulk_mass(mesh, coeffs)
    K = assemble_bulk_stiffness(mesh, coeffs)
    if len(mesh.interface_edges):
        if coeffs.alpha:
            M = M + assemble_surface_mass(mesh.nodes, mesh.interface_edges, eps * coeffs.alpha)
        if coeffs.beta:
            K = K + assemble_surface_stiffness(mesh.nodes, mesh.interface_edges, eps * coeffs.beta)
    return M.tocsr(), K.tocsr()


def macro_operators(mesh, A_total, gamma):
    M = gamma * assemble_bulk_mass(mesh)
    K = assemble_anisotropic_stiffness(mesh, A_total)
    return M.tocsr(), K.tocsr()


def check_time_grid(T, dt):
    if not dt > 0 or not T > 0:
        raise ConfigError("T and dt must be positive", ["discretization.dt"])
    K = int(round(T / dt))
    if K < 1 or abs(K * dt - T) > 1e-9 * T:
        raise ConfigError(f"T = {T} is not an integer multiple of dt = {dt}",
                          ["discretization.dt"])
    return K


def theta_steps(M, K, mesh, u_init, T, dt, theta=1.0, rel_tol=STEP_TOL, precond=None):
    """Generator over ``(k, t_k, u^k)`` for k = 0 .. T/dt.

    ``precond`` is None (choose by size), 'jacobi' or 'amg'.
    """
    if not 0.5 <= theta <= 1.0:
        raise ConfigError(f"theta = {theta} outside [0.5, 1]", ["discretization.theta"])
    nsteps = check_time_grid(T, dt)
    system = apply_constraints(M + theta * dt * K, ("dirichlet",), mesh)
    B = (M - (1.0 - theta) * dt * K).tocsr() if theta < 1.0 else M
    n_free = system.matrix.shape[0]
    if precond is None:
        precond = "amg" if n_free > AMG_THRESHOLD else "jacobi"
    pc = amg_preconditioner(system.matrix) if precond == "amg" else None
    u = np.array(u_init, dtype=float)
    yield 0, 0.0, u
    for k in range(1, nsteps + 1):
        rhs = B @ u
        if not np.any(rhs):
            u = np.zeros_like(u)
        else:
            u = solve_spd(system, rhs, rel_tol=rel_tol, x0=u, precond=pc)
        yield k, k * dt, u


@dataclass
class Trajectory:
    """Time history of one run.

    ``snapshots`` holds every ``stride``-th state (always including t = 0 and
    t = T); ``energies`` and the per-step identity residuals are kept for
    every step.
    """

    mesh: object
    times: np.ndarray
    snapshots: dict
    energies: np.ndarray
    identity_residuals: np.ndarray
    theta: float
    dt: float
    flags: list = field(default_factory=list)

    @property
    def final(self):
        return self.snapshots[len(self.times) - 1]

    @property
    def initial(self):
        return self.snapshots[0]

    def max_identity_residual(self):
        """Largest per-step energy-identity residual relative to E^0."""
        e0 = self.energies[0]
        if len(self.identity_residuals) == 0:
            return 0.0
        r = float(np.max(np.abs(self.identity_residuals)))
        return r / e0 if e0 > 0 else r

    def energy_monotone(self, tol=ENERGY_TOL):
        d = np.diff(self.energies)
        return bool(np.all(d <= tol * max(self.energies[0], 0.0)))


class EnergyMonitor:
    """Tracks E^k, the implicit-Euler energy identity and monotonicity."""

    def __init__(self, M, K, dt, theta):
        self.M, self.K, self.dt, self.theta = M, K, dt, theta
        self.energies = []
        self.residuals = []
        self.flags = []
        self._prev = None

    def push(self, k, u):
        E = energy(self.M, u)
        if self._prev is not None:
            up, Ep = self._prev
            if self.theta == 1.0:
                d = u - up
                pred = -self.dt * float(u @ (self.K @ u)) - 0.5 * float(d @ (self.M @ d))
                self.residuals.append((E - Ep) - pred)
            if E - Ep > ENERGY_TOL * self.energies[0]:
                self.flags.append(f"energy increase at step {k}: {E - Ep:.3e}")
        self.energies.append(E)
        self._prev = (u, E)
        return E


def run_trajectory(M, K, mesh, u_init, T, dt, theta=1.0, stride=1, precond=None,
                   rel_tol=STEP_TOL):
    mon = EnergyMonitor(M, K, dt, theta)
    snaps = {}
    times = []
    nsteps = check_time_grid(T, dt)
    for k, t, u in theta_steps(M, K, mesh, u_init, T, dt, theta, rel_tol, precond):
        mon.push(k, u)
        times.append(t)
        if k in (0, nsteps) or (stride and k % stride == 0):
            snaps[k] = u
    return Trajectory(mesh=mesh, times=np.array(times), snapshots=snaps,
                      energies=np.array(mon.energies),
                      identity_residuals=np.array(mon.residuals), theta=theta, dt=dt,
                      flags=mon.flags)


def run_micro(mesh, coeffs: CoefficientSet, u0, T, dt, theta=1.0, stride=1, precond=None):
    """Micro problem on the tiled domain mesh (mesh.eps fixes the scaling)."""
    M, K = micro_operators(mesh, coeffs)
    return run_trajectory(M, K, mesh, project_initial(mesh, u0), T, dt, theta, stride, precond)


def require_spd(A_total):
    A = np.asarray(A_total, dtype=float)
    if A.shape != (2, 2) or np.abs(A - A.T).max() > 1e-12 * max(1.0, np.abs(A).max()):
        raise SolverError("effective tensor is not symmetric; refusing to run")
    if np.linalg.eigvalsh(A)[0] <= 0:
        raise SolverError("effective tensor is not positive definite; refusing to run")


def run_macro(mesh, A_total, gamma, u0, T, dt, theta=1.0, stride=1, precond=None):
    """Homogenized problem gamma u_t - div(A_total grad u) = 0 on the same mesh."""
    require_spd(A_total)
    if not gamma > 0:
        raise SolverError("gamma must be positive")
    M, K = macro_operators(mesh, A_total, gamma)
    return run_trajectory(M, K, mesh, project_initial(mesh, u0), T, dt, theta, stride, precond)


def write_energies(path, times, energies, digest=None):
    with open(path, "w", newline="") as fh:
        if digest:
            fh.write(f"# config_digest {digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time", "energy"])
        for k, (t, e) in enumerate(zip(times, energies)):
            w.writerow([k, repr(float(t)), repr(float(e))])


def dense_reference(M, K, dirichlet, u_init, T, dt, theta=1.0):
    """Dense LU time stepping; an independent oracle for small meshes."""
    import scipy.linalg as sla

    n = M.shape[0]
    free = np.setdiff1d(np.arange(n), dirichlet)
    Md = M.toarray() if sp.issparse(M) else np.asarray(M)
    Kd = K.toarray() if sp.issparse(K) else np.asarray(K)
    S = (Md + theta * dt * Kd)[np.ix_(free, free)]
    B = Md - (1 - theta) * dt * Kd
    lu = sla.lu_factor(S)
    u = np.array(u_init, float)
    out = [u.copy()]
    for _ in range(check_time_grid(T, dt)):
        v = np.zeros(n)
        v[free] = sla.lu_solve(lu, (B @ u)[free])
        u = v
        out.append(u.copy())
    return np.array(out)


def write_snapshot(directory, mesh, k, u, digest=None):
    from .meshing import write_mesh

    os.makedirs(directory, exist_ok=True)
    write_mesh(os.path.join(directory, f"snapshot_{k:05d}.mesh"), mesh, field=u, digest=digest)
