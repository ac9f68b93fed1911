"""P1 finite element forms, constraint handling and an SPD solver.

Bulk forms are assembled over phase-tagged triangles, surface forms over the
straight interface edges.  On a straight edge the tangential gradient of the
P1 trace is the difference quotient along the edge, so the surface
Laplace-Beltrami stiffness is the 1D stiffness of the edge chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, ConstraintError, SolverError
from .geometry import PhaseLabel

MIN_AREA = 1e-14


@dataclass(frozen=True)
class CoefficientSet:
    """Material constants: bulk conductivities and capacities per phase,
    interface capacity ``alpha`` and tangential interface conductivity ``beta``."""

    lam_int: float = 10.0
    lam_out: float = 1.0
    sigma_int: float = 1.0
    sigma_out: float = 1.0
    alpha: float = 1.0
    beta: float = 0.1

    def __post_init__(self):
        for name in ("lam_int", "lam_out", "sigma_int", "sigma_out"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")
        # alpha = 0 and beta = 0 are allowed as degenerate probes
        for name in ("alpha", "beta"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def lam_min(self):
        return min(self.lam_int, self.lam_out)

    @property
    def lam_jump(self):
        """[lambda] = lambda_out - lambda_int."""
        return self.lam_out - self.lam_int

    def lam_of(self, phase):
        return np.where(phase == PhaseLabel.INTERIOR, self.lam_int, self.lam_out)

    def sigma_of(self, phase):
        return np.where(phase == PhaseLabel.INTERIOR, self.sigma_int, self.sigma_out)

    def replace(self, **kw):
        d = dict(self.__dict__)
        d.update(kw)
        return CoefficientSet(**d)


# ---------------------------------------------------------------------------
# element kernels

def p1_gradients(nodes, triangles):
    """Barycentric gradients, shape (M, 3, 2), and signed areas (M,)."""
    p = nodes[triangles]
    x, y = p[:, :, 0], p[:, :, 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
                  - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    if np.any(np.abs(area) < MIN_AREA):
        raise AssemblyError("degenerate triangle (area below 1e-14)")
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    g = np.stack([b, c], axis=2) / (2.0 * area)[:, None, None]
    return g, area


def _scatter(n, conn, local):
    k = conn.shape[1]
    rows = np.repeat(conn, k, axis=1).ravel()
    cols = np.tile(conn, (1, k)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _weights(mesh, values, default):
    if values is None:
        return np.full(len(mesh.triangles), default)
    if np.isscalar(values):
        return np.full(len(mesh.triangles), float(values))
    return np.asarray(values, dtype=float)


def stiffness_matrix(nodes, triangles, weight=None, tensor=None):
    g, area = p1_gradients(nodes, triangles)
    w = np.abs(area) if weight is None else np.abs(area) * weight
    if tensor is None:
        local = np.einsum("eik,ejk->eij", g, g)
    else:
        local = np.einsum("eik,kl,ejl->eij", g, np.asarray(tensor, float), g)
    return _scatter(len(nodes), triangles, w[:, None, None] * local)


def mass_matrix(nodes, triangles, weight=None):
    _, area = p1_gradients(nodes, triangles)
    w = np.abs(area) if weight is None else np.abs(area) * weight
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _scatter(len(nodes), triangles, w[:, None, None] * ref)


def assemble_bulk_stiffness(mesh, coeffs: CoefficientSet | None = None):
    """sum_T lambda(phase T) int_T grad phi_i . grad phi_j (unit weight if no coeffs)."""
    w = None if coeffs is None else coeffs.lam_of(mesh.phase)
    return stiffness_matrix(mesh.nodes, mesh.triangles, w)


def assemble_bulk_mass(mesh, coeffs: CoefficientSet | None = None):
    w = None if coeffs is None else coeffs.sigma_of(mesh.phase)
    return mass_matrix(mesh.nodes, mesh.triangles, w)


def assemble_anisotropic_stiffness(mesh, tensor):
    """int (A grad u) . grad v for a constant 2x2 tensor A."""
    return stiffness_matrix(mesh.nodes, mesh.triangles, None, tensor)


def _edge_lengths(nodes, edges):
    L = np.linalg.norm(nodes[edges[:, 1]] - nodes[edges[:, 0]], axis=1)
    if np.any(L <= 0.0):
        raise AssemblyError("zero-length interface edge")
    return L


def assemble_surface_stiffness(nodes, edges, coef=1.0):
    """Tangential (Laplace-Beltrami) stiffness of the P1 trace on an edge chain."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    L = _edge_lengths(nodes, edges)
    local = (coef / L)[:, None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]])
    return _scatter(len(nodes), edges, local)


def assemble_surface_mass(nodes, edges, coef=1.0):
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    L = _edge_lengths(nodes, edges)
    local = (coef * L / 6.0)[:, None, None] * np.array([[2.0, 1.0], [1.0, 2.0]])
    return _scatter(len(nodes), edges, local)


def lumped_weights(mesh):
    """Row sums of the unit mass matrix, i.e. int phi_i dx."""
    _, area = p1_gradients(mesh.nodes, mesh.triangles)
    w = np.zeros(len(mesh.nodes))
    np.add.at(w, mesh.triangles.ravel(), np.repeat(np.abs(area) / 3.0, 3))
    return w


def export_triplets(matrix, path):
    """Write a sparse matrix as 'row col value' lines (0-based, COO order)."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{i} {j} {float(v)!r}\n")


def read_triplets(path):
    with open(path) as fh:
        head = fh.readline().split()
        n, m = int(head[1]), int(head[2])
        data = np.loadtxt(fh, ndmin=2)
    if data.size == 0:
        return sp.csr_matrix((n, m))
    return sp.coo_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))),
                         shape=(n, m)).tocsr()


# ---------------------------------------------------------------------------
# constraints

@dataclass
class ConstrainedSystem:
    """A reduced SPD system together with the map back to mesh dofs.

    ``prolong`` (n_full x n_red) expands reduced dofs to mesh dofs; the
    reduced matrix is ``prolong.T @ full @ prolong``.  With ``mean_weights``
    set, the system carries a bordered zero-mean row ``w . u = 0``.
    """

    matrix: sp.csr_matrix
    prolong: sp.csr_matrix
    full: sp.csr_matrix
    modes: tuple
    mean_weights: np.ndarray | None = None
    fixed: np.ndarray | None = None
    fixed_values: np.ndarray | None = None

    @property
    def n_full(self):
        return self.prolong.shape[0]

    def reduce(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if self.fixed_values is not None:
            g = np.zeros(self.n_full)
            g[self.fixed] = self.fixed_values
            rhs = rhs - self.full @ g
        return self.prolong.T @ rhs

    def expand(self, x):
        u = self.prolong @ x
        if self.fixed_values is not None:
            u[self.fixed] = self.fixed_values
        return u


def periodic_prolongation(n_full, pairs):
    """Columns = master dofs; slave rows copy their master's column."""
    master = np.arange(n_full)
    if len(pairs):
        master[pairs[:, 0]] = pairs[:, 1]
        master = master[master]  # resolve chains
    keep = np.unique(master)
    col_of = np.full(n_full, -1)
    col_of[keep] = np.arange(len(keep))
    return sp.csr_matrix((np.ones(n_full), (np.arange(n_full), col_of[master])),
                         shape=(n_full, len(keep)))


def apply_constraints(matrix, modes, mesh, dirichlet_values=None):
    """Reduce ``matrix`` by periodic folding, Dirichlet elimination and/or a
    zero-mean border.  ``modes`` is a string or an iterable of
    {'periodic', 'dirichlet', 'zero_mean'}."""
    modes = (modes,) if isinstance(modes, str) else tuple(modes)
    bad = set(modes) - {"periodic", "dirichlet", "zero_mean"}
    if bad:
        raise ConstraintError(f"unknown constraint modes {sorted(bad)}")
    A = sp.csr_matrix(matrix)
    n = A.shape[0]
    pairs = getattr(mesh, "periodic_pairs", np.zeros((0, 2), int))
    dn = getattr(mesh, "dirichlet_nodes", None)
    if "periodic" in modes and len(pairs) == 0:
        raise ConstraintError("mesh carries no periodic pairs")
    if "dirichlet" in modes and dn is None:
        raise ConstraintError("mesh carries no Dirichlet nodes")
    if "periodic" in modes and "dirichlet" in modes:
        clash = np.intersect1d(np.unique(pairs), dn)
        if len(clash):
            raise ConstraintError(f"{len(clash)} dofs are both periodic and Dirichlet")
    if "zero_mean" in modes and "dirichlet" in modes:
        raise ConstraintError("zero-mean and Dirichlet constraints conflict on the boundary dofs")

    fixed = vals = None
    if "periodic" in modes:
        P = periodic_prolongation(n, pairs)
    elif "dirichlet" in modes:
        fixed = np.asarray(dn, dtype=np.int64)
        free = np.setdiff1d(np.arange(n), fixed)
        P = sp.csr_matrix((np.ones(len(free)), (free, np.arange(len(free)))), shape=(n, len(free)))
        if dirichlet_values is not None:
            vals = np.broadcast_to(np.asarray(dirichlet_values, float), fixed.shape).copy()
    else:
        P = sp.identity(n, format="csr")
    R = (P.T @ A @ P).tocsr()
    w = None
    if "zero_mean" in modes:
        w = P.T @ lumped_weights(mesh)
    return ConstrainedSystem(matrix=R, prolong=P.tocsr(), full=A, modes=modes,
                             mean_weights=w, fixed=fixed, fixed_values=vals)


# ---------------------------------------------------------------------------
# solver

def default_maxiter(n):
    return int(20 * np.sqrt(n) + 1000)


def amg_preconditioner(matrix):
    """One classical (Ruge-Stuben) AMG V-cycle as a preconditioner callable.

    The coarsening is deterministic, so repeated runs give identical iterates.
    """
    import pyamg

    ml = pyamg.ruge_stuben_solver(sp.csr_matrix(matrix))
    return lambda r: ml.solve(r, tol=1e-30, maxiter=1, cycle="V")


def pcg(A, b, x0=None, rel_tol=1e-10, maxiter=None, precond=None, project=None):
    """Preconditioned conjugate gradients for SPD (or consistent PSD) systems.

    ``precond`` maps a residual to a preconditioned residual (Jacobi by
    default); ``project`` removes kernel components from the residual.
    Returns ``(x, residual_history)``; raises :class:`SolverError`.
    """
    n = len(b)
    maxiter = default_maxiter(n) if maxiter is None else maxiter
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), [0.0]
    if precond is None:
        d = A.diagonal()
        if np.any(d <= 0):
            raise SolverError("nonpositive diagonal; matrix is not SPD")
        dinv = 1.0 / d
        precond = lambda r: dinv * r  # noqa: E731
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    if project is not None:
        r = project(r)
    hist = [np.linalg.norm(r) / bnorm]
    if hist[-1] <= rel_tol:
        return x, hist
    z = precond(r)
    p = z.copy()
    rz = r @ z
    for _ in range(maxiter):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverError("matrix is not positive definite on the Krylov space", hist)
        a = rz / pAp
        x += a * p
        r -= a * Ap
        if project is not None:
            r = project(r)
        hist.append(np.linalg.norm(r) / bnorm)
        if hist[-1] <= rel_tol:
            return x, hist
        z = precond(r)
        rz_new = r @ z
        p *= rz_new / rz
        p += z
        rz = rz_new
    raise SolverError(f"PCG did not converge in {maxiter} iterations "
                      f"(relative residual {hist[-1]:.3e})", hist)


@dataclass
class SolveInfo:
    iterations: int
    residuals: list
    multiplier: float = 0.0


def solve_spd(system, rhs, rel_tol=1e-10, x0=None, maxiter=None, precond=None,
              return_info=False):
    """Solve ``system u = rhs`` by PCG.

    ``system`` is either a sparse SPD matrix or a :class:`ConstrainedSystem`;
    in the latter case ``rhs`` and ``x0`` live on the mesh dofs and the
    returned vector is expanded back to them.  For zero-mean systems the
    bordered problem is solved by taking the multiplier from the constant
    mode, running PCG on the consistent singular system and shifting the
    result onto the constraint.
    """
    if not isinstance(system, ConstrainedSystem):
        A = sp.csr_matrix(system)
        x, hist = pcg(A, np.asarray(rhs, float), x0, rel_tol, maxiter, precond)
        info = SolveInfo(len(hist) - 1, hist)
        return (x, info) if return_info else x

    A = system.matrix
    b = system.reduce(rhs)
    xr0 = None
    if x0 is not None:
        xr0 = system.prolong.T @ np.asarray(x0, float)
        xr0 /= np.asarray(system.prolong.sum(axis=0)).ravel()
    mu = 0.0
    project = None
    if system.mean_weights is not None:
        w = system.mean_weights
        ones = np.ones(len(b))
        mu = float(b.sum() / w.sum())
        b = b - mu * w
        b -= b.mean()
        project = lambda r: r - r.mean()  # noqa: E731
    x, hist = pcg(A, b, xr0, rel_tol, maxiter, precond, project)
    if system.mean_weights is not None:
        x = x - (w @ x) / (w @ ones)
    u = system.expand(x)
    info = SolveInfo(len(hist) - 1, hist, mu)
    return (u, info) if return_info else u
