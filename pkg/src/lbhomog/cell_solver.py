"""Cell problems on the periodic unit cell and the effective tensor.

The first correctors chi_h (h = 1, 2) solve, for every periodic test v,

    int_Y lam grad chi_h . grad v + beta int_G gradB chi_h . gradB v
        = int_Y lam e_h . grad v + beta int_G gradB y_h . gradB v,

with zero volume mean.  The effective tensor lam0 I + A_hom is computed as
the quadratic form of the same bilinear form on chi_h - y_h (exactly
symmetric, positive definite by construction); the surface-integral
expression is kept as an independent cross-check.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CompatibilityError
from .fem import (CoefficientSet, apply_constraints, assemble_bulk_stiffness,
                  assemble_surface_stiffness, lumped_weights, p1_gradients, solve_spd)
from .meshing import CellMesh, phase_volumes, interface_length

EIG_REL_TOL = 1e-6


@dataclass
class CorrectorSet:
    chi: np.ndarray                     # (2, n_nodes)
    A_total: np.ndarray                 # lam0 I + A_hom, energy formula
    A_hom: np.ndarray
    lambda_avg: float
    gamma: float
    A_direct: np.ndarray | None = None
    chi2: dict | None = None            # (i, j) -> (n_nodes,)
    residuals: dict = field(default_factory=dict)

    def save(self, directory, digest=None):
        os.makedirs(directory, exist_ok=True)
        arrays = {"chi": self.chi}
        if self.chi2:
            for (i, j), v in sorted(self.chi2.items()):
                arrays[f"chi2_{i}{j}"] = v
        np.savez(os.path.join(directory, "correctors.npz"), **arrays)
        meta = {
            "config_digest": digest,
            "A_total": self.A_total.tolist(),
            "A_hom": self.A_hom.tolist(),
            "A_direct": None if self.A_direct is None else self.A_direct.tolist(),
            "lambda_avg": self.lambda_avg,
            "gamma": self.gamma,
            "residuals": self.residuals,
        }
        with open(os.path.join(directory, "correctors.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "correctors.json")) as fh:
            meta = json.load(fh)
        with np.load(os.path.join(directory, "correctors.npz")) as z:
            chi = z["chi"]
            chi2 = {(int(k[5]), int(k[6])): z[k] for k in z.files if k.startswith("chi2_")}
        return cls(chi=chi, A_total=np.array(meta["A_total"]), A_hom=np.array(meta["A_hom"]),
                   lambda_avg=meta["lambda_avg"], gamma=meta["gamma"],
                   A_direct=None if meta["A_direct"] is None else np.array(meta["A_direct"]),
                   chi2=chi2 or None, residuals=meta["residuals"])


def cell_operator(cell: CellMesh, coeffs: CoefficientSet):
    """Full (unconstrained) matrix of the cell bilinear form."""
    K = assemble_bulk_stiffness(cell, coeffs)
    if coeffs.beta > 0 and len(cell.interface_edges):
        K = K + assemble_surface_stiffness(cell.nodes, cell.interface_edges, coeffs.beta)
    return K.tocsr()


def solve_corrector(cell: CellMesh, coeffs: CoefficientSet, h: int, rel_tol=1e-10,
                    operator=None, system=None):
    """Periodic zero-mean corrector chi_h for direction h in {1, 2}."""
    if h not in (1, 2):
        raise ValueError("direction index h must be 1 or 2")
    K = cell_operator(cell, coeffs) if operator is None else operator
    if system is None:
        system = apply_constraints(K, ("periodic", "zero_mean"), cell)
    rhs = K @ cell.nodes[:, h - 1]
    return solve_spd(system, rhs, rel_tol=rel_tol)


def cell_measures(cell: CellMesh):
    vin, vout = phase_volumes(cell)
    return {"interior_volume": vin, "exterior_volume": vout,
            "interface_length": interface_length(cell)}


def homogenized_tensor_energy(chi, cell: CellMesh, coeffs: CoefficientSet, operator=None):
    """(lam0 I + A_hom)_{hj} = a(chi_h - y_h, chi_j - y_j)."""
    K = cell_operator(cell, coeffs) if operator is None else operator
    Z = np.asarray(chi).T - cell.nodes
    B = Z.T @ (K @ Z)
    return 0.5 * (B + B.T)


def _edge_arc_data(cell, coeffs, order=3):
    e = cell.interface_edges
    pts, wts, s = cell.shape.edge_quadrature(cell.nodes[e[:, 0]], cell.nodes[e[:, 1]], order)
    flat = pts.reshape(-1, 2)
    nu = cell.shape.unit_normal(flat).reshape(pts.shape)
    tau = np.stack([-nu[..., 1], nu[..., 0]], axis=-1)
    curv = cell.shape.curvature(flat).reshape(s.shape)
    L = wts.sum(axis=1)
    return e, pts, wts, s, nu, tau, curv, L


def homogenized_tensor_direct(chi, cell: CellMesh, coeffs: CoefficientSet, order=3):
    """lam0 I + A_hom from surface integrals over the analytic interface:

        A_hom_ij = int_G [lam] nu_i chi_j + beta int_G (delta_ij - nu_i nu_j)
                   - beta int_G (gradB chi_j)_i

    with [lam] = lam_out - lam_int and lam0 from the exact phase volumes.
    The P1 trace of chi is interpolated linearly along each arc.
    """
    chi = np.asarray(chi)
    shape = cell.shape
    lam0 = coeffs.lam_int * shape.interior_area + coeffs.lam_out * shape.exterior_area
    A = lam0 * np.eye(2)
    if len(cell.interface_edges) == 0:
        return A
    e, pts, wts, s, nu, tau, curv, L = _edge_arc_data(cell, coeffs, order)
    ca, cb = chi[:, e[:, 0]], chi[:, e[:, 1]]                       # (2, E)
    chi_q = ca[:, :, None] * (1 - s)[None] + cb[:, :, None] * s[None]  # (2, E, q)
    dchi = (cb - ca) / L[None, :]                                      # (2, E)
    jump = coeffs.lam_jump
    for i in range(2):
        for j in range(2):
            t1 = jump * np.sum(wts * nu[..., i] * chi_q[j])
            t2 = coeffs.beta * np.sum(wts * ((i == j) - nu[..., i] * nu[..., j]))
            t3 = coeffs.beta * np.sum(wts * dchi[j][:, None] * tau[..., i])
            A[i, j] += t1 + t2 - t3
    return A


def gamma_coefficient(coeffs: CoefficientSet, measures: dict):
    """gamma = sigma_int |E_int| + sigma_out |E_out| + alpha |Gamma|."""
    return (coeffs.sigma_int * measures["interior_volume"]
            + coeffs.sigma_out * measures["exterior_volume"]
            + coeffs.alpha * measures["interface_length"])


def spd_check(A_total, coeffs: CoefficientSet):
    """Symmetry and the lower eigenvalue bound min(lam_int, lam_out)."""
    A = np.asarray(A_total, dtype=float)
    asym = float(np.abs(A - A.T).max())
    eig = np.linalg.eigvalsh(0.5 * (A + A.T))
    bound = coeffs.lam_min * (1 - EIG_REL_TOL)
    return {"asymmetry": asym, "eigenvalues": eig.tolist(), "eigmin": float(eig[0]),
            "bound": bound, "passed": bool(eig[0] >= bound and asym <= 1e-12)}


def compute_correctors(cell: CellMesh, coeffs: CoefficientSet, rel_tol=1e-10,
                       second=False) -> CorrectorSet:
    K = cell_operator(cell, coeffs)
    system = apply_constraints(K, ("periodic", "zero_mean"), cell)
    chi = np.vstack([solve_corrector(cell, coeffs, h, rel_tol, K, system) for h in (1, 2)])
    A = homogenized_tensor_energy(chi, cell, coeffs, K)
    meas = cell_measures(cell)
    lam0 = coeffs.lam_int * meas["interior_volume"] + coeffs.lam_out * meas["exterior_volume"]
    gamma = gamma_coefficient(coeffs, meas)
    A_dir = homogenized_tensor_direct(chi, cell, coeffs)
    w = lumped_weights(cell)
    res = {"chi_means": [float(w @ c) for c in chi],
           "formula_discrepancy": float(np.abs(A_dir - A).max()),
           "measures": meas, "spd": spd_check(A, coeffs)}
    cs = CorrectorSet(chi=chi, A_total=A, A_hom=A - lam0 * np.eye(2), lambda_avg=lam0,
                      gamma=gamma, A_direct=A_dir, residuals=res)
    if second:
        cs.chi2 = {}
        comp = {}
        for i in (1, 2):
            for j in (1, 2):
                v, r = solve_second_corrector(i, j, cs, cell, coeffs, operator=K, system=system,
                                              rel_tol=rel_tol)
                cs.chi2[(i, j)] = v
                comp[f"{i}{j}"] = r
        res["compatibility"] = comp
    return cs


# ---------------------------------------------------------------------------
# second corrector

def second_corrector_data(i, j, correctors: CorrectorSet, cell: CellMesh,
                          coeffs: CoefficientSet, order=3):
    """Bulk source F (per triangle) and surface source G (per arc quadrature point).

    Both are symmetrised in (i, j); only the symmetric part enters
    u2 = chi2_ij d2u0/dxi dxj.  ``a_ij`` is the full effective tensor
    lam0 delta_ij + A_hom_ij.
    """
    i0, j0 = i - 1, j - 1
    chi = correctors.chi
    A = correctors.A_total
    g = correctors.gamma
    d = 1.0 if i == j else 0.0
    grads, _ = p1_gradients(cell.nodes, cell.triangles)
    gchi = np.einsum("tkd,htk->htd", grads, chi[:, cell.triangles])   # (2, M, 2)
    lam = coeffs.lam_of(cell.phase)
    sig = coeffs.sigma_of(cell.phase)
    F = (-(sig / g) * A[i0, j0] + lam * d
         - lam * (gchi[i0, :, j0] + gchi[j0, :, i0]))

    e, pts, wts, s, nu, tau, curv, L = _edge_arc_data(cell, coeffs, order)
    ca, cb = chi[:, e[:, 0]], chi[:, e[:, 1]]
    chi_q = ca[:, :, None] * (1 - s)[None] + cb[:, :, None] * s[None]
    dchi = (cb - ca) / L[None, :]
    gB = dchi[:, :, None, None] * tau[None]                     # (2, E, q, 2)
    b = coeffs.beta
    G = ((coeffs.alpha / g) * A[i0, j0]
         - b * (d - nu[..., i0] * nu[..., j0])
         + b * (gB[j0][..., i0] + gB[i0][..., j0])
         - 0.5 * b * curv * (nu[..., j0] * chi_q[i0] + nu[..., i0] * chi_q[j0])
         + 0.5 * coeffs.lam_jump * (nu[..., i0] * chi_q[j0] + nu[..., j0] * chi_q[i0]))
    return F, (e, wts, s, G)


def second_corrector_rhs(i, j, correctors, cell, coeffs, order=3):
    """Load vector of int_Y F v - int_G G v and the compatibility residual."""
    F, (e, wts, s, G) = second_corrector_data(i, j, correctors, cell, coeffs, order)
    _, area = p1_gradients(cell.nodes, cell.triangles)
    n = len(cell.nodes)
    b = np.zeros(n)
    np.add.at(b, cell.triangles.ravel(), np.repeat(F * np.abs(area) / 3.0, 3))
    gw = G * wts
    np.add.at(b, e[:, 0], -(gw * (1 - s)).sum(axis=1))
    np.add.at(b, e[:, 1], -(gw * s).sum(axis=1))
    intF = float(np.sum(F * np.abs(area)))
    intG = float(np.sum(gw))
    return b, {"int_F": intF, "int_G": intG, "residual": abs(intF - intG)}


def compatibility_tolerance(cell, coeffs, correctors):
    """Scale of the O(h^2) discretisation residual expected for |int F - int G|."""
    scale = max(coeffs.lam_int, coeffs.lam_out, coeffs.beta, float(np.abs(correctors.A_total).max()))
    return cell.h ** 2 * scale


def solve_second_corrector(i, j, correctors: CorrectorSet, cell: CellMesh,
                           coeffs: CoefficientSet, rel_tol=1e-10, operator=None,
                           system=None, check=True):
    """Periodic zero-mean chi2_ij; returns ``(chi2_ij, compatibility_report)``.

    Raises :class:`CompatibilityError` when |int F - int G| exceeds ten times
    the discretisation tolerance, which signals inconsistent tensor / gamma
    inputs rather than discretisation error.
    """
    K = cell_operator(cell, coeffs) if operator is None else operator
    if system is None:
        system = apply_constraints(K, ("periodic", "zero_mean"), cell)
    b, rep = second_corrector_rhs(i, j, correctors, cell, coeffs)
    tol = compatibility_tolerance(cell, coeffs, correctors)
    rep["tolerance"] = tol
    if check and rep["residual"] > 10 * tol:
        raise CompatibilityError(
            f"int F - int G = {rep['int_F'] - rep['int_G']:.3e} for ({i},{j}) exceeds "
            f"10 x {tol:.3e}; tensor and gamma inputs are inconsistent")
    u, info = solve_spd(system, b, rel_tol=rel_tol, return_info=True)
    rep["multiplier"] = info.multiplier
    return u, rep


def beta_probe(cell: CellMesh, coeffs: CoefficientSet, betas=(1e-8, 0.0), rel_tol=1e-10):
    """Recompute the tensor with tiny / vanishing beta and check positivity."""
    out = []
    for b in betas:
        c = coeffs.replace(beta=b)
        K = cell_operator(cell, c)
        system = apply_constraints(K, ("periodic", "zero_mean"), cell)
        chi = np.vstack([solve_corrector(cell, c, h, rel_tol, K, system) for h in (1, 2)])
        A = homogenized_tensor_energy(chi, cell, c, K)
        rep = spd_check(A, c)
        rep["beta"] = b
        rep["A_total"] = A.tolist()
        out.append(rep)
    return out
