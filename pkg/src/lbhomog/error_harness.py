"""First-order corrector, boundary cut-off, discrete error norms and rate fits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import LBHomogError
from .fem import assemble_bulk_mass, assemble_bulk_stiffness, p1_gradients

SNAP_TOL = 1e-9
LOCATE_TOL = 1e-10


class PointLocationError(LBHomogError):
    pass


# ---------------------------------------------------------------------------
# cell field evaluation

class CellFieldEvaluator:
    """P1 fields on the unit cell evaluated at arbitrary (periodically wrapped) points.

    Triangles are bucketed in a uniform hash grid by bounding box.  Points
    that hit a mesh node (barycentric coordinate within ``SNAP_TOL`` of 1)
    return the nodal value exactly.
    """

    def __init__(self, cell, values):
        self.cell = cell
        self.values = np.atleast_2d(np.asarray(values, dtype=float))   # (ncomp, N)
        nodes, tri = cell.nodes, cell.triangles
        grads, area = p1_gradients(nodes, tri)
        self.grads = np.einsum("tkd,ctk->ctd", grads, self.values[:, tri])  # (ncomp, M, 2)
        self.g = max(1, int(math.sqrt(len(tri) / 2.0)))
        P = nodes[tri]
        lo = np.floor(P.min(axis=1) * self.g).astype(int).clip(0, self.g - 1)
        hi = np.floor(P.max(axis=1) * self.g).astype(int).clip(0, self.g - 1)
        bins, owners = [], []
        for t in range(len(tri)):
            for i in range(lo[t, 0], hi[t, 0] + 1):
                for j in range(lo[t, 1], hi[t, 1] + 1):
                    bins.append(i * self.g + j)
                    owners.append(t)
        bins = np.array(bins)
        owners = np.array(owners)
        order = np.argsort(bins, kind="stable")
        self._owners = owners[order]
        self._start = np.searchsorted(bins[order], np.arange(self.g * self.g + 1))
        # affine maps to barycentric coordinates
        x0 = P[:, 0, :]
        J = np.stack([P[:, 1, :] - x0, P[:, 2, :] - x0], axis=2)          # (M, 2, 2)
        self._x0 = x0
        self._Jinv = np.linalg.inv(J)

    @staticmethod
    def wrap(points, eps=1.0):
        y = np.mod(np.asarray(points, dtype=float) / eps, 1.0)
        y[y >= 1.0] = 0.0
        return y

    def locate(self, y):
        """Triangle index and barycentric coordinates of points in [0, 1)^2."""
        y = np.atleast_2d(y)
        b = np.floor(y * self.g).astype(int).clip(0, self.g - 1)
        bid = b[:, 0] * self.g + b[:, 1]
        start, count = self._start[bid], self._start[bid + 1] - self._start[bid]
        tri = np.full(len(y), -1)
        best = np.full(len(y), -np.inf)
        lam = np.zeros((len(y), 3))
        for s in range(int(count.max()) if len(y) else 0):
            act = np.nonzero((count > s) & (best < -LOCATE_TOL))[0]
            if len(act) == 0:
                break
            t = self._owners[start[act] + s]
            rel = y[act] - self._x0[t]
            l12 = np.einsum("tij,tj->ti", self._Jinv[t], rel)
            l = np.column_stack([1 - l12.sum(1), l12])
            m = l.min(axis=1)
            better = m > best[act]
            idx = act[better]
            tri[idx], best[idx], lam[idx] = t[better], m[better], l[better]
        if np.any(best < -1e-8):
            raise PointLocationError(f"{int(np.sum(best < -1e-8))} points not located in the cell mesh")
        return tri, lam

    def evaluate(self, points, eps=1.0):
        """Values (n_points, ncomp) at y = points/eps mod 1."""
        y = self.wrap(points, eps)
        tri, lam = self.locate(y)
        vid = self.cell.triangles[tri]                              # (n, 3)
        vals = np.einsum("nk,cnk->nc", lam, self.values[:, vid])
        snap = lam.max(axis=1) >= 1 - SNAP_TOL
        if np.any(snap):
            k = vid[snap, lam[snap].argmax(axis=1)]
            vals[snap] = self.values[:, k].T
        return vals

    def gradient(self, points, eps=1.0):
        """Cell-variable gradients (n_points, ncomp, 2), constant per triangle."""
        tri, _ = self.locate(self.wrap(points, eps))
        return np.transpose(self.grads[:, tri, :], (1, 0, 2))


# ---------------------------------------------------------------------------
# gradient recovery and composite fields

def element_gradient_operators(mesh):
    """Sparse (M x N) maps u -> d_x u and u -> d_y u per triangle, plus areas."""
    grads, area = p1_gradients(mesh.nodes, mesh.triangles)
    M, N = len(mesh.triangles), len(mesh.nodes)
    rows = np.repeat(np.arange(M), 3)
    cols = mesh.triangles.ravel()
    Ex = sp.csr_matrix((grads[:, :, 0].ravel(), (rows, cols)), shape=(M, N))
    Ey = sp.csr_matrix((grads[:, :, 1].ravel(), (rows, cols)), shape=(M, N))
    return Ex, Ey, np.abs(area)


def recovery_operator(mesh):
    """Sparse (N x M) area-weighted averaging of element values onto nodes."""
    _, _, area = element_gradient_operators(mesh)
    M, N = len(mesh.triangles), len(mesh.nodes)
    rows = mesh.triangles.ravel()
    cols = np.repeat(np.arange(M), 3)
    A = sp.csr_matrix((np.repeat(area, 3), (rows, cols)), shape=(N, M))
    s = np.asarray(A.sum(axis=1)).ravel()
    return sp.diags(1.0 / s) @ A


class GradientRecovery:
    """Precomputed operators for repeated recovery on one mesh."""

    def __init__(self, mesh):
        self.Ex, self.Ey, self.area = element_gradient_operators(mesh)
        R = recovery_operator(mesh)
        self.Rx = (R @ self.Ex).tocsr()
        self.Ry = (R @ self.Ey).tocsr()

    def __call__(self, u):
        return np.column_stack([self.Rx @ u, self.Ry @ u])


def recovered_gradient(mesh, u):
    """Area-weighted average of adjacent element gradients at every node."""
    return GradientRecovery(mesh)(np.asarray(u, dtype=float))


def corrector_values(u0, grad_u0, chi_nodes, eps):
    """Nodal u0 - eps chi(x/eps) . grad u0."""
    return u0 - eps * np.einsum("nh,nh->n", chi_nodes, grad_u0)


def build_corrector_field(u0, mesh, evaluator, eps, recovery=None, chi_nodes=None):
    """Nodal values of u0 + eps u1 with u1 = -chi(x/eps) . grad u0."""
    G = (recovery or GradientRecovery(mesh))(np.asarray(u0, dtype=float))
    if chi_nodes is None:
        chi_nodes = evaluator.evaluate(mesh.nodes, eps)
    return corrector_values(u0, G, chi_nodes, eps)


@dataclass
class CompositeData:
    """Cell data pulled back to the domain mesh once per eps."""

    chi_nodes: np.ndarray        # (N, 2)
    chi_centroid: np.ndarray     # (M, 2)
    dchi: np.ndarray             # (M, 2, 2): [h, d] = d chi_h / d y_d
    eps: float

    @classmethod
    def build(cls, mesh, evaluator, eps):
        chi_nodes = evaluator.evaluate(mesh.nodes, eps)
        cent = chi_nodes[mesh.triangles].mean(axis=1)
        ct = getattr(mesh, "cell_triangle_of_triangle", None)
        if ct is not None and len(ct) == len(mesh.triangles) and evaluator.cell.shape == mesh.shape \
                and len(evaluator.cell.triangles) > int(ct.max(initial=0)):
            dchi = np.transpose(evaluator.grads[:, ct, :], (1, 0, 2))
        else:
            dchi = evaluator.gradient(mesh.nodes[mesh.triangles].mean(axis=1), eps)
        return cls(chi_nodes=chi_nodes, chi_centroid=cent, dchi=dchi, eps=eps)


def composite_gradient(u0, rec: GradientRecovery, cdata: CompositeData, mesh):
    """Element-wise chain-rule gradient of u0 + eps u1.

    grad u0 - (grad_y chi_h)(x/eps) dh u0 - eps chi_h(x/eps) grad(dh u0), with
    dh u0 from gradient recovery and its gradient taken element-wise.
    Returns ``(grad (M, 2), second_order_term (M, 2))``.
    """
    G = rec(u0)
    gu = np.column_stack([rec.Ex @ u0, rec.Ey @ u0])
    Gbar = G[mesh.triangles].mean(axis=1)                                     # (M, 2)
    H = np.stack([np.column_stack([rec.Ex @ G[:, h], rec.Ey @ G[:, h]]) for h in (0, 1)], axis=1)
    first = np.einsum("mhd,mh->md", cdata.dchi, Gbar)
    second = cdata.eps * np.einsum("mh,mhd->md", cdata.chi_centroid, H)
    return gu - first - second, second


# ---------------------------------------------------------------------------
# cut-off

@dataclass
class CutoffField:
    """phi = 1 within gamma0 eps / 2 of the boundary, 0 beyond gamma0 eps."""

    values: np.ndarray
    eps: float
    gamma0: float

    @classmethod
    def build(cls, mesh, eps, gamma0):
        x = mesh.nodes
        d = np.minimum.reduce([x[:, 0], x[:, 1], 1 - x[:, 0], 1 - x[:, 1]])
        if gamma0 <= 0:
            return cls(np.zeros(len(x)), eps, gamma0)
        w = gamma0 * eps
        phi = np.clip((w - d) / (0.5 * w), 0.0, 1.0)
        return cls(phi, eps, gamma0)

    def max_gradient(self, mesh):
        Ex, Ey, _ = element_gradient_operators(mesh)
        return float(np.hypot(Ex @ self.values, Ey @ self.values).max())


def apply_cutoff(u0, corrector, cutoff: CutoffField):
    """u0 + eps u1 (1 - phi) from nodal u0 and nodal u0 + eps u1."""
    return u0 + (1.0 - cutoff.values) * (corrector - u0)


# ---------------------------------------------------------------------------
# norms

def trapezoid_weights(nsteps, dt):
    w = np.full(nsteps + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


class ErrorAccumulator:
    """Running space-time sums for the error norms of one eps.

    Norms are sqrt(sum_k w_k q_k) with trapezoidal weights w_k and
    q_k = e^T M e (+ e^T K1 e for H1), M and K1 the unit-coefficient mass and
    stiffness matrices.
    """

    COLUMNS = ("err_h1_corrected", "err_l2_plain", "err_l2_corrected",
               "err_h1_cutoff", "err_h1_chain", "err_h1_plain")

    def __init__(self, mesh, eps, dt, nsteps, cdata: CompositeData, cutoff=None,
                 chain=True):
        self.mesh, self.eps = mesh, eps
        self.M = assemble_bulk_mass(mesh).tocsr()
        self.K1 = assemble_bulk_stiffness(mesh).tocsr()
        self.rec = GradientRecovery(mesh)
        self.cdata = cdata
        self.cutoff = cutoff
        self.chain = chain
        self.w = trapezoid_weights(nsteps, dt)
        self.sums = {c: 0.0 for c in self.COLUMNS}
        self.second_order = 0.0
        self.cutoff_boundary_max = 0.0
        self.steps = 0

    def _m(self, e):
        return float(e @ (self.M @ e))

    def _k(self, e):
        return float(e @ (self.K1 @ e))

    def push(self, k, u_eps, u0):
        w = self.w[k]
        G = self.rec(u0)
        corr = corrector_values(u0, G, self.cdata.chi_nodes, self.eps)
        e = u_eps - corr
        me = self._m(e)
        p = u_eps - u0
        mp = self._m(p)
        s = self.sums
        s["err_h1_corrected"] += w * (me + self._k(e))
        s["err_l2_corrected"] += w * me
        s["err_l2_plain"] += w * mp
        s["err_h1_plain"] += w * (mp + self._k(p))
        if self.cutoff is not None:
            cc = apply_cutoff(u0, corr, self.cutoff)
            dn = getattr(self.mesh, "dirichlet_nodes", None)
            if dn is not None and len(dn):
                self.cutoff_boundary_max = max(self.cutoff_boundary_max, float(np.abs(cc[dn]).max()))
            ec = u_eps - cc
            s["err_h1_cutoff"] += w * (self._m(ec) + self._k(ec))
        if self.chain:
            g, second = composite_gradient(u0, self.rec, self.cdata, self.mesh)
            ge = np.column_stack([self.rec.Ex @ u_eps, self.rec.Ey @ u_eps]) - g
            a = self.rec.area
            s["err_h1_chain"] += w * (me + float(a @ (ge ** 2).sum(axis=1)))
            self.second_order += w * float(a @ (second ** 2).sum(axis=1))
        self.steps += 1

    def result(self):
        if self.steps != len(self.w):
            raise LBHomogError(f"accumulated {self.steps} of {len(self.w)} time levels")
        out = {c: math.sqrt(max(v, 0.0)) for c, v in self.sums.items()}
        if self.cutoff is None:
            out["err_h1_cutoff"] = float("nan")
        if not self.chain:
            out["err_h1_chain"] = float("nan")
        out["second_order_term"] = math.sqrt(self.second_order)
        out["cutoff_boundary_max"] = self.cutoff_boundary_max
        return out


def error_norms(traj_micro, traj_macro, evaluator, eps, cutoff=None, chain=False):
    """(err_H1, err_L2_plain, err_L2_corrected) for two stored trajectories."""
    if (len(traj_micro.times) != len(traj_macro.times)
            or np.abs(np.asarray(traj_micro.times) - np.asarray(traj_macro.times)).max() > 1e-12
            or len(traj_micro.mesh.nodes) != len(traj_macro.mesh.nodes)):
        raise LBHomogError("micro and macro trajectories do not share mesh and time grid")
    nsteps = len(traj_micro.times) - 1
    missing = [k for k in range(nsteps + 1)
               if k not in traj_micro.snapshots or k not in traj_macro.snapshots]
    if missing:
        raise LBHomogError("error norms need every time level (snapshot stride 1)")
    mesh = traj_micro.mesh
    cdata = CompositeData.build(mesh, evaluator, eps)
    acc = ErrorAccumulator(mesh, eps, traj_micro.dt, nsteps, cdata, cutoff, chain)
    for k in range(nsteps + 1):
        acc.push(k, traj_micro.snapshots[k], traj_macro.snapshots[k])
    r = acc.result()
    return r["err_h1_corrected"], r["err_l2_plain"], r["err_l2_corrected"]


# ---------------------------------------------------------------------------
# rates and reports

def rate_fit(rows):
    """Least-squares fit log err = slope log eps + log C; returns (slope, C)."""
    rows = list(rows)
    if len(rows) < 3:
        raise ValueError(f"rate fit needs at least 3 rows, got {len(rows)}")
    eps = np.array([r[0] for r in rows], dtype=float)
    err = np.array([r[1] for r in rows], dtype=float)
    if np.any(err <= 0) or np.any(eps <= 0):
        raise ValueError("rate fit needs positive eps and error values")
    slope, icpt = np.polyfit(np.log(eps), np.log(err), 1)
    return float(slope), float(math.exp(icpt))


CSV_COLUMNS = ("eps", "err_h1_corrected", "err_l2_plain", "err_l2_corrected", "slope_running")
FIT_COLUMNS = ("err_h1_corrected", "err_l2_plain", "err_l2_corrected")


@dataclass
class ConvergenceReport:
    rows: list
    digest: str
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            if r.get("digest", self.digest) != self.digest:
                raise LBHomogError(f"row for eps={r['eps']} carries digest {r['digest']}, "
                                   f"report digest is {self.digest}")
        self.rows = sorted(self.rows, key=lambda r: -r["eps"])
        eps = [r["eps"] for r in self.rows]
        if len(set(eps)) != len(eps):
            raise LBHomogError("duplicate eps values in report")

    @property
    def degenerate(self):
        return bool(self.rows) and all(r.get("degenerate", False) for r in self.rows)

    def running_slopes(self, column="err_h1_corrected"):
        out = [None]
        for a, b in zip(self.rows, self.rows[1:]):
            if a[column] > 0 and b[column] > 0:
                out.append(math.log(b[column] / a[column]) / math.log(b["eps"] / a["eps"]))
            else:
                out.append(None)
        return out

    def fits(self):
        res = {}
        if len(self.rows) < 3 or self.degenerate:
            return res
        for c in FIT_COLUMNS:
            try:
                s, C = rate_fit([(r["eps"], r[c]) for r in self.rows])
            except ValueError:
                continue
            res[c] = {"slope": s, "constant": C}
        return res

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_digest {self.digest}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS + ("energy_identity_residual",))
            for r, s in zip(self.rows, self.running_slopes()):
                w.writerow([repr(r["eps"])] + [repr(float(r[c])) for c in CSV_COLUMNS[1:4]]
                           + ["" if s is None else repr(s), repr(float(r.get("energy_identity_residual", 0.0)))])

    def summary(self):
        return {"config_digest": self.digest,
                "status": "degenerate" if self.degenerate else "fitted" if self.fits() else "insufficient",
                "fits": self.fits(), "rows": self.rows, **self.extra}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(_jsonable(self.summary()), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_svg(self, path, width=480, height=360):
        with open(path, "w") as fh:
            fh.write(loglog_svg(self.rows, self.digest, width, height))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def loglog_svg(rows, digest, width=480, height=360):
    """Self-contained log-log plot of the error columns with a slope 1/2 guide."""
    colors = {"err_h1_corrected": "#1f77b4", "err_l2_plain": "#d62728",
              "err_l2_corrected": "#2ca02c"}
    pts = [(r["eps"], r[c]) for r in rows for c in colors if r[c] > 0]
    m = 50
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f"<!-- config_digest {digest} -->",
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    if pts:
        lx = np.log10([p[0] for p in pts])
        ly = np.log10([p[1] for p in pts])
        x0, x1 = lx.min() - 0.1, lx.max() + 0.1
        y0, y1 = ly.min() - 0.2, ly.max() + 0.2

        def X(v):
            return m + (math.log10(v) - x0) / (x1 - x0) * (width - 2 * m)

        def Y(v):
            return height - m - (math.log10(v) - y0) / (y1 - y0) * (height - 2 * m)

        parts.append(f'<rect x="{m}" y="{m}" width="{width - 2 * m}" height="{height - 2 * m}" '
                     'fill="none" stroke="black"/>')
        for c, col in colors.items():
            xy = [(X(r["eps"]), Y(r[c])) for r in rows if r[c] > 0]
            if not xy:
                continue
            parts.append('<polyline fill="none" stroke="%s" points="%s"/>'
                         % (col, " ".join(f"{a:.2f},{b:.2f}" for a, b in xy)))
            parts += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="{col}"/>' for a, b in xy]
        # slope 1/2 reference through the first H1 point
        h1 = [(r["eps"], r["err_h1_corrected"]) for r in rows if r["err_h1_corrected"] > 0]
        if h1:
            e0, v0 = h1[0]
            e1 = min(r["eps"] for r in rows)
            parts.append(f'<line x1="{X(e0):.2f}" y1="{Y(v0):.2f}" x2="{X(e1):.2f}" '
                         f'y2="{Y(v0 * math.sqrt(e1 / e0)):.2f}" stroke="gray" stroke-dasharray="4,3"/>')
        legend = list(colors.items()) + [("slope 1/2", "gray")]
        for i, (c, col) in enumerate(legend):
            parts.append(f'<text x="{m + 8}" y="{m + 16 + 14 * i}" font-size="11" fill="{col}">{c}</text>')
        parts.append(f'<text x="{width / 2:.0f}" y="{height - 12}" font-size="12" '
                     'text-anchor="middle">eps (log)</text>')
        parts.append(f'<text x="14" y="{height / 2:.0f}" font-size="12" text-anchor="middle" '
                     f'transform="rotate(-90 14 {height / 2:.0f})">error (log)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
