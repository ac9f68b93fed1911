"""Interface-fitted triangulations of the unit cell and of the tiled domain.

Cell meshes are built from fixed nodes (uniformly spaced on the four cell
faces and on the interface) plus a hexagonal lattice of free nodes that is
relaxed by a few spring iterations and re-triangulated with Delaunay.
Matching face nodes make periodic pairing exact by construction, and the
interface chords are Gabriel edges, so every triangle lies in one phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from .errors import MeshError, MeshQualityError, TopologyError
from .geometry import (InclusionShape, PhaseLabel, StripeLaminate,
                       shape_from_description)

MERGE_TOL = 1e-9
ON_INTERFACE_TOL = 1e-10
MIN_ANGLE_DEG = 20.0
MAX_DIAMETER_FACTOR = 1.5

# internal node spacing relative to h_target; keeps max diameter <= 1.5 h
_SPACING = (0.85, 0.75, 0.65)
_RELAX_ITERS = 25


@dataclass
class CellMesh:
    """Phase-tagged triangulation of Y = (0,1)^2.

    ``faces`` maps 'left', 'right', 'bottom', 'top' to node indices sorted
    along the face (corners excluded) and 'corners' to [BL, BR, TL, TR].
    ``periodic_pairs`` rows are (slave, master) with slaves on the right/top
    faces and at the three non-origin corners.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    phase: np.ndarray
    interface_edges: np.ndarray
    edge_normals: np.ndarray
    periodic_pairs: np.ndarray
    faces: dict
    shape: object
    h: float

    @property
    def relaxed(self):
        return bool(getattr(self.shape, "relaxed", False))

    def master_map(self):
        """Node -> master node index (identity for non-slaves)."""
        m = np.arange(len(self.nodes))
        if len(self.periodic_pairs):
            m[self.periodic_pairs[:, 0]] = self.periodic_pairs[:, 1]
        return m


@dataclass
class DomainMesh:
    """Tiling of n x n scaled cell copies covering Omega = (0,1)^2."""

    nodes: np.ndarray
    triangles: np.ndarray
    phase: np.ndarray
    interface_edges: np.ndarray
    edge_normals: np.ndarray
    dirichlet_nodes: np.ndarray
    eps: float
    n: int
    cell_index_of_triangle: np.ndarray
    cell_triangle_of_triangle: np.ndarray
    shape: object = None
    h: float = 0.0
    periodic_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))


# ---------------------------------------------------------------------------
# small geometric helpers

def triangle_areas(nodes, triangles):
    a = nodes[triangles[:, 0]]
    b = nodes[triangles[:, 1]]
    c = nodes[triangles[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def triangle_angles(nodes, triangles):
    """Interior angles in degrees, shape (M, 3)."""
    p = nodes[triangles]
    out = np.empty((len(triangles), 3))
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        v = p[:, (i + 2) % 3] - p[:, i]
        cosang = (u * v).sum(1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        out[:, i] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return out


def max_diameter(nodes, triangles):
    p = nodes[triangles]
    return max(np.linalg.norm(p[:, i] - p[:, j], axis=1).max()
               for i, j in ((0, 1), (1, 2), (2, 0)))


def unique_edges(triangles):
    e = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def _orient_ccw(nodes, triangles):
    tri = triangles.copy()
    neg = triangle_areas(nodes, tri) < 0
    tri[neg] = tri[neg][:, [0, 2, 1]]
    return tri


def _edge_normals(nodes, edges):
    t = nodes[edges[:, 1]] - nodes[edges[:, 0]]
    L = np.linalg.norm(t, axis=1)
    if np.any(L <= 0.0):
        raise TopologyError("zero-length interface edge")
    return np.stack([t[:, 1], -t[:, 0]], axis=1) / L[:, None]


# ---------------------------------------------------------------------------
# cell meshes

def _face_nodes(m):
    s = np.arange(1, m) / m
    z = np.zeros_like(s)
    o = np.ones_like(s)
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    return corners, np.c_[z, s], np.c_[o, s], np.c_[s, z], np.c_[s, o]


def _face_index(nodes, m_left, m_bottom, offset_corners):
    """Index bookkeeping for nodes laid out as corners|left|right|bottom|top."""
    nl, nb = m_left, m_bottom
    i0 = offset_corners
    left = np.arange(i0 + 4, i0 + 4 + nl)
    right = left + nl
    bottom = np.arange(i0 + 4 + 2 * nl, i0 + 4 + 2 * nl + nb)
    top = bottom + nb
    corners = np.arange(i0, i0 + 4)
    return {"left": left, "right": right, "bottom": bottom, "top": top,
            "corners": corners}


def _periodic_pairs(faces):
    c = faces["corners"]
    pairs = [np.c_[faces["right"], faces["left"]],
             np.c_[faces["top"], faces["bottom"]],
             np.array([[c[1], c[0]], [c[2], c[0]], [c[3], c[0]]])]
    return np.vstack(pairs).astype(np.int64)


def build_cell_mesh(shape: InclusionShape, h_target: float) -> CellMesh:
    """Interface-fitted triangulation of the unit cell around a circular inclusion.

    The internal node spacing is tightened once or twice if the first
    attempt misses the quality bounds; the last failure is re-raised.
    """
    if not 0.0 < h_target < 0.5:
        raise MeshError(f"h_target must lie in (0, 0.5), got {h_target}")
    if isinstance(shape, StripeLaminate):
        return build_laminate_mesh(shape, h_target)
    err = None
    for factor in _SPACING:
        try:
            return _build_circle_mesh(shape, h_target, factor * h_target)
        except MeshQualityError as exc:
            err = exc
    raise err


def _build_circle_mesh(shape, h_target, s):
    m = int(np.ceil(1.0 / s - 1e-12))
    corners, left, right, bottom, top = _face_nodes(m)
    r = shape.radius
    k = 4 * int(np.ceil(2.0 * np.pi * r / (4.0 * s)))
    k = max(k, 8)
    theta = 2.0 * np.pi * np.arange(k) / k
    circ = shape.point_at(theta)
    chord = 2.0 * r * np.sin(np.pi / k)
    sagitta = r * (1.0 - np.cos(np.pi / k))
    # free nodes must stay outside every chord's diametral disk
    band = 0.5 * chord + sagitta + 0.05 * s

    dy = s * np.sqrt(3.0) / 2.0
    rows = []
    for j, y in enumerate(np.arange(0.5 * dy, 1.0, dy)):
        xs = np.arange((0.5 if j % 2 else 0.0) * s + 0.25 * s, 1.0, s)
        rows.append(np.c_[xs, np.full_like(xs, y)])
    free = np.vstack(rows)
    d = shape.signed_distance(free)
    bd = np.minimum.reduce([free[:, 0], 1 - free[:, 0], free[:, 1], 1 - free[:, 1]])
    free = free[(np.abs(d) > max(0.6 * s, band)) & (bd > 0.55 * s)]

    fixed = np.vstack([corners, left, right, bottom, top, circ])
    nf = len(fixed)
    pts = np.vstack([fixed, free])
    sign0 = np.sign(shape.signed_distance(pts[nf:]))
    for _ in range(_RELAX_ITERS):
        tri = Delaunay(pts).simplices
        edges, _ = unique_edges(tri)
        v = pts[edges[:, 1]] - pts[edges[:, 0]]
        L = np.linalg.norm(v, axis=1)
        f = (np.maximum(1.2 * s - L, 0.0) / L)[:, None] * v
        force = np.zeros_like(pts)
        np.add.at(force, edges[:, 0], -f)
        np.add.at(force, edges[:, 1], f)
        trial = pts[nf:] + 0.2 * force[nf:]
        dt_ = shape.signed_distance(trial)
        bdt = np.minimum.reduce([trial[:, 0], 1 - trial[:, 0], trial[:, 1], 1 - trial[:, 1]])
        ok = (np.abs(dt_) >= band) & (np.sign(dt_) == sign0) & (bdt >= 0.4 * s)
        pts[nf:][ok] = trial[ok]

    tri = _orient_ccw(pts, Delaunay(pts).simplices.astype(np.int64))
    dn = shape.signed_distance(pts)
    dn[np.abs(dn) <= ON_INTERFACE_TOL] = 0.0
    dv = dn[tri]
    out = (dv > 0).any(axis=1)
    inn = (dv < 0).any(axis=1)
    if np.any(out & inn):
        raise TopologyError("a triangle straddles the interface")
    phase = np.where(out, PhaseLabel.EXTERIOR, PhaseLabel.INTERIOR).astype(np.int8)

    ic = np.arange(nf - k, nf)
    iface = np.c_[ic, np.roll(ic, -1)].astype(np.int64)
    faces = _face_index(pts, m - 1, m - 1, 0)
    mesh = CellMesh(nodes=pts, triangles=tri, phase=phase, interface_edges=iface,
                    edge_normals=_edge_normals(pts, iface),
                    periodic_pairs=_periodic_pairs(faces), faces=faces,
                    shape=shape, h=float(max_diameter(pts, tri)))
    _check_quality(mesh, h_target)
    validate_cell_mesh(mesh)
    return mesh


def _graded_axis(breaks, h):
    pts = [0.0]
    for a, b in zip(breaks[:-1], breaks[1:]):
        k = max(1, int(np.ceil((b - a) / h - 1e-12)))
        pts.extend(a + (b - a) * np.arange(1, k + 1) / k)
    pts[-1] = 1.0
    return np.asarray(pts)


def build_laminate_mesh(shape: StripeLaminate, h_target: float) -> CellMesh:
    """Structured mesh of the relaxed-geometry stripe laminate.

    The interface lines are grid lines; they reach the top and bottom faces,
    so the interface loops close only through the periodic identification.
    """
    if not 0.0 < h_target < 0.5:
        raise MeshError(f"h_target must lie in (0, 0.5), got {h_target}")
    lo, hi = shape.interface_positions
    # spacing h/sqrt(2) keeps the right-triangle diameters below h
    hs = h_target / np.sqrt(2.0)
    xs = _graded_axis([0.0, lo, hi, 1.0], hs)
    m = int(np.ceil(1.0 / hs - 1e-12))
    ys = np.arange(m + 1) / m
    nx, ny = len(xs), len(ys)
    X, Yg = np.meshgrid(xs, ys, indexing="ij")
    grid_id = np.arange(nx * ny).reshape(nx, ny)
    raw = np.c_[X.ravel(), Yg.ravel()]

    # renumber so that corners|left|right|bottom|top come first
    ids = [grid_id[0, 0], grid_id[-1, 0], grid_id[0, -1], grid_id[-1, -1]]
    left = grid_id[0, 1:-1]
    right = grid_id[-1, 1:-1]
    bottom = grid_id[1:-1, 0]
    top = grid_id[1:-1, -1]
    head = np.concatenate([ids, left, right, bottom, top])
    rest = np.setdiff1d(np.arange(nx * ny), head)
    order = np.concatenate([head, rest])
    new_of_old = np.empty_like(order)
    new_of_old[order] = np.arange(len(order))
    nodes = raw[order]

    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b = grid_id[i, j], grid_id[i + 1, j]
            c, d = grid_id[i, j + 1], grid_id[i + 1, j + 1]
            if (i + j) % 2 == 0:
                tris += [(a, b, d), (a, d, c)]
            else:
                tris += [(a, b, c), (b, d, c)]
    tri = new_of_old[np.asarray(tris, dtype=np.int64)]
    tri = _orient_ccw(nodes, tri)
    cen = nodes[tri].mean(axis=1)
    phase = np.where(shape.signed_distance(cen) < 0, PhaseLabel.INTERIOR,
                     PhaseLabel.EXTERIOR).astype(np.int8)

    ilo = int(np.argmin(np.abs(xs - lo)))
    ihi = int(np.argmin(np.abs(xs - hi)))
    e_lo = np.c_[grid_id[ilo, 1:], grid_id[ilo, :-1]]    # downward: nu = -e1
    e_hi = np.c_[grid_id[ihi, :-1], grid_id[ihi, 1:]]    # upward: nu = +e1
    iface = new_of_old[np.vstack([e_lo[::-1], e_hi])]
    faces = _face_index(nodes, ny - 2, nx - 2, 0)
    mesh = CellMesh(nodes=nodes, triangles=tri, phase=phase, interface_edges=iface,
                    edge_normals=_edge_normals(nodes, iface),
                    periodic_pairs=_periodic_pairs(faces), faces=faces,
                    shape=shape, h=float(max_diameter(nodes, tri)))
    validate_cell_mesh(mesh)
    return mesh


def _check_quality(mesh, h_target):
    ang = triangle_angles(mesh.nodes, mesh.triangles)
    diag = {"min_angle": float(ang.min()), "max_angle": float(ang.max()),
            "h": mesh.h, "h_target": h_target}
    if ang.min() < MIN_ANGLE_DEG:
        raise MeshQualityError(f"minimum angle {ang.min():.2f} deg below {MIN_ANGLE_DEG}", diag)
    if mesh.h > MAX_DIAMETER_FACTOR * h_target:
        raise MeshQualityError(
            f"max diameter {mesh.h:.4g} exceeds {MAX_DIAMETER_FACTOR} * h_target", diag)


# ---------------------------------------------------------------------------
# validation

def _check_conformity(nodes, triangles, on_boundary):
    edges, counts = unique_edges(triangles)
    if np.any(counts > 2):
        raise TopologyError("an edge is shared by more than two triangles")
    b = edges[counts == 1]
    if not np.all(on_boundary(nodes[b[:, 0]]) & on_boundary(nodes[b[:, 1]])):
        raise TopologyError("mesh has a hole: boundary edge inside the domain")
    if np.any(triangle_areas(nodes, triangles) <= 0):
        raise TopologyError("triangle with nonpositive area")


def _on_unit_square_boundary(p, tol=MERGE_TOL):
    return ((np.abs(p[:, 0]) < tol) | (np.abs(p[:, 0] - 1) < tol)
            | (np.abs(p[:, 1]) < tol) | (np.abs(p[:, 1] - 1) < tol))


def _check_interface(nodes, triangles, phase, edges, normals, shape, cell_of_node=None,
                     master=None):
    if len(edges) == 0:
        return
    # interface nodes must lie on the interface (in cell coordinates)
    p = nodes[np.unique(edges)] if cell_of_node is None else cell_of_node(np.unique(edges))
    if np.abs(shape.signed_distance(p)).max() > ON_INTERFACE_TOL:
        raise TopologyError("interface node is off the interface")
    # each interface edge separates an interior and an exterior triangle
    tedges = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    owner = np.tile(np.arange(len(triangles)), 3)
    key = np.sort(tedges, axis=1)
    ekey = np.sort(edges, axis=1)
    big = int(len(nodes))
    kt = key[:, 0] * big + key[:, 1]
    ke = ekey[:, 0] * big + ekey[:, 1]
    order = np.argsort(kt, kind="stable")
    pos = np.searchsorted(kt[order], ke)
    if np.any(pos >= len(kt)) or np.any(kt[order][np.minimum(pos, len(kt) - 1)] != ke):
        raise TopologyError("interface edge is not a mesh edge")
    t1 = owner[order][pos]
    if np.any(pos + 1 >= len(kt)) or np.any(kt[order][np.minimum(pos + 1, len(kt) - 1)] != ke):
        if master is None:
            raise TopologyError("interface edge has a single neighbour")
        return
    t2 = owner[order][pos + 1]
    if np.any(phase[t1] == phase[t2]):
        raise TopologyError("interface edge does not separate the phases")
    cen = nodes[triangles].mean(axis=1)
    ext = np.where(phase[t1] == PhaseLabel.EXTERIOR, t1, t2)
    inn = np.where(phase[t1] == PhaseLabel.EXTERIOR, t2, t1)
    if np.any((normals * (cen[ext] - cen[inn])).sum(1) <= 0):
        raise TopologyError("interface normal does not point into the exterior phase")


def validate_cell_mesh(mesh: CellMesh):
    """Check the structural invariants of a cell mesh; raise on violation."""
    nodes, tri = mesh.nodes, mesh.triangles
    _check_conformity(nodes, tri, _on_unit_square_boundary)
    pp = mesh.periodic_pairs
    diff = nodes[pp[:, 0]] - nodes[pp[:, 1]]
    if np.any(np.abs(diff - np.round(diff)) > MERGE_TOL) or np.any(np.all(np.round(diff) == 0, axis=1)):
        raise TopologyError("periodic pair is not separated by a lattice vector")
    f = mesh.faces
    if len(f["left"]) != len(f["right"]) or len(f["bottom"]) != len(f["top"]):
        raise TopologyError("opposite faces carry different node counts")
    if len(np.unique(pp[:, 0])) != len(pp):
        raise TopologyError("periodic map is not a function")
    total = np.abs(triangle_areas(nodes, tri)).sum()
    if abs(total - 1.0) > 1e-12:
        raise TopologyError(f"phase areas sum to {total}, not 1")
    if not mesh.relaxed and len(mesh.interface_edges):
        ifn = np.unique(mesh.interface_edges)
        if np.any(_on_unit_square_boundary(nodes[ifn])):
            raise TopologyError("interface touches the cell boundary")
    _check_interface(nodes, tri, mesh.phase, mesh.interface_edges, mesh.edge_normals,
                     mesh.shape, master=mesh.master_map() if mesh.relaxed else None)
    extract_interface(mesh)


# ---------------------------------------------------------------------------
# tiling

def tile_domain_mesh(cell: CellMesh, n: int) -> DomainMesh:
    """Tile n x n copies of the cell, scaled by eps = 1/n, onto (0,1)^2."""
    n = int(n)
    if n < 1:
        raise MeshError("n must be a positive integer")
    if cell.relaxed:
        raise MeshError("relaxed-geometry cells cannot be tiled into a domain")
    f = cell.faces
    nc = len(cell.nodes)
    L, R, B, T, C = f["left"], f["right"], f["bottom"], f["top"], f["corners"]
    nl, nb = len(L), len(B)
    if nl != len(R) or nb != len(T):
        raise MeshError("face node sets do not match; cannot merge")
    on_face = np.zeros(nc, bool)
    on_face[np.concatenate([L, R, B, T, C])] = True
    inner = np.flatnonzero(~on_face)
    ni = len(inner)

    n1 = n + 1
    V0 = n1 * n1
    H0 = V0 + n1 * n * nl
    I0 = H0 + n1 * n * nb
    total = I0 + n * n * ni

    a = np.repeat(np.arange(n), n)      # column (x) index of each cell
    b = np.tile(np.arange(n), n)        # row (y) index
    G = np.empty((n * n, nc), dtype=np.int64)
    G[:, C[0]] = a * n1 + b
    G[:, C[1]] = (a + 1) * n1 + b
    G[:, C[2]] = a * n1 + b + 1
    G[:, C[3]] = (a + 1) * n1 + b + 1
    jl = np.arange(nl)
    jb = np.arange(nb)
    G[:, L] = V0 + ((a * n + b) * nl)[:, None] + jl
    G[:, R] = V0 + (((a + 1) * n + b) * nl)[:, None] + jl
    G[:, B] = H0 + ((b * n + a) * nb)[:, None] + jb
    G[:, T] = H0 + (((b + 1) * n + a) * nb)[:, None] + jb
    G[:, inner] = I0 + (np.arange(n * n) * ni)[:, None] + np.arange(ni)

    eps = 1.0 / n
    xy = np.empty((total, 2))
    cx = (a[:, None] + cell.nodes[None, :, 0]) * eps
    cy = (b[:, None] + cell.nodes[None, :, 1]) * eps
    xy[G.ravel(), 0] = cx.ravel()
    xy[G.ravel(), 1] = cy.ravel()
    # every global id must have been written with consistent coordinates
    chk = np.zeros(total, bool)
    chk[G.ravel()] = True
    if not chk.all():
        raise MeshError("tiling left unnumbered nodes")
    if np.abs(xy[G, 0] - cx).max() > MERGE_TOL * eps or np.abs(xy[G, 1] - cy).max() > MERGE_TOL * eps:
        raise MeshError("merged face nodes disagree in position")

    ntri = len(cell.triangles)
    tri = G[:, cell.triangles].reshape(n * n * ntri, 3)
    phase = np.tile(cell.phase, n * n)
    cell_idx = np.repeat(np.c_[a, b], ntri, axis=0)
    cell_tri = np.tile(np.arange(ntri), n * n)
    ie = cell.interface_edges
    iface = G[:, ie].reshape(-1, 2) if len(ie) else np.zeros((0, 2), np.int64)
    normals = np.tile(cell.edge_normals, (n * n, 1))

    bmask = np.zeros(total, bool)
    lat = np.arange(n1)
    for aa in (0, n):
        bmask[aa * n1 + lat] = True
        bmask[V0 + ((aa * n + np.arange(n)) * nl)[:, None] + jl] = True
    for bb in (0, n):
        bmask[lat * n1 + bb] = True
        bmask[H0 + ((bb * n + np.arange(n)) * nb)[:, None] + jb] = True

    return DomainMesh(nodes=xy, triangles=tri, phase=phase, interface_edges=iface,
                      edge_normals=normals, dirichlet_nodes=np.flatnonzero(bmask),
                      eps=eps, n=n, cell_index_of_triangle=cell_idx,
                      cell_triangle_of_triangle=cell_tri, shape=cell.shape,
                      h=cell.h * eps)


def validate_domain_mesh(mesh: DomainMesh):
    nodes, tri = mesh.nodes, mesh.triangles
    _check_conformity(nodes, tri, _on_unit_square_boundary)
    onb = np.flatnonzero(_on_unit_square_boundary(nodes))
    if not np.array_equal(np.sort(mesh.dirichlet_nodes), onb):
        raise TopologyError("Dirichlet node set differs from the boundary node set")
    total = np.abs(triangle_areas(nodes, tri)).sum()
    if abs(total - 1.0) > 1e-12:
        raise TopologyError(f"phase areas sum to {total}, not 1")
    if len(mesh.interface_edges):
        p = nodes[np.unique(mesh.interface_edges)]
        bd = np.minimum.reduce([p[:, 0], 1 - p[:, 0], p[:, 1], 1 - p[:, 1]])
        if bd.min() < mesh.shape.clearance * mesh.eps * (1 - 1e-9):
            raise TopologyError("interface closer to the boundary than clearance * eps")

        def to_cell(ids):
            q = nodes[ids] / mesh.eps
            return q - np.floor(q)
        _check_interface(nodes, tri, mesh.phase, mesh.interface_edges, mesh.edge_normals,
                         mesh.shape, cell_of_node=to_cell)
    extract_interface(mesh)


# ---------------------------------------------------------------------------
# interface loops

@dataclass
class InterfaceLoop:
    edges: np.ndarray     # (k, 2) oriented node pairs, consecutive
    normals: np.ndarray   # (k, 2) unit normals into the exterior phase
    lengths: np.ndarray

    @property
    def length(self):
        return float(self.lengths.sum())


def extract_interface(mesh) -> list:
    """Order the interface edges into closed oriented loops.

    Loops of relaxed-geometry cell meshes are closed modulo the periodic
    identification of nodes.
    """
    edges = np.asarray(mesh.interface_edges)
    if len(edges) == 0:
        return []
    ident = mesh.master_map() if isinstance(mesh, CellMesh) else np.arange(len(mesh.nodes))
    start = ident[edges[:, 0]]
    stop = ident[edges[:, 1]]
    succ = {}
    for i, s in enumerate(start):
        if s in succ:
            raise TopologyError("interface node has two outgoing edges")
        succ[int(s)] = i
    normals = np.asarray(mesh.edge_normals)
    lengths = np.linalg.norm(mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]], axis=1)
    seen = np.zeros(len(edges), bool)
    loops = []
    for i0 in range(len(edges)):
        if seen[i0]:
            continue
        chain = []
        i = i0
        while not seen[i]:
            seen[i] = True
            chain.append(i)
            nxt = succ.get(int(stop[i]))
            if nxt is None:
                raise TopologyError("open interface loop detected")
            i = nxt
        if i != i0:
            raise TopologyError("interface edges do not form simple closed loops")
        ch = np.asarray(chain)
        loops.append(InterfaceLoop(edges=edges[ch], normals=normals[ch], lengths=lengths[ch]))
    return loops


# ---------------------------------------------------------------------------
# reporting

def phase_volumes(mesh):
    area = np.abs(triangle_areas(mesh.nodes, mesh.triangles))
    vin = float(area[mesh.phase == PhaseLabel.INTERIOR].sum())
    vout = float(area[mesh.phase == PhaseLabel.EXTERIOR].sum())
    return vin, vout


def interface_length(mesh):
    e = mesh.interface_edges
    if len(e) == 0:
        return 0.0
    return float(np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1).sum())


def mesh_quality_report(mesh) -> dict:
    ang = triangle_angles(mesh.nodes, mesh.triangles)
    vin, vout = phase_volumes(mesh)
    rep = {
        "n_nodes": int(len(mesh.nodes)),
        "n_triangles": int(len(mesh.triangles)),
        "n_interface_edges": int(len(mesh.interface_edges)),
        "n_loops": len(extract_interface(mesh)),
        "min_angle": float(ang.min()),
        "max_angle": float(ang.max()),
        "h": float(max_diameter(mesh.nodes, mesh.triangles)),
        "interface_length": interface_length(mesh),
        "interior_volume": vin,
        "exterior_volume": vout,
    }
    if isinstance(mesh, DomainMesh):
        rep["eps"] = mesh.eps
        rep["n"] = mesh.n
    return rep


# ---------------------------------------------------------------------------
# plain-text serialisation
#
#   lbhomog-mesh 1
#   digest <config digest>                                  (optional)
#   kind cell|domain
#   shape <json>
#   meta eps <eps> n <n> h <h>
#   nodes N [field]    then N lines "x y" or "x y value"
#   triangles M        then M lines "i j k phase"
#   interface_edges E  then E lines "i j nx ny"
#   periodic_pairs P   then P lines "slave master"
#   faces              then 5 lines "<name> i0 i1 ..."   (cell meshes)
#   dirichlet D        then one line of node ids           (domain meshes)
#   tiling             then 2 lines: cell index / cell triangle (domain)

def write_mesh(path, mesh, field=None, digest=None):
    """Plain-text mesh file; ``field`` adds a third node column (snapshots)."""
    import json
    is_cell = isinstance(mesh, CellMesh)
    lines = ["lbhomog-mesh 1"]
    if digest:
        lines.append(f"digest {digest}")
    lines += [f"kind {'cell' if is_cell else 'domain'}",
              "shape " + json.dumps(mesh.shape.describe(), sort_keys=True)]
    if is_cell:
        lines.append(f"meta eps 1 n 1 h {float(mesh.h)!r}")
    else:
        lines.append(f"meta eps {float(mesh.eps)!r} n {mesh.n} h {float(mesh.h)!r}")
    if field is None:
        lines.append(f"nodes {len(mesh.nodes)}")
        lines += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    else:
        field = np.asarray(field, dtype=float)
        if field.shape != (len(mesh.nodes),):
            raise MeshError("field must carry one value per node")
        lines.append(f"nodes {len(mesh.nodes)} field")
        lines += [f"{x!r} {y!r} {v!r}" for (x, y), v in zip(mesh.nodes.tolist(), field.tolist())]
    lines.append(f"triangles {len(mesh.triangles)}")
    lines += [f"{i} {j} {k} {p}" for (i, j, k), p in zip(mesh.triangles.tolist(), mesh.phase.tolist())]
    lines.append(f"interface_edges {len(mesh.interface_edges)}")
    lines += [f"{i} {j} {nx!r} {ny!r}" for (i, j), (nx, ny)
              in zip(mesh.interface_edges.tolist(), mesh.edge_normals.tolist())]
    pp = mesh.periodic_pairs
    lines.append(f"periodic_pairs {len(pp)}")
    lines += [f"{s} {m}" for s, m in pp.tolist()]
    if is_cell:
        lines.append("faces")
        for name in ("left", "right", "bottom", "top", "corners"):
            lines.append(" ".join([name] + [str(int(i)) for i in mesh.faces[name]]))
    else:
        lines.append(f"dirichlet {len(mesh.dirichlet_nodes)}")
        lines.append(" ".join(str(int(i)) for i in mesh.dirichlet_nodes))
        lines.append("tiling")
        lines.append(" ".join(str(int(i)) for i in mesh.cell_index_of_triangle.ravel()))
        lines.append(" ".join(str(int(i)) for i in mesh.cell_triangle_of_triangle))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path):
    """Load a mesh written by :func:`write_mesh` and validate its invariants."""
    return read_field(path)[0]


def read_field(path):
    """Return ``(mesh, field_or_None, digest_or_None)`` from a mesh file."""
    import json
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
        it = iter(lines)
        if next(it).strip() != "lbhomog-mesh 1":
            raise MeshError("not a mesh file")
        line = next(it).split()
        digest = None
        if line[0] == "digest":
            digest = line[1]
            line = next(it).split()
        kind = line[1]
        shape = shape_from_description(json.loads(next(it).split(" ", 1)[1]))
        meta = next(it).split()
        eps, n, h = float(meta[2]), int(meta[4]), float(meta[6])

        def block(tag, ncols, dtype, head=None):
            head = next(it).split() if head is None else head
            if head[0] != tag:
                raise MeshError(f"expected section {tag!r}, found {head[0]!r}")
            cnt = int(head[1])
            rows = [next(it).split() for _ in range(cnt)]
            return np.array(rows, dtype=float).reshape(cnt, ncols).astype(dtype) if cnt else np.zeros((0, ncols), dtype)

        head = next(it).split()
        has_field = head[-1] == "field"
        nodes = block("nodes", 3 if has_field else 2, float, head)
        field = None
        if has_field:
            nodes, field = np.ascontiguousarray(nodes[:, :2]), nodes[:, 2].copy()
        tp = block("triangles", 4, np.int64)
        ie = block("interface_edges", 4, float)
        pp = block("periodic_pairs", 2, np.int64)
        tri, phase = tp[:, :3], tp[:, 3].astype(np.int8)
        edges, normals = ie[:, :2].astype(np.int64), ie[:, 2:]
        if kind == "cell":
            if next(it).strip() != "faces":
                raise MeshError("missing faces section")
            faces = {}
            for _ in range(5):
                parts = next(it).split()
                faces[parts[0]] = np.array(parts[1:], dtype=np.int64)
            mesh = CellMesh(nodes=nodes, triangles=tri, phase=phase, interface_edges=edges,
                            edge_normals=normals, periodic_pairs=pp, faces=faces,
                            shape=shape, h=h)
            validate_cell_mesh(mesh)
        else:
            head = next(it).split()
            if head[0] != "dirichlet":
                raise MeshError("missing dirichlet section")
            dn = np.array(next(it).split(), dtype=np.int64)
            if next(it).strip() != "tiling":
                raise MeshError("missing tiling section")
            ci = np.array(next(it).split(), dtype=np.int64).reshape(-1, 2)
            ct = np.array(next(it).split(), dtype=np.int64)
            mesh = DomainMesh(nodes=nodes, triangles=tri, phase=phase, interface_edges=edges,
                              edge_normals=normals, dirichlet_nodes=dn, eps=eps, n=n,
                              cell_index_of_triangle=ci, cell_triangle_of_triangle=ct,
                              shape=shape, h=h, periodic_pairs=pp)
            validate_domain_mesh(mesh)
        return mesh, field, digest
    except (StopIteration, ValueError, IndexError, KeyError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
