import math

import numpy as np
import pytest

from lbhomog.errors import MeshError
from lbhomog.geometry import InclusionShape
from lbhomog.meshing import (CellMesh, build_cell_mesh, extract_interface, interface_length,
                             mesh_quality_report, phase_volumes, read_field, read_mesh,
                             tile_domain_mesh, triangle_angles, triangle_areas, unique_edges,
                             validate_cell_mesh, write_mesh)


def _edge_counts(tri):
    e = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    _, cnt = np.unique(e, axis=0, return_counts=True)
    return cnt


def test_cell_mesh_basic_invariants(cell_coarse, circle):
    m = cell_coarse
    validate_cell_mesh(m)
    loops = extract_interface(m)
    assert len(loops) == 1
    e = loops[0].edges
    np.testing.assert_array_equal(e[:, 1], np.roll(e[:, 0], -1))
    d = circle.signed_distance(m.nodes[np.unique(m.interface_edges)])
    assert np.abs(d).max() <= 1e-10
    assert np.all(np.isin(_edge_counts(m.triangles), (1, 2)))
    assert triangle_angles(m.nodes, m.triangles).min() >= 20.0
    # every triangle sits in one phase
    cen = m.nodes[m.triangles].mean(axis=1)
    np.testing.assert_array_equal(circle.phase_of(cen), m.phase)


def test_phase_partition_and_measures(cell_coarse):
    vin, vout = phase_volumes(cell_coarse)
    assert vin + vout == pytest.approx(1.0, abs=1e-12)
    assert vin == pytest.approx(math.pi / 16, rel=0.05)
    assert interface_length(cell_coarse) == pytest.approx(math.pi / 2, rel=0.02)


def test_interface_normals_point_outward(cell_coarse):
    m = cell_coarse
    mid = 0.5 * (m.nodes[m.interface_edges[:, 0]] + m.nodes[m.interface_edges[:, 1]])
    radial = mid - 0.5
    assert np.all(np.einsum("ij,ij->i", m.edge_normals, radial) > 0)


def test_periodic_pairs_differ_by_lattice_vector(cell_coarse):
    m = cell_coarse
    d = m.nodes[m.periodic_pairs[:, 0]] - m.nodes[m.periodic_pairs[:, 1]]
    assert np.all(np.isin(np.round(d, 12), (0.0, 1.0)))
    assert np.all(np.abs(d).sum(axis=1) >= 1 - 1e-12)


def test_geometric_errors_are_second_order(circle):
    errs = []
    for h in (0.04, 0.02):
        m = build_cell_mesh(circle, h)
        errs.append((abs(interface_length(m) - circle.interface_length),
                     abs(phase_volumes(m)[0] - circle.interior_area)))
    assert errs[0][0] / errs[1][0] > 3.0
    assert errs[0][1] / errs[1][1] > 3.0


def test_normal_loop_integral_vanishes(cell_medium):
    m = cell_medium
    L = np.linalg.norm(m.nodes[m.interface_edges[:, 1]] - m.nodes[m.interface_edges[:, 0]], axis=1)
    np.testing.assert_allclose((L[:, None] * m.edge_normals).sum(axis=0), 0, atol=1e-12)


def test_h_precondition(circle):
    with pytest.raises(MeshError):
        build_cell_mesh(circle, 0.6)


def test_tile_n1_matches_cell(cell_coarse):
    d = tile_domain_mesh(cell_coarse, 1)
    assert len(d.nodes) == len(cell_coarse.nodes)
    np.testing.assert_allclose(np.sort(triangle_areas(d.nodes, d.triangles)),
                               np.sort(triangle_areas(cell_coarse.nodes, cell_coarse.triangles)))
    x = d.nodes[d.dirichlet_nodes]
    on = np.minimum.reduce([x[:, 0], x[:, 1], 1 - x[:, 0], 1 - x[:, 1]])
    assert np.abs(on).max() < 1e-12


def test_tile_n2_and_n4(cell_coarse, domain2):
    assert len(extract_interface(domain2)) == 4
    # n^2 copies of a loop scaled by eps = 1/n
    assert interface_length(domain2) == pytest.approx(2 * interface_length(cell_coarse), abs=1e-10)
    d4 = tile_domain_mesh(cell_coarse, 4)
    assert len(d4.nodes) < 16 * len(cell_coarse.nodes)
    assert len(extract_interface(d4)) == 16
    assert mesh_quality_report(d4)["eps"] == 0.25
    assert interface_length(d4) == pytest.approx(4 * interface_length(cell_coarse), abs=1e-10)


def test_domain_dirichlet_and_clearance(domain2, circle):
    x = domain2.nodes
    bnd = np.nonzero(np.minimum.reduce([x[:, 0], x[:, 1], 1 - x[:, 0], 1 - x[:, 1]]) < 1e-12)[0]
    np.testing.assert_array_equal(np.sort(domain2.dirichlet_nodes), bnd)
    xi = x[np.unique(domain2.interface_edges)]
    dist = np.minimum.reduce([xi[:, 0], xi[:, 1], 1 - xi[:, 0], 1 - xi[:, 1]])
    assert dist.min() >= circle.clearance * domain2.eps - 1e-12
    assert np.all(np.isin(_edge_counts(domain2.triangles), (1, 2)))


def test_no_inclusion_gives_empty_interface(cell_coarse):
    m = cell_coarse
    bare = CellMesh(nodes=m.nodes, triangles=m.triangles, phase=np.ones_like(m.phase),
                    interface_edges=np.zeros((0, 2), np.int64), edge_normals=np.zeros((0, 2)),
                    periodic_pairs=m.periodic_pairs, faces=m.faces, shape=m.shape, h=m.h)
    assert extract_interface(bare) == []


def test_quality_report_fields(cell_coarse):
    r = mesh_quality_report(cell_coarse)
    assert r["n_loops"] == 1
    assert r["interface_length"] == pytest.approx(math.pi / 2, rel=0.02)
    assert r["interior_volume"] == pytest.approx(math.pi / 16, rel=0.05)
    assert len(unique_edges(cell_coarse.triangles)[0]) > r["n_nodes"]


def test_mesh_roundtrip(tmp_path, cell_coarse, domain2):
    p = tmp_path / "c.mesh"
    write_mesh(p, cell_coarse)
    back = read_mesh(p)
    np.testing.assert_array_equal(back.nodes, cell_coarse.nodes)
    np.testing.assert_array_equal(back.triangles, cell_coarse.triangles)
    np.testing.assert_array_equal(back.periodic_pairs, cell_coarse.periodic_pairs)
    q = tmp_path / "d.mesh"
    f = np.arange(len(domain2.nodes), dtype=float) / 7
    write_mesh(q, domain2, field=f, digest="abc")
    m, g, dg = read_field(q)
    np.testing.assert_array_equal(g, f)
    assert dg == "abc" and m.n == 2
    np.testing.assert_array_equal(m.dirichlet_nodes, domain2.dirichlet_nodes)


def test_corrupted_mesh_file_raises(tmp_path, cell_coarse):
    p = tmp_path / "c.mesh"
    write_mesh(p, cell_coarse)
    text = p.read_text().splitlines()
    p.write_text("\n".join(text[: len(text) // 2]))
    with pytest.raises(MeshError):
        read_mesh(p)


def test_other_radius_and_center():
    s = InclusionShape(center=(0.45, 0.55), radius=1 / 3, clearance=0.05)
    m = build_cell_mesh(s, 0.05)
    validate_cell_mesh(m)
    assert len(extract_interface(m)) == 1
