import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lbhomog.cell_solver import compute_correctors
from lbhomog.error_harness import (CellFieldEvaluator, CompositeData, ConvergenceReport,
                                   CutoffField, GradientRecovery, PointLocationError,
                                   apply_cutoff, build_corrector_field, composite_gradient,
                                   error_norms, rate_fit, recovered_gradient)
from lbhomog.errors import LBHomogError
from lbhomog.evolution import Bump, Trajectory, project_initial
from lbhomog.fem import CoefficientSet
from lbhomog.geometry import InclusionShape
from lbhomog.meshing import build_cell_mesh, tile_domain_mesh


def _dist_to_boundary(x):
    return np.minimum.reduce([x[:, 0], x[:, 1], 1 - x[:, 0], 1 - x[:, 1]])


def test_recovery_exact_for_linear_and_constant(domain2):
    x = domain2.nodes
    np.testing.assert_allclose(recovered_gradient(domain2, x[:, 0]), [[1, 0]] * len(x), atol=1e-12)
    np.testing.assert_allclose(recovered_gradient(domain2, np.full(len(x), 4.0)), 0, atol=1e-12)


def test_recovery_quadratic_converges(circle):
    errs = []
    for h in (0.1, 0.05, 0.025):
        d = tile_domain_mesh(build_cell_mesh(circle, h), 1)
        x = d.nodes
        G = recovered_gradient(d, x[:, 0] ** 2)
        far = _dist_to_boundary(x) > 0.15
        errs.append(np.abs(G[far, 0] - 2 * x[far, 0]).max())
    assert errs[0] > errs[1] > errs[2]
    assert errs[0] / errs[2] > 3.0


def test_evaluator_wraps_and_snaps(cell_coarse):
    x = cell_coarse.nodes
    per = np.cos(2 * np.pi * x[:, 0]) + np.sin(2 * np.pi * x[:, 1])
    snapped = CellFieldEvaluator(cell_coarse, per).evaluate(x)[:, 0]
    np.testing.assert_allclose(snapped, per, rtol=0, atol=1e-15)
    # linear fields are reproduced inside the cell
    v = x[:, 0] + 2 * x[:, 1]
    ev = CellFieldEvaluator(cell_coarse, v)
    p = np.array([[0.31, 0.42], [0.77, 0.12]])
    np.testing.assert_allclose(ev.evaluate(p)[:, 0], p[:, 0] + 2 * p[:, 1], atol=1e-12)
    np.testing.assert_allclose(ev.evaluate(p / 4 + 0.25, eps=0.25), ev.evaluate(p), atol=1e-12)
    np.testing.assert_allclose(ev.gradient(p)[:, 0], [[1, 2]] * 2, atol=1e-12)


def test_evaluator_reports_unlocated_points(cell_coarse):
    bad = cell_coarse.__class__(**{**cell_coarse.__dict__,
                                   "triangles": cell_coarse.triangles[:5],
                                   "phase": cell_coarse.phase[:5]})
    ev = CellFieldEvaluator(bad, np.zeros(len(bad.nodes)))
    with pytest.raises(PointLocationError):
        ev.evaluate(np.array([[0.5, 0.5]]))


def test_corrector_field_trivial_cases(domain2, cell_coarse):
    u0 = project_initial(domain2, Bump())
    zero = CellFieldEvaluator(cell_coarse, np.zeros((2, len(cell_coarse.nodes))))
    np.testing.assert_array_equal(build_corrector_field(u0, domain2, zero, 0.5), u0)
    ev = CellFieldEvaluator(cell_coarse, np.ones((2, len(cell_coarse.nodes))))
    np.testing.assert_array_equal(build_corrector_field(np.zeros_like(u0), domain2, ev, 0.5), 0)


def test_laminate_composite_gradient(laminate_cell):
    c = CoefficientSet(lam_int=1.0, lam_out=10.0, beta=0.1)
    cs = compute_correctors(laminate_cell, c)
    ev = CellFieldEvaluator(laminate_cell, cs.chi)
    cdata = CompositeData.build(laminate_cell, ev, 1.0)
    u0 = laminate_cell.nodes[:, 0].copy()
    g, second = composite_gradient(u0, GradientRecovery(laminate_cell), cdata, laminate_cell)
    # the flux lam (1 - chi_1') equals the harmonic mean in every layer
    lam = c.lam_of(laminate_cell.phase)
    np.testing.assert_allclose(g[:, 0], (20 / 11) / lam, atol=1e-8)
    np.testing.assert_allclose(g[:, 1], 0, atol=1e-8)
    assert np.abs(second).max() < 1e-10


def test_cutoff_invariants(domain2):
    eps, g0 = 0.5, 0.05
    cut = CutoffField.build(domain2, eps, g0)
    d = _dist_to_boundary(domain2.nodes)
    assert np.all(cut.values[d < 1e-12] == 1.0)
    assert np.all(cut.values[d >= g0 * eps] == 0.0)
    assert np.all((cut.values >= 0) & (cut.values <= 1))
    u0 = np.sin(np.pi * domain2.nodes[:, 0]) * np.sin(np.pi * domain2.nodes[:, 1])
    corr = u0 + 0.3
    out = apply_cutoff(u0, corr, cut)
    np.testing.assert_allclose(out[domain2.dirichlet_nodes], u0[domain2.dirichlet_nodes])
    far = d >= g0 * eps
    np.testing.assert_array_equal(out[far], corr[far])
    none = CutoffField.build(domain2, eps, 0.0)
    np.testing.assert_array_equal(apply_cutoff(u0, corr, none), corr)


def _traj(mesh, snaps, T):
    n = len(snaps) - 1
    return Trajectory(mesh=mesh, times=np.linspace(0, T, n + 1), snapshots=dict(enumerate(snaps)),
                      energies=np.zeros(n + 1), identity_residuals=np.zeros(n), theta=1.0,
                      dt=T / n)


def test_error_norms_trivial(domain2, cell_coarse):
    zero = CellFieldEvaluator(cell_coarse, np.zeros((2, len(cell_coarse.nodes))))
    u = project_initial(domain2, Bump())
    tr = _traj(domain2, [u, 0.5 * u], 0.1)
    assert error_norms(tr, tr, zero, 0.5) == (0.0, 0.0, 0.0)
    T = 0.3
    one = np.ones(len(domain2.nodes))
    e = error_norms(_traj(domain2, [one, one], T), _traj(domain2, [0 * one, 0 * one], T), zero,
                    0.5)
    assert e[1] == pytest.approx(math.sqrt(T), rel=1e-12)
    assert e[0] == pytest.approx(math.sqrt(T), rel=1e-12)


def test_error_norms_reject_mismatched_grids(domain2, cell_coarse):
    zero = CellFieldEvaluator(cell_coarse, np.zeros((2, len(cell_coarse.nodes))))
    u = np.zeros(len(domain2.nodes))
    with pytest.raises(LBHomogError):
        error_norms(_traj(domain2, [u, u], 0.1), _traj(domain2, [u, u, u], 0.1), zero, 0.5)


def test_rate_fit_examples():
    eps = [0.5, 0.25, 0.125, 0.0625]
    s, _ = rate_fit([(e, math.sqrt(e)) for e in eps])
    assert s == pytest.approx(0.5, abs=1e-12)
    s, C = rate_fit([(e, 2 * e) for e in eps])
    assert s == pytest.approx(1.0, abs=1e-12)
    assert C == pytest.approx(2.0, rel=1e-12)
    with pytest.raises(ValueError):
        rate_fit([(0.5, 1.0), (0.25, 0.5)])
    with pytest.raises(ValueError):
        rate_fit([(0.5, 1.0), (0.25, 0.0), (0.125, 0.1)])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(0.01, 100.0))
def test_rate_fit_recovers_power_laws(p, C):
    s, c = rate_fit([(1 / n, C * n ** -p) for n in (2, 4, 8, 16)])
    assert s == pytest.approx(p, abs=1e-9)
    assert c == pytest.approx(C, rel=1e-9)


def _row(eps, err, **kw):
    r = {"eps": eps, "err_h1_corrected": err, "err_l2_plain": err / 4,
         "err_l2_corrected": err / 5, "energy_identity_residual": 1e-13}
    r.update(kw)
    return r


def test_report_csv_and_slopes(tmp_path):
    rows = [_row(1 / n, 0.3 * n ** -0.5) for n in (4, 2, 8)]
    rep = ConvergenceReport(rows, "abc")
    assert [r["eps"] for r in rep.rows] == [0.5, 0.25, 0.125]
    assert rep.running_slopes()[0] is None
    assert rep.running_slopes()[2] == pytest.approx(0.5)
    assert rep.fits()["err_h1_corrected"]["slope"] == pytest.approx(0.5)
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "# config_digest abc"
    assert lines[1].startswith("eps,err_h1_corrected,err_l2_plain,err_l2_corrected,slope_running")
    assert len(lines) == 5
    rep.write_json(tmp_path / "r.json")
    rep.write_svg(tmp_path / "r.svg")
    assert (tmp_path / "r.svg").read_text().lstrip().startswith("<svg")


def test_report_rejects_mixed_digests_and_duplicates():
    with pytest.raises(LBHomogError):
        ConvergenceReport([_row(0.5, 1.0, digest="x"), _row(0.25, 0.5)], "y")
    with pytest.raises(LBHomogError):
        ConvergenceReport([_row(0.5, 1.0), _row(0.5, 0.5)], "y")


def test_report_degenerate_status():
    rows = [_row(1 / n, 1e-12, degenerate=True) for n in (2, 4, 8)]
    rep = ConvergenceReport(rows, "d")
    assert rep.degenerate
    assert rep.fits() == {}
    assert rep.summary()["status"] == "degenerate"


def test_other_geometry_evaluator():
    s = InclusionShape(center=(0.45, 0.55), radius=0.3, clearance=0.05)
    cell = build_cell_mesh(s, 0.1)
    ev = CellFieldEvaluator(cell, np.arange(len(cell.nodes), dtype=float))
    pts = np.random.default_rng(3).random((200, 2))
    assert np.all(np.isfinite(ev.evaluate(pts)))
