import numpy as np
import pytest

from lbhomog.cell_solver import compute_correctors
from lbhomog.config import RunConfig
from lbhomog.error_harness import CellFieldEvaluator, CutoffField, error_norms
from lbhomog.evolution import Bump, run_macro, run_micro
from lbhomog.meshing import tile_domain_mesh
from lbhomog.pipeline import evaluate_checks, macro_time_error, run_eps_job, time_step_guard

T, DT = 0.05, 0.0125


@pytest.fixture(scope="module")
def correctors(cell_coarse, coeffs):
    return compute_correctors(cell_coarse, coeffs)


@pytest.fixture(scope="module")
def job2(cell_coarse, correctors, coeffs):
    return run_eps_job(cell_coarse, correctors, coeffs, Bump(), 2, T, DT)


def test_streamed_job_matches_stored_trajectories(cell_coarse, correctors, coeffs, job2):
    mesh = tile_domain_mesh(cell_coarse, 2)
    tm = run_micro(mesh, coeffs, Bump(), T, DT)
    t0 = run_macro(mesh, correctors.A_total, correctors.gamma, Bump(), T, DT)
    ev = CellFieldEvaluator(cell_coarse, correctors.chi)
    h1, l2p, l2c = error_norms(tm, t0, ev, 0.5, CutoffField.build(mesh, 0.5, 0.05))
    assert job2["err_h1_corrected"] == pytest.approx(h1, rel=1e-12)
    assert job2["err_l2_plain"] == pytest.approx(l2p, rel=1e-12)
    assert job2["err_l2_corrected"] == pytest.approx(l2c, rel=1e-12)
    np.testing.assert_allclose(job2["energies_micro"], tm.energies, rtol=1e-12)


def test_job_row_contents(job2):
    assert job2["energy_monotone"]
    assert job2["energy_identity_residual"] <= 1e-9
    assert job2["cutoff_boundary_max"] == 0.0
    assert not job2["degenerate"]
    b = job2["bounds"]
    assert all(v > 0 for v in b.values())
    # the L2 sup is attained at t = 0 for a dissipative run
    assert b["sup_l2"] >= 0.5 * job2["energies_micro"][0]
    assert len(job2["times"]) == round(T / DT) + 1


def test_guard_reuses_the_job_norm(cell_coarse, correctors, coeffs, job2):
    g = time_step_guard(cell_coarse, correctors, coeffs, Bump(), 2, T, DT)
    assert g["err_h1_dt"] == pytest.approx(job2["err_h1_corrected"], rel=1e-12)
    assert g["time_error"] == pytest.approx(2 * abs(g["err_h1_dt"] - g["err_h1_half_dt"]))
    assert g["macro_time_error"] == pytest.approx(
        macro_time_error(cell_coarse, correctors, Bump(), 2, T, DT), rel=1e-10)
    assert g["field_time_error"] > 0


def _row(eps, err, **kw):
    r = {"eps": eps, "err_h1_corrected": err, "err_l2_plain": err / 3,
         "err_l2_corrected": err / 4, "energy_monotone": True, "energy_flags": [],
         "energy_identity_residual": 1e-13, "cutoff_boundary_max": 0.0,
         "bounds": {"sup_l2": 1.0, "int_grad": 1.0, "sup_surface": 1.0, "int_surface_grad": 1.0}}
    r.update(kw)
    return r


def _by_name(checks):
    return {c["name"]: c["passed"] for c in checks}


def test_checks_pass_on_clean_sweep():
    rows = [_row(1 / n, n ** -0.6) for n in (2, 4, 8, 16)]
    guard = {"n": 4, "time_error": 1e-4}
    c = _by_name(evaluate_checks(rows, RunConfig(), guard))
    assert all(c.values()), c


def test_checks_flag_each_violation():
    rows = [_row(1 / n, n ** -0.6) for n in (2, 4, 8, 16)]
    rows[2]["err_h1_corrected"] = 2.0
    rows[3]["bounds"] = dict(rows[3]["bounds"], int_surface_grad=5.0)
    rows[1]["energy_monotone"] = False
    rows[1]["energy_flags"] = ["energy increase at step 3"]
    guard = {"n": 4, "time_error": 1.0}
    c = _by_name(evaluate_checks(rows, RunConfig(), guard))
    assert not c["monotone_err_h1_corrected"]
    assert not c["uniform_bound_int_surface_grad"]
    assert c["uniform_bound_sup_l2"]
    assert not c["energy_dissipation"]
    assert not c["time_step_guard"]


def test_checks_flat_rate_fails():
    rows = [_row(1 / n, 0.1 * n ** -0.2) for n in (2, 4, 8, 16)]
    c = _by_name(evaluate_checks(rows, RunConfig(), None))
    assert not c["rate_h1"] and not c["rate_l2_plain"]
