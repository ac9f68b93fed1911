"""Command-line entry point.

    lbhomog {cell,micro,macro,converge,mesh-report} --config FILE
            [--out DIR] [--jobs K] [--h H] [--eps-list 1/2,1/4,...]

Exit codes: 0 pass, 1 acceptance failure, 2 configuration error,
3 internal or solver error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

from .cell_solver import beta_probe, compute_correctors, spd_check
from .config import parse_config, parse_eps_list
from .error_harness import ConvergenceReport, _jsonable
from .errors import ConfigError, LBHomogError
from .evolution import run_macro, run_micro, write_energies, write_snapshot
from .meshing import (build_cell_mesh, build_laminate_mesh, mesh_quality_report, read_mesh,
                      tile_domain_mesh, write_mesh)
from .pipeline import evaluate_checks, run_eps_job, time_step_guard

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("lbhomog")


class AcceptanceFailure(Exception):
    pass


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def mesh_cache_key(shape, h, n=1):
    blob = json.dumps({"shape": shape.describe(), "h": h, "n": n}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_cell_mesh(cfg, outdir):
    """Cell mesh from the run-directory cache, rebuilt when missing or unreadable."""
    shape = cfg.shape
    cache = os.path.join(outdir, "mesh")
    os.makedirs(cache, exist_ok=True)
    path = os.path.join(cache, f"cell_{mesh_cache_key(shape, cfg.h)}.mesh")
    if os.path.exists(path):
        try:
            mesh = read_mesh(path)
            if mesh.shape == shape:
                return mesh
            log.warning("mesh cache %s does not match the configuration; rebuilding", path)
        except (LBHomogError, ValueError, OSError) as exc:
            log.warning("mesh cache %s is unreadable (%s); rebuilding", path, exc)
    if shape.relaxed:
        mesh = build_laminate_mesh(shape, cfg.h)
    else:
        mesh = build_cell_mesh(shape, cfg.h)
    write_mesh(path, mesh)
    return mesh


def _prepare(cfg, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(f"; config_digest {cfg.digest()}\n")
        fh.write(cfg.to_ini())
    _dump_json(os.path.join(out, "config.json"), {"config_digest": cfg.digest(), **cfg.to_dict()})


def cell_stage(cfg, out):
    """Cell mesh, correctors, tensor and positivity report; returns a dict."""
    digest = cfg.digest()
    cell = load_cell_mesh(cfg, out)
    cs = compute_correctors(cell, cfg.coeffs, second=cfg.second_corrector)
    spd = spd_check(cs.A_total, cfg.coeffs)
    probe = beta_probe(cell, cfg.coeffs)
    passed = spd["passed"] and all(p["passed"] for p in probe)
    d = os.path.join(out, "cell")
    cs.save(d, digest=digest)
    with open(os.path.join(d, "tensor.txt"), "w") as fh:
        fh.write(f"# config_digest {digest}\n# A_total = lambda0 I + A_hom (energy formula)\n")
        for row in cs.A_total:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    _dump_json(os.path.join(d, "spd_report.json"),
               {"config_digest": digest, "spd": spd, "beta_probe": probe, "passed": passed,
                "A_direct": cs.A_direct, "residuals": cs.residuals})
    return {"cell": cell, "correctors": cs, "spd": spd, "probe": probe, "passed": passed}


def _print_tensor(A):
    print("A_total =")
    for row in A:
        print("  " + "  ".join(repr(float(v)) for v in row))


def cmd_cell(cfg, out, jobs=1):
    _prepare(cfg, out)
    st = cell_stage(cfg, out)
    _print_tensor(st["correctors"].A_total)
    print(f"gamma = {float(st['correctors'].gamma)!r}")
    print(f"eigenvalues = {st['spd']['eigenvalues']}, bound = {st['spd']['bound']!r}")
    if not st["passed"]:
        raise AcceptanceFailure("spd_check: effective tensor violates the positivity bound")
    return EXIT_OK


def _domain_only(cfg):
    if cfg.shape.relaxed:
        raise ConfigError("geometry.kind: the laminate is a cell-only test mode",
                          ["geometry.kind: laminate cannot be tiled into a domain"])


def _run_trajectories(cfg, out, which):
    _domain_only(cfg)
    _prepare(cfg, out)
    digest = cfg.digest()
    if which == "macro":
        st = cell_stage(cfg, out)
        if not st["passed"]:
            raise AcceptanceFailure("spd_check: refusing to run the macro problem")
        cell, cs = st["cell"], st["correctors"]
    else:
        cell = load_cell_mesh(cfg, out)
    failures = []
    for n in cfg.sweep:
        mesh = tile_domain_mesh(cell, n)
        stride = cfg.snapshot_stride or 0
        if which == "micro":
            tr = run_micro(mesh, cfg.coeffs, cfg.bump, cfg.T, cfg.dt, cfg.theta, stride=stride)
        else:
            tr = run_macro(mesh, cs.A_total, cs.gamma, cfg.bump, cfg.T, cfg.dt, cfg.theta,
                           stride=stride)
        d = os.path.join(out, f"eps_{n}")
        os.makedirs(d, exist_ok=True)
        write_energies(os.path.join(d, f"energies_{which}.csv"), tr.times, tr.energies, digest)
        if stride:
            for k, u in sorted(tr.snapshots.items()):
                write_snapshot(os.path.join(d, which), mesh, k, u, digest)
        ident = tr.max_identity_residual()
        summary = {"config_digest": digest, "eps": 1.0 / n, "n": n, "n_dofs": len(mesh.nodes),
                   "energy_monotone": tr.energy_monotone(), "energy_identity_residual": ident,
                   "flags": tr.flags}
        _dump_json(os.path.join(d, f"{which}_summary.json"), summary)
        print(f"eps=1/{n}: {len(mesh.nodes)} dofs, E0={float(tr.energies[0])!r}, "
              f"E_T={float(tr.energies[-1])!r}, identity residual {ident:.2e}")
        if not tr.energy_monotone():
            failures.append(f"energy_dissipation (eps=1/{n})")
        if cfg.theta == 1.0 and ident > 1e-9:
            failures.append(f"energy_identity (eps=1/{n})")
    if failures:
        raise AcceptanceFailure(failures[0])
    return EXIT_OK


def cmd_micro(cfg, out, jobs=1):
    return _run_trajectories(cfg, out, "micro")


def cmd_macro(cfg, out, jobs=1):
    return _run_trajectories(cfg, out, "macro")


def _job(args):
    cell, cs, cfg, n, snapdir = args
    return run_eps_job(cell, cs, cfg.coeffs, cfg.bump, n, cfg.T, cfg.dt, cfg.theta,
                       gamma0=cfg.gamma0, cutoff=cfg.cutoff, chain=cfg.chain_rule,
                       snapshot_dir=snapdir, snapshot_stride=cfg.snapshot_stride,
                       digest=cfg.digest())


def run_sweep(cfg, out, jobs=1):
    """Cell stage, per-eps jobs, time-step guard and report files.

    Returns ``(report, checks, timings)``.
    """
    _domain_only(cfg)
    if len(cfg.sweep) < 3:
        raise ConfigError("sweep.n: the rate fit needs at least 3 eps values",
                          ["sweep.n: fewer than 3 entries"])
    _prepare(cfg, out)
    digest = cfg.digest()
    timings = {}
    t0 = time.perf_counter()
    st = cell_stage(cfg, out)
    timings["cell"] = time.perf_counter() - t0
    if not st["passed"]:
        raise AcceptanceFailure("spd_check: effective tensor violates the positivity bound")
    cell, cs = st["cell"], st["correctors"]
    args = [(cell, cs, cfg, n, os.path.join(out, f"eps_{n}") if cfg.snapshot_stride else None)
            for n in cfg.sweep]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_job, args))
    else:
        rows = [_job(a) for a in args]
    t1 = time.perf_counter()
    guard = time_step_guard(cell, cs, cfg.coeffs, cfg.bump, cfg.guard_n, cfg.T, cfg.dt,
                            cfg.theta)
    timings["guard"] = time.perf_counter() - t1

    # single writer for every file of the run directory
    clean = []
    for r in rows:
        n = r["n"]
        d = os.path.join(out, f"eps_{n}")
        os.makedirs(d, exist_ok=True)
        write_energies(os.path.join(d, "energies_micro.csv"), r["times"], r["energies_micro"], digest)
        write_energies(os.path.join(d, "energies_macro.csv"), r["times"], r["energies_macro"], digest)
        timings[f"eps_{n}"] = r["elapsed"]
        row = {k: v for k, v in r.items()
               if k not in ("times", "energies_micro", "energies_macro", "elapsed")}
        _dump_json(os.path.join(d, "row.json"), row)
        clean.append(row)
    checks = evaluate_checks(clean, cfg, guard, st)
    report = ConvergenceReport(clean, digest, extra={
        "A_total": cs.A_total, "gamma": cs.gamma, "time_step_guard": guard,
        "checks": checks})
    report.write_csv(os.path.join(out, "report.csv"))
    report.write_json(os.path.join(out, "report.json"))
    report.write_svg(os.path.join(out, "report.svg"))
    with open(os.path.join(out, "timings.log"), "w") as fh:
        for k, v in timings.items():
            fh.write(f"{k} {v:.2f} s\n")
    return report, checks, timings


def cmd_converge(cfg, out, jobs=1):
    report, checks, _ = run_sweep(cfg, out, jobs)
    fits = report.fits()
    for r in report.rows:
        print(f"eps={r['eps']:.6g}  err_h1={r['err_h1_corrected']:.6e}  "
              f"err_l2_plain={r['err_l2_plain']:.6e}  err_l2_corr={r['err_l2_corrected']:.6e}")
    if report.degenerate:
        print("status: degenerate (errors at solver tolerance); slope fit skipped")
    for c, f in fits.items():
        print(f"slope[{c}] = {f['slope']:.4f}  constant = {f['constant']:.4g}")
    for c in checks:
        print(f"[{'PASS' if c['passed'] else 'FAIL'}] {c['name']}: {c['detail']}")
    failed = [c for c in checks if not c["passed"]]
    if failed:
        raise AcceptanceFailure(failed[0]["name"])
    return EXIT_OK


def cmd_mesh_report(cfg, out, jobs=1):
    _prepare(cfg, out)
    cell = load_cell_mesh(cfg, out)
    rep = {"config_digest": cfg.digest(), "cell": mesh_quality_report(cell), "domains": {}}
    if not cfg.shape.relaxed:
        for n in cfg.sweep:
            rep["domains"][str(n)] = mesh_quality_report(tile_domain_mesh(cell, n))
    _dump_json(os.path.join(out, "mesh_report.json"), rep)
    c = rep["cell"]
    print(f"cell: {c['n_nodes']} nodes, {c['n_triangles']} triangles, "
          f"angles [{c['min_angle']:.1f}, {c['max_angle']:.1f}] deg")
    for n, d in rep["domains"].items():
        print(f"eps=1/{n}: {d['n_nodes']} nodes, {d['n_triangles']} triangles, "
              f"{d['n_loops']} interface loops")
    return EXIT_OK


COMMANDS = {"cell": cmd_cell, "micro": cmd_micro, "macro": cmd_macro,
            "converge": cmd_converge, "mesh-report": cmd_mesh_report}


def build_parser():
    p = argparse.ArgumentParser(prog="lbhomog", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--out", help="run directory (overrides [output] directory)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for the eps sweep")
    p.add_argument("--h", type=float, help="cell mesh size override")
    p.add_argument("--eps-list", help="comma-separated eps values, e.g. 1/2,1/4,1/8")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        overrides = {}
        if args.h is not None:
            overrides["discretization.h"] = repr(args.h)
        if args.eps_list:
            try:
                overrides["sweep.n"] = ", ".join(str(n) for n in parse_eps_list(args.eps_list))
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"--eps-list: {exc}", [f"sweep.n: {exc}"]) from exc
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = parse_config(args.config, overrides)
        out = args.out or cfg.output
        return COMMANDS[args.command](cfg, out, args.jobs)
    except ConfigError as exc:
        where = f" (line {exc.lineno})" if exc.lineno else ""
        print(f"configuration error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AcceptanceFailure as exc:
        print(f"acceptance failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except LBHomogError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
