"""Command line entry point.

Exit codes: 0 solved and audited, 2 optimizer did not reach optimality,
3 audit failed, 4 bad input. Results go to ``--output``, else to
``$CONTACT_TOPOPT_OUTDIR/<instance>.<command>.json``, the directory defaulting to
the working directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io, render
from .compliance import optimize_truss
from .conic import Status
from .continuum import sequential_socp
from .misocp import (attach_degree_limits, attach_existence_bounds, attach_no_crossing,
                     binary_model, branch_and_bound)
from .truss import crossing_pairs
from .verify import audit_continuum, audit_truss

EXIT_OK, EXIT_NONOPTIMAL, EXIT_AUDIT, EXIT_INPUT = 0, 2, 3, 4
OUTDIR_ENV = "CONTACT_TOPOPT_OUTDIR"
# the reported continuum objective is the last tangent subproblem's value, an
# upper bound on the exact compliance of the returned densities
CONTINUUM_CTOL = 1e-2

log = logging.getLogger("contact_topopt")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, Status):
        return obj.value
    return obj


def _output_path(args, suffix) -> Path:
    if args.output:
        return Path(args.output)
    base = Path(os.environ.get(OUTDIR_ENV, "."))
    return base / f"{Path(args.instance).stem}.{suffix}.json"


def _overrides(args) -> dict:
    keys = ("gap", "volume", "xmin", "xmax", "degree_max", "no_crossing", "mipgap",
            "integrality_tol", "max_iter", "workers")
    return {k: getattr(args, k, None) for k in keys}


def _exit_code(status, verification) -> int:
    if status != Status.OPTIMAL:
        return EXIT_NONOPTIMAL
    if not (verification["pass"] and verification["objective_ok"]):
        return EXIT_AUDIT
    return EXIT_OK


def _audit_truss(prob, res):
    if res.status != Status.OPTIMAL:
        return {"pass": False, "objective_ok": False, "active": [], "skipped": res.status.value}
    return audit_truss(prob.gs, prob.contact, prob.f, res.x, res).to_dict()


def _finish(args, result, svg):
    result = _jsonable(result)
    if not args.timing:
        result["stats"].pop("wall_time", None)
    path = _output_path(args, args.command)
    io.write_json(result, path)
    if args.svg:
        Path(args.svg).write_text(svg())
    v = result["verification"]
    print(f"{args.command}: status={result['status']} objective={result['objective']!r} "
          f"audit={'pass' if v['pass'] else 'FAIL'} -> {path}")
    return _exit_code(Status(result["status"]), v)


def _truss_svg(prob, res, active):
    ct = prob.contact
    return render.truss_svg(prob.gs.nodes, prob.gs.members, np.nan_to_num(res.x),
                            [] if ct is None else ct.nodes, [] if ct is None else ct.g, active,
                            prob.obstacle)


def cmd_truss_opt(args, inst):
    d = inst.get("design", {})
    if any(k in d for k in ("xmin", "xmax", "degree_max", "no_crossing")):
        raise io.InstanceError("existence, degree and crossing constraints need truss-misocp")
    prob = io.build_truss(inst)
    t0 = time.perf_counter()
    res = optimize_truss(prob.gs, prob.contact, prob.f, prob.v, io.solver_config(inst),
                         bilateral=d.get("bilateral", False))
    stats = {"iterations": res.report.get("iterations"), "wall_time": time.perf_counter() - t0,
             "solver": res.report}
    ver = _audit_truss(prob, res)
    out = io.truss_result_dict(inst, prob, res, args.command, ver, stats)
    return _finish(args, out, lambda: _truss_svg(prob, res, ver["active"]))


def cmd_truss_misocp(args, inst):
    d = inst.get("design", {})
    if d.get("bilateral"):
        raise io.InstanceError("truss-misocp supports unilateral contact only")
    prob = io.build_truss(inst)
    model = binary_model(prob.gs, prob.contact, prob.f, prob.v)
    if "xmin" in d or "xmax" in d:
        if "xmin" not in d or "xmax" not in d:
            raise io.InstanceError("existence bounds need both xmin and xmax")
        model = attach_existence_bounds(model, d["xmin"], d["xmax"])
    if "degree_max" in d:
        model = attach_degree_limits(model, d["degree_max"])
    if d.get("no_crossing"):
        model = attach_no_crossing(model, crossing_pairs(prob.gs))
    t0 = time.perf_counter()
    res, state = branch_and_bound(model, io.mip_config(inst))
    stats = {"nodes": state.node_count, "best_bound": state.best_bound, "gap": state.gap,
             "mip_status": state.status, "failed_nodes": state.failed_nodes,
             "wall_time": time.perf_counter() - t0}
    ver = _audit_truss(prob, res)
    out = io.truss_result_dict(inst, prob, res, args.command, ver, stats)
    out["design"]["pattern"] = res.report.get("pattern")
    return _finish(args, out, lambda: _truss_svg(prob, res, ver["active"]))


def _density_svg(prob, rho, active):
    ct = prob.contact
    return render.density_svg(prob.mesh.nodes, prob.mesh.elements, rho,
                              [] if ct is None else ct.nodes, [] if ct is None else ct.g,
                              active, prob.obstacle)


def cmd_continuum_opt(args, inst):
    prob = io.build_continuum(inst)
    cfg = io.sequence_config(inst)
    t0 = time.perf_counter()
    res = sequential_socp(prob.mesh, prob.fact, prob.H, prob.f, prob.v, prob.contact, cfg,
                          young=prob.young)
    stats = {"iterations": res.iterations, "history": res.history, "converged": res.converged,
             "wall_time": time.perf_counter() - t0}
    if res.status == Status.OPTIMAL:
        ver = audit_continuum(prob.mesh, prob.fact, res.rho, prob.f, prob.contact, res, p=cfg.p,
                              young=prob.young, ctol=CONTINUUM_CTOL).to_dict()
    else:
        ver = {"pass": False, "objective_ok": False, "active": [], "skipped": res.status.value}
    out = io.continuum_result_dict(inst, prob, res, args.command, ver, stats)
    if args.csv:
        Path(args.csv).write_text(render.density_csv(res.rho, prob.mesh.nx, prob.mesh.ny))
    if args.pgm:
        Path(args.pgm).write_bytes(render.density_pgm(res.rho, prob.mesh.nx, prob.mesh.ny))
    return _finish(args, out, lambda: _density_svg(prob, res.rho, ver["active"]))


def _reaudit(res):
    inst = res["instance"]
    if res["kind"] == "truss":
        prob = io.build_truss(inst)
        x = np.asarray(res["design"]["x"], dtype=float)
        out = {"u": res["displacements"], "r": res["reactions"], "q": res.get("forces"),
               "objective": res["objective"]}
        return prob, audit_truss(prob.gs, prob.contact, prob.f, x, out)
    prob = io.build_continuum(inst)
    p = inst.get("sequence", {}).get("p", 3.0)
    out = {"u": res["displacements"], "r": res["reactions"], "s": res.get("stresses"),
           "objective": res["objective"]}
    return prob, audit_continuum(prob.mesh, prob.fact, res["design"]["rho"], prob.f,
                                 prob.contact, out, p=p, young=prob.young, ctol=CONTINUUM_CTOL)


def _check_shapes(res, prob):
    if res["kind"] == "truss":
        sizes = {"x": (len(res["design"]["x"]), prob.gs.m),
                 "displacements": (len(res["displacements"]), prob.gs.n)}
    else:
        sizes = {"rho": (len(res["design"]["rho"]), prob.mesh.m),
                 "displacements": (len(res["displacements"]), prob.mesh.nbar)}
    nc = 0 if prob.contact is None else prob.contact.c
    sizes["reactions"] = (len(res["reactions"]), nc)
    for key, (got, want) in sizes.items():
        if got != want:
            raise io.InstanceError(f"{key} has length {got}, instance implies {want}")


def cmd_verify(args, _inst=None):
    res = io.load_result(args.instance)
    if res["status"] != Status.OPTIMAL.value:
        print(f"verify: result status is {res['status']}")
        return EXIT_NONOPTIMAL
    try:
        prob = io.build_truss(res["instance"]) if res["kind"] == "truss" else \
            io.build_continuum(res["instance"])
        _check_shapes(res, prob)
        _, rep = _reaudit(res)
    except (TypeError, ValueError) as exc:
        raise io.InstanceError(str(exc)) from None
    ver = rep.to_dict()
    stored = res.get("verification", {}).get("pass")
    if args.output:
        io.write_json(_jsonable(ver), args.output)
    print(f"verify: audit={'pass' if ver['pass'] else 'FAIL'} "
          f"compliance={ver['compliance']!r} objective={res['objective']!r} "
          f"stored_pass={stored} penetration={ver['max_penetration']:.3g} "
          f"adhesion={ver['max_adhesion']:.3g} complementarity={ver['complementarity']:.3g} "
          f"balance={ver['force_balance']:.3g}")
    ok = ver["pass"] and ver["objective_ok"] and stored in (None, ver["pass"])
    return EXIT_OK if ok else EXIT_AUDIT


def cmd_render(args, _inst=None):
    res = io.load_result(args.instance)
    inst = res["instance"]
    active = res.get("verification", {}).get("active", res.get("active_contact", []))
    if res["kind"] == "truss":
        prob = io.build_truss(inst)
        x = np.nan_to_num(np.asarray(res["design"]["x"], dtype=float))
        xmax = inst.get("design", {}).get("xmax")
        ct = prob.contact
        svg = render.truss_svg(prob.gs.nodes, prob.gs.members, x,
                               [] if ct is None else ct.nodes, [] if ct is None else ct.g,
                               active, prob.obstacle, xmax=xmax, threshold=args.threshold)
    else:
        prob = io.build_continuum(inst)
        rho = np.asarray(res["design"]["rho"], dtype=float)
        svg = _density_svg(prob, rho, active)
        if args.csv:
            Path(args.csv).write_text(render.density_csv(rho, prob.mesh.nx, prob.mesh.ny))
        if args.pgm:
            Path(args.pgm).write_bytes(render.density_pgm(rho, prob.mesh.nx, prob.mesh.ny))
    out = Path(args.output) if args.output else Path(args.instance).with_suffix(".svg")
    out.write_text(svg)
    print(f"render: -> {out}")
    return EXIT_OK


def cmd_generate(args, _inst=None):
    """Random small truss instance (for tests and demos)."""
    rng = np.random.default_rng(args.seed)
    nx, ny = args.nx, args.ny
    node = [int(rng.integers(1, nx + 1)), int(rng.integers(1, ny + 1))] if ny else [nx, 0]
    inst = {
        "kind": "truss",
        "name": f"random-{args.seed}",
        "units": dict(io.TRUSS_UNITS),
        "geometry": {"nx": nx, "ny": ny, "spacing": 1000.0},
        "material": {"young": 20000.0},
        "loads": [{"node": node, "force": rng.uniform(-1000, 1000, 2).round(3).tolist()}],
        "supports": {"pinned": [[0, 0]]},
        "contact": {"nodes": [[i, 0] for i in range(1, nx + 1)], "normal": [0.0, 1.0],
                    "gap": float(round(rng.uniform(0, 1), 6))},
        "budget": {"volume": float(1e6 * (nx + ny))},
    }
    io.validate_instance(inst)
    path = Path(args.output) if args.output else Path(f"random-{args.seed}.json")
    io.write_json(inst, path)
    print(f"generate: -> {path}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors (exit 4), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _parser():
    ap = _Parser(prog="contact-topopt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, solve=True):
        p.add_argument("instance", help="instance (or result) JSON file")
        p.add_argument("-o", "--output", help="output path")
        if solve:
            p.add_argument("--svg", help="also write an SVG drawing here")
            p.add_argument("--timing", action="store_true",
                           help="record wall time (results are otherwise reproducible bytewise)")
            p.add_argument("--gap", type=float, help="uniform initial gap for all candidates")
            p.add_argument("--volume", type=float,
                           help="volume bound (truss) or volume fraction (continuum)")
        return p

    p = common(sub.add_parser("truss-opt", help="continuous truss topology SOCP"))
    p.set_defaults(func=cmd_truss_opt)

    p = common(sub.add_parser("truss-misocp", help="truss design with existence variables"))
    p.add_argument("--xmin", type=float)
    p.add_argument("--xmax", type=float)
    p.add_argument("--degree-max", type=int)
    p.add_argument("--no-crossing", action="store_true")
    p.add_argument("--mipgap", type=float)
    p.add_argument("--integrality-tol", type=float)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_truss_misocp)

    p = common(sub.add_parser("continuum-opt", help="SIMP design by sequential SOCP"))
    p.add_argument("--max-iter", type=int)
    p.add_argument("--csv", help="also write densities as CSV")
    p.add_argument("--pgm", help="also write densities as a PGM image")
    p.set_defaults(func=cmd_continuum_opt)

    p = common(sub.add_parser("verify", help="re-audit a result file"), solve=False)
    p.set_defaults(func=cmd_verify)

    p = common(sub.add_parser("render", help="draw a result file"), solve=False)
    p.add_argument("--threshold", type=float, help="omit members below this area")
    p.add_argument("--csv")
    p.add_argument("--pgm")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("generate", help="write a random truss instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nx", type=int, default=3)
    p.add_argument("--ny", type=int, default=2)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_generate)
    return ap


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        inst = None
        if args.command not in ("verify", "render", "generate"):
            inst = io.apply_overrides(io.load_instance(args.instance), **_overrides(args))
        return args.func(args, inst)
    except (io.InstanceError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
