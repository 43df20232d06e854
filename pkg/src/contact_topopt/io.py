"""Instance and result files (JSON, schema-validated) and model assembly from them."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .conic import SolverConfig
from .continuum import (RegularMesh, SequenceConfig, build_density_filter,
                        factorize_element_stiffness, q4_element_stiffness)
from .misocp import MipConfig
from .truss import ContactSpec, GroundStructure, generate_ground_structure, halfplane_contact

TRUSS_UNITS = {"force": "N", "length": "mm", "stress": "MPa"}
RESULT_VERSION = 1


class InstanceError(ValueError):
    """Malformed or inconsistent instance/result file."""


@lru_cache(maxsize=None)
def instance_schema() -> dict:
    text = resources.files(__package__).joinpath("schema/instance.schema.json").read_text()
    return json.loads(text)


def validate_instance(inst: dict) -> dict:
    try:
        jsonschema.validate(inst, instance_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise InstanceError(f"{path or '<root>'}: {exc.message}") from None
    if inst["kind"] == "truss" and "budget" in inst and "volume" not in inst["budget"]:
        raise InstanceError("truss budgets are absolute volumes")
    if inst["kind"] == "continuum" and inst["geometry"]["ny"] < 1:
        raise InstanceError("continuum meshes need ny >= 1")
    d = inst.get("design", {})
    if "xmin" in d and "xmax" in d and d["xmin"] > d["xmax"]:
        raise InstanceError("xmin exceeds xmax")
    return inst


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InstanceError(f"cannot read {path}: {exc}") from None


def write_json(obj, path):
    """Floats keep full precision (shortest round-tripping repr)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_instance(path) -> dict:
    return validate_instance(read_json(path))


def apply_overrides(inst: dict, gap=None, volume=None, xmin=None, xmax=None, degree_max=None,
                    no_crossing=None, mipgap=None, integrality_tol=None, max_iter=None,
                    workers=None) -> dict:
    """Copy of ``inst`` with command-line overrides applied (and re-validated)."""
    out = copy.deepcopy(inst)
    if gap is not None:
        if "contact" not in out:
            raise InstanceError("--gap needs a contact section")
        out["contact"].pop("point", None)
        out["contact"]["gap"] = gap
    if volume is not None:
        key = "volume" if out["kind"] == "truss" else "fraction"
        out["budget"] = {key: volume}
    design = out.setdefault("design", {})
    for key, val in (("xmin", xmin), ("xmax", xmax), ("degree_max", degree_max)):
        if val is not None:
            design[key] = val
    if no_crossing:
        design["no_crossing"] = True
    if not design:
        del out["design"]
    for section, key, val in (("mip", "mipgap", mipgap), ("mip", "integrality_tol", integrality_tol),
                              ("mip", "workers", workers)):
        if val is not None:
            out.setdefault(section, {})[key] = val
    if max_iter is not None:
        section = "sequence" if out["kind"] == "continuum" else "solver"
        out.setdefault(section, {})["max_iter"] = max_iter
    return validate_instance(out)


# model assembly


@dataclass
class TrussProblem:
    gs: GroundStructure
    contact: ContactSpec | None
    f: np.ndarray  # free DOFs
    v: float
    obstacle: dict | None  # echo of the contact section, for rendering


@dataclass
class ContinuumProblem:
    mesh: RegularMesh
    fact: object
    H: object
    contact: ContactSpec | None
    f: np.ndarray  # full DOFs
    v: float  # absolute, in element volumes
    young: float
    obstacle: dict | None


def _node(ref, grid):
    nx, ny = grid
    if isinstance(ref, int):
        if ref >= (nx + 1) * (ny + 1):
            raise InstanceError(f"node {ref} does not exist")
        return ref
    ix, iy = ref
    if ix > nx or iy > ny:
        raise InstanceError(f"grid point {list(ref)} lies outside the {nx}x{ny} grid")
    return iy * (nx + 1) + ix


def _fixed_dofs(inst, grid):
    sup = inst.get("supports", {})
    dofs = set(sup.get("dofs", []))
    for ref in sup.get("pinned", []):
        k = _node(ref, grid)
        dofs.update((2 * k, 2 * k + 1))
    ndof = 2 * (grid[0] + 1) * (grid[1] + 1)
    if any(d >= ndof for d in dofs):
        raise InstanceError("support dof out of range")
    return tuple(sorted(dofs))


def _full_load(inst, grid):
    f = np.zeros(2 * (grid[0] + 1) * (grid[1] + 1))
    for ld in inst["loads"]:
        k = _node(ld["node"], grid)
        f[2 * k:2 * k + 2] += ld["force"]
    return f


def _contact(structure, inst, grid):
    sec = inst.get("contact")
    if not sec or not sec["nodes"]:
        return None
    nodes = [_node(ref, grid) for ref in sec["nodes"]]
    if len(set(nodes)) != len(nodes):
        raise InstanceError("duplicate contact candidates")
    normal = np.asarray(sec["normal"], dtype=float)
    nrm = np.linalg.norm(normal)
    if nrm == 0:
        raise InstanceError("contact normal must be nonzero")
    normal = normal / nrm
    if "point" in sec:
        point = sec["point"]
    else:
        # obstacle touching the candidate nearest to it, then a uniform gap
        X = structure.nodes[nodes]
        point = X[np.argmin(X @ normal)]
    try:
        ct = halfplane_contact(structure, nodes, point, normal)
    except ValueError as exc:
        raise InstanceError(str(exc)) from None
    if "gap" in sec:
        ct = ct.with_gaps(sec["gap"])
    return ct


def solver_config(inst) -> SolverConfig:
    return SolverConfig(**inst.get("solver", {}))


def mip_config(inst) -> MipConfig:
    return MipConfig(solver=solver_config(inst), **inst.get("mip", {}))


def sequence_config(inst) -> SequenceConfig:
    return SequenceConfig(solver=solver_config(inst), **inst.get("sequence", {}))


def build_truss(inst) -> TrussProblem:
    if inst["kind"] != "truss":
        raise InstanceError("not a truss instance")
    geo = inst["geometry"]
    grid = (geo["nx"], geo["ny"])
    fixed = _fixed_dofs(inst, grid)
    try:
        gs = generate_ground_structure(*grid, spacing=geo.get("spacing", 1.0),
                                       young=inst.get("material", {}).get("young", 1.0),
                                       fixed_dofs=fixed)
    except ValueError as exc:
        raise InstanceError(str(exc)) from None
    full = _full_load(inst, grid)
    if np.any(full[list(fixed)] != 0):
        raise InstanceError("load applied to a fixed DOF")
    if "budget" not in inst:
        raise InstanceError("truss instances need budget.volume")
    return TrussProblem(gs, _contact(gs, inst, grid), full[gs.dof_map >= 0],
                        float(inst["budget"]["volume"]), inst.get("contact"))


def build_continuum(inst) -> ContinuumProblem:
    if inst["kind"] != "continuum":
        raise InstanceError("not a continuum instance")
    geo = inst["geometry"]
    grid = (geo["nx"], geo["ny"])
    mat = inst.get("material", {})
    young = mat.get("young", 1.0)
    size = geo.get("size", 1.0)
    try:
        mesh = RegularMesh(*grid, size=size, fixed_dofs=_fixed_dofs(inst, grid))
        fact = factorize_element_stiffness(q4_element_stiffness(1.0, mat.get("nu", 0.3), size))
    except ValueError as exc:
        raise InstanceError(str(exc)) from None
    full = _full_load(inst, grid)
    if np.any(full[list(mesh.fixed_dofs)] != 0):
        raise InstanceError("load applied to a fixed DOF")
    # filter radius is given in element widths
    H = build_density_filter(mesh, inst.get("filter", {}).get("radius", 1.5) * size)
    budget = inst.get("budget", {"fraction": 0.5})
    v = budget["fraction"] * mesh.m if "fraction" in budget else budget["volume"] / size ** 2
    if not 0 < v <= mesh.m:
        raise InstanceError("volume budget must lie in (0, number of elements]")
    return ContinuumProblem(mesh, fact, H, _contact(mesh, inst, grid), full, float(v), young,
                            inst.get("contact"))


# results


def _list(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def truss_result_dict(inst, prob: TrussProblem, res, command, verification, stats) -> dict:
    obj = float(res.objective)
    out = {
        "version": RESULT_VERSION,
        "kind": "truss",
        "command": command,
        "status": str(res.status.value),
        "objective": obj,
        "units": {**TRUSS_UNITS, **inst.get("units", {}), "energy": "N*mm"},
        "design": {"x": _list(res.x), "w": _list(res.w), "volume": prob.v},
        "forces": _list(res.q),
        "reactions": _list(res.r),
        "displacements": _list(res.u),
        "active_contact": list(verification["active"]),
        "contact_nodes": [] if prob.contact is None else prob.contact.nodes.tolist(),
        "stats": stats,
        "verification": verification,
        "instance": inst,
    }
    if out["units"]["force"] == "N" and out["units"]["length"] == "mm":
        out["objective_J"] = obj / 1000.0
    return out


def continuum_result_dict(inst, prob: ContinuumProblem, res, command, verification,
                          stats) -> dict:
    return {
        "version": RESULT_VERSION,
        "kind": "continuum",
        "command": command,
        "status": str(res.status.value),
        "objective": float(res.objective),
        "units": {"system": "dimensionless"},
        "design": {"rho": _list(res.rho), "x": _list(res.x), "volume": prob.v},
        "stresses": _list(res.s),
        "reactions": _list(res.r),
        "support_reactions": _list(res.t),
        "displacements": _list(res.u),
        "active_contact": list(verification["active"]),
        "contact_nodes": [] if prob.contact is None else prob.contact.nodes.tolist(),
        "stats": stats,
        "verification": verification,
        "instance": inst,
    }


def load_result(path) -> dict:
    res = read_json(path)
    for key in ("kind", "objective", "design", "reactions", "displacements", "instance"):
        if key not in res:
            raise InstanceError(f"result file lacks '{key}'")
    validate_instance(res["instance"])
    return res
