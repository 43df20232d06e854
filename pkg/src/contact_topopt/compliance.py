"""Truss compliance under unilateral contact and the SOCP design problem.

Compliance of a design ``x`` is

    pi(x) = sup { 2 f'u - u'K(x)u : C u <= g },

and equals the optimal value of the force-based problem

    min  sum_e w_e - 2 g'r
    s.t. w_e x_e >= (l_e / E) q_e^2,  sum_e q_e b_e = f + C'r,  r <= 0,

(+inf when infeasible). Treating ``x`` as a variable with ``l'x <= v`` gives the
topology SOCP. Rotated cones carry ``(sqrt(l_e/E) q_e, w_e, x_e)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .conic import ConicProgram, ConicSolution, SolverConfig, Status, certify, solve_conic
from .conic.builder import ProgramBuilder
from .truss import ContactSpec, GroundStructure


@dataclass
class ComplianceValue:
    """Compliance with explicit status; ``value`` is +inf when unbounded/infeasible."""

    value: float
    status: Status
    u: np.ndarray | None = None
    r: np.ndarray | None = None
    q: np.ndarray | None = None
    solution: ConicSolution | None = None

    @property
    def finite(self) -> bool:
        return np.isfinite(self.value)

    def __float__(self):
        return float(self.value)


@dataclass
class TrussDesignResult:
    x: np.ndarray
    w: np.ndarray
    q: np.ndarray
    r: np.ndarray
    u: np.ndarray
    objective: float
    volume: float
    status: Status
    report: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == Status.OPTIMAL


@dataclass
class QpFormulationResult:
    variant: int
    u: np.ndarray
    c: np.ndarray
    objective: float
    status: Status
    alpha: float = np.nan
    beta: float = np.nan
    program: ConicProgram | None = None
    solution: ConicSolution | None = None


@dataclass(frozen=True)
class Units:
    """Reference scales used to nondimensionalize truss programs.

    With lengths in ``L``, forces in ``F``, areas in ``A`` and Young's modulus
    ``E``, energies are measured in ``C = F^2 L / (E A)`` and displacements
    (and gaps) in ``U = C / F``. In these units E = 1 and every formula keeps
    its form, while the solver sees numbers of order one.
    """

    L: float
    F: float
    E: float
    A: float

    @property
    def C(self) -> float:
        return self.F * self.F * self.L / (self.E * self.A)

    @property
    def U(self) -> float:
        return self.F * self.L / (self.E * self.A)

    @classmethod
    def for_problem(cls, gs: GroundStructure, f, area: float) -> "Units":
        L = gs.spacing or float(np.median(gs.lengths))
        fmax = float(np.abs(f).max(initial=0.0))
        F = fmax if fmax > 0 else gs.young * area
        return cls(L=L, F=F, E=gs.young, A=area if area > 0 else 1.0)


def _check_load(gs: GroundStructure, f):
    f = np.asarray(f, dtype=float).ravel()
    if f.size != gs.n:
        raise ValueError(f"load has length {f.size}, structure has {gs.n} free DOFs")
    if not np.all(np.isfinite(f)):
        raise ValueError("load must be finite")
    return f


def _check_x(gs: GroundStructure, x):
    x = np.asarray(x, dtype=float).ravel()
    if x.size != gs.m:
        raise ValueError(f"x has length {x.size}, structure has {gs.m} members")
    if np.any(x < 0):
        raise ValueError("member areas must be nonnegative")
    return x


def _contact(gs, contact):
    return contact if contact is not None else ContactSpec.empty(gs.n)


def compliance_direct(gs: GroundStructure, contact: ContactSpec | None, f, x,
                      config: SolverConfig | None = None) -> ComplianceValue:
    """Displacement-based compliance via per-member energy epigraphs.

    ``t_e >= (E x_e / l_e) c_e^2`` is written as ``(a_e, t_e, 1)`` in K^3 with
    ``a_e = sqrt(E x_e / l_e) b_e'u``.
    """
    f, x, contact = _check_load(gs, f), _check_x(gs, x), _contact(gs, contact)
    un = Units.for_problem(gs, f, float(x.max(initial=0.0)))
    active = np.flatnonzero(x > 0)
    k = np.sqrt((x[active] / un.A) / (gs.lengths[active] / un.L))
    pb = ProgramBuilder("compliance-direct")
    u = pb.free(gs.n)
    cone = pb.rsoc(active.size, 3)
    sig = pb.orthant(contact.c)
    if active.size:
        rows = pb.equal(cone[:, 0], 0.0, "elongation")
        pb.add_terms(rows, -(sp.diags(k) @ gs.B[:, active].T), u)
        pb.equal(cone[:, 2], 1.0, "unit")
    if contact.c:
        rows = pb.rows(contact.C, u, contact.g / un.U, "contact")
        pb.diag_terms(rows, sig, 1.0)
    pb.objective(u, -2.0 * f / un.F)
    pb.objective(cone[:, 1], 1.0)
    prob = pb.build()
    sol = solve_conic(prob, config)
    if sol.status == Status.DUAL_INFEASIBLE:
        return ComplianceValue(np.inf, sol.status, solution=sol)
    if sol.status != Status.OPTIMAL:
        return ComplianceValue(np.nan, sol.status, solution=sol)
    y = sol.dual_eq
    r = un.F * y[prob.m - contact.c:] / 2.0 if contact.c else np.zeros(0)
    q = np.zeros(gs.m)
    if active.size:
        q[active] = un.F * k * y[:active.size] / 2.0
    return ComplianceValue(-un.C * sol.objective, sol.status, u=un.U * sol.primal[u], r=r, q=q,
                           solution=sol)


def compliance_dual(gs: GroundStructure, contact: ContactSpec | None, f, x,
                    config: SolverConfig | None = None) -> ComplianceValue:
    """Force-based compliance; members with ``x_e = 0`` carry no force."""
    f, x, contact = _check_load(gs, f), _check_x(gs, x), _contact(gs, contact)
    un = Units.for_problem(gs, f, float(x.max(initial=0.0)))
    active = np.flatnonzero(x > 0)
    # qhat = scale * cone head with unit third entries, so thin members stay well scaled
    scale = np.sqrt(x[active] / un.A / (gs.lengths[active] / un.L))
    pb = ProgramBuilder("compliance-dual")
    cone = pb.rsoc(active.size, 3)
    rneg = pb.orthant(contact.c)  # -r >= 0
    if active.size:
        pb.equal(cone[:, 2], 1.0, "unit")
    rows = pb.rows(gs.B[:, active] @ sp.diags(scale), cone[:, 0], f / un.F, "balance")
    if contact.c:
        pb.add_terms(rows, contact.C.T, rneg)
    pb.objective(cone[:, 1], 1.0)
    pb.objective(rneg, 2.0 * contact.g / un.U)
    prob = pb.build()
    sol = solve_conic(prob, config)
    if sol.status == Status.PRIMAL_INFEASIBLE:
        return ComplianceValue(np.inf, sol.status, solution=sol)
    if sol.status != Status.OPTIMAL:
        return ComplianceValue(np.nan, sol.status, solution=sol)
    q = np.zeros(gs.m)
    q[active] = un.F * scale * sol.primal[cone[:, 0]]
    return ComplianceValue(un.C * sol.objective, sol.status, q=q, r=-un.F * sol.primal[rneg],
                           u=un.U * sol.dual_eq[rows] / 2.0, solution=sol)


@dataclass
class TopologySOCP:
    """The topology program (in :class:`Units`) with index maps back to (x, w, q, r).

    Only the members listed in ``active`` carry a cone; the others are absent
    (x = 0). ``extra`` holds whatever the ``extend`` hook of
    :func:`build_topology_socp` returned.
    """

    program: ConicProgram | None
    cone: np.ndarray  # (len(active), 3): (sqrt(l) q, w, x), nondimensional
    r: np.ndarray  # variables holding -r (unilateral) or r (bilateral)
    force_rows: np.ndarray
    volume_row: int
    qscale: np.ndarray  # q = qscale * cone head
    units: Units
    bilateral: bool
    active: np.ndarray = None
    extra: object = None


def build_topology_socp(gs: GroundStructure, contact: ContactSpec | None, f, v: float,
                        bilateral: bool = False, active=None, extend=None) -> TopologySOCP:
    """min sum w - 2 g'r over (x, w, q, r) with l'x <= v.

    ``bilateral`` drops ``r <= 0``, so the obstacle holds the nodes in both
    directions. The program is stated in the nondimensional units of
    :class:`Units` with the area scale ``v / sum(l)``. ``extend(builder,
    model)`` may add variables and rows before the program is assembled.
    """
    f, contact = _check_load(gs, f), _contact(gs, contact)
    if not v > 0:
        raise ValueError("volume bound must be positive")
    active = np.arange(gs.m) if active is None else np.asarray(active, dtype=np.int64)
    un = Units.for_problem(gs, f, v / gs.lengths.sum())
    lhat = gs.lengths[active] / un.L
    qscale = un.F / np.sqrt(lhat)
    pb = ProgramBuilder("topology-socp")
    cone = pb.rsoc(active.size, 3)
    if bilateral:
        rv = pb.free(contact.c)
        rsign = 1.0
    else:
        rv = pb.orthant(contact.c)
        rsign = -1.0
    slack = pb.orthant(1)
    force_rows = pb.rows(gs.B[:, active] @ sp.diags(1.0 / np.sqrt(lhat)), cone[:, 0], f / un.F,
                         "balance")
    if contact.c:
        # balance: sum q b - C'r = f
        pb.add_terms(force_rows, -rsign * contact.C.T, rv)
    vrow = pb.rows(lhat[None, :], cone[:, 2], [v / (un.A * un.L)], "volume")
    pb.diag_terms(vrow, slack, 1.0)
    pb.objective(cone[:, 1], 1.0)
    pb.objective(rv, -2.0 * rsign * contact.g / un.U)
    model = TopologySOCP(None, cone, rv, force_rows, int(vrow[0]), qscale, un, bilateral, active)
    if extend is not None:
        model.extra = extend(pb, model)
    model.program = pb.build()
    return model


def _design_from_solution(gs, model: TopologySOCP, sol: ConicSolution, v) -> TrussDesignResult:
    report = {"status": sol.status.value, "iterations": sol.iterations}
    if sol.info.get("reduced_accuracy"):
        report["reduced_accuracy"] = True
    if sol.status != Status.OPTIMAL:
        nan = np.full(gs.m, np.nan)
        obj = np.inf if sol.status == Status.PRIMAL_INFEASIBLE else np.nan
        return TrussDesignResult(nan, nan.copy(), nan.copy(), np.full(model.r.size, np.nan),
                                 np.full(gs.n, np.nan), obj, v, sol.status, report)
    report.update(certify(model.program, sol))
    un = model.units
    p = sol.primal
    rsign = 1.0 if model.bilateral else -1.0
    x, w, q = np.zeros(gs.m), np.zeros(gs.m), np.zeros(gs.m)
    act = model.active
    x[act] = un.A * p[model.cone[:, 2]]
    w[act] = un.C * p[model.cone[:, 1]]
    q[act] = model.qscale * p[model.cone[:, 0]]
    return TrussDesignResult(
        x=x, w=w, q=q,
        r=un.F * rsign * p[model.r],
        u=un.U * sol.dual_eq[model.force_rows] / 2.0,
        objective=float(un.C * sol.objective),
        volume=float(v),
        status=sol.status,
        report=report,
    )


def optimize_truss(gs: GroundStructure, contact: ContactSpec | None, f, v: float,
                   config: SolverConfig | None = None, bilateral: bool = False) -> TrussDesignResult:
    """Solve the topology SOCP; ``u`` is half the force-balance multiplier."""
    model = build_topology_socp(gs, contact, f, v, bilateral=bilateral)
    sol = solve_conic(model.program, config)
    return _design_from_solution(gs, model, sol, v)


def build_qp_formulation(gs: GroundStructure, contact: ContactSpec | None, f, v: float,
                         variant: int) -> tuple[ConicProgram, dict]:
    """Displacement-only forms of the design problem.

    variant 13: max 2f'u - alpha,  alpha >= (E v / l_e^2) c_e^2
    variant 14: max 2f'u - beta^2, |sqrt(E v) c_e / l_e| <= beta
    both with c = B'u and C u <= g. Returned as a minimization of the negated
    objective in the units of :class:`Units`, together with the index map
    (``idx["units"]`` holds the scales).
    """
    f, contact = _check_load(gs, f), _contact(gs, contact)
    if not v > 0:
        raise ValueError("volume bound must be positive")
    if variant not in (13, 14):
        raise ValueError("variant must be 13 or 14")
    m = gs.m
    un = Units.for_problem(gs, f, v / gs.lengths.sum())
    k = np.sqrt(v / (un.A * un.L)) / (gs.lengths / un.L)
    pb = ProgramBuilder(f"qp-{variant}")
    u = pb.free(gs.n)
    c = pb.free(m)
    idx = {"u": u, "c": c, "units": un}
    rows = pb.rows(-gs.B.T, u, np.zeros(m), "elongation")
    pb.diag_terms(rows, c, 1.0)
    if variant == 13:
        alpha = pb.free(1)
        cone = pb.rsoc(m, 3)  # (k c_e, alpha_e, 1)
        rows = pb.equal(cone[:, 0], 0.0, "scaled")
        pb.diag_terms(rows, c, -k)
        rows = pb.equal(cone[:, 1], 0.0, "copy")
        pb.diag_terms(rows, np.repeat(alpha, m), -1.0)
        pb.equal(cone[:, 2], 1.0, "unit")
        pb.objective(alpha, 1.0)
        idx["alpha"] = alpha
    else:
        cone = pb.rsoc(1, 3)[0]  # (beta, t, 1): t >= beta^2
        sl = pb.orthant(2 * m)
        beta = cone[0]
        rows = pb.rows(None, None, np.zeros(2 * m), "bound")
        pb.diag_terms(rows, np.repeat(beta, 2 * m), 1.0)
        pb.diag_terms(rows, np.concatenate((c, c)), np.concatenate((-k, k)))
        pb.diag_terms(rows, sl, -1.0)
        pb.equal([cone[2]], 1.0, "unit")
        pb.objective([cone[1]], 1.0)
        idx["beta"] = np.array([beta])
    sig = pb.orthant(contact.c)
    if contact.c:
        rows = pb.rows(contact.C, u, contact.g / un.U, "contact")
        pb.diag_terms(rows, sig, 1.0)
    pb.objective(u, -2.0 * f / un.F)
    return pb.build(), idx


def solve_qp_formulation(gs: GroundStructure, contact: ContactSpec | None, f, v: float,
                         variant: int, config: SolverConfig | None = None) -> QpFormulationResult:
    prob, idx = build_qp_formulation(gs, contact, f, v, variant)
    sol = solve_conic(prob, config)
    if sol.status != Status.OPTIMAL:
        obj = np.inf if sol.status == Status.DUAL_INFEASIBLE else np.nan
        return QpFormulationResult(variant, np.full(gs.n, np.nan), np.full(gs.m, np.nan), obj,
                                   sol.status, program=prob, solution=sol)
    p, un = sol.primal, idx["units"]
    res = QpFormulationResult(variant, un.U * p[idx["u"]], un.U * p[idx["c"]],
                              -un.C * sol.objective, sol.status, program=prob, solution=sol)
    if variant == 13:
        res.alpha = float(un.C * p[idx["alpha"][0]])
    else:
        res.beta = float(np.sqrt(un.C) * p[idx["beta"][0]])
    return res
