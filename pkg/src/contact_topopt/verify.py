"""Independent certification of contact equilibria.

For a fixed stiffness ``K = R R'`` the equilibrium maximizes ``2 f'u - u'Ku``
over ``C u <= g``. It is solved here in primal energy form,

    min  sum_i t_i - 2 f'u   s.t.  y = R'u,  t_i >= y_i^2,  C u + s = g,  s >= 0,

which shares no builder with the optimizers. Reactions are ``r = -lambda / 2``
for the multipliers ``lambda >= 0`` of the contact rows, so that
``K u = f + C'r`` and ``r <= 0``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .conic import SolverConfig, Status, solve_conic
from .conic.builder import ProgramBuilder
from .truss import ContactSpec, GroundStructure

# displacements converge like the square root of the gap, so audits solve tightly
AUDIT_SOLVER = SolverConfig(gap_tol=1e-11, feas_tol=1e-11)


@dataclass
class Equilibrium:
    u: np.ndarray | None
    r: np.ndarray | None
    compliance: float
    status: Status


@dataclass
class EquilibriumReport:
    u: np.ndarray
    r: np.ndarray
    max_penetration: float
    max_adhesion: float
    complementarity: float
    force_balance: float
    compliance: float  # from the independent equilibrium solve
    objective: float  # as reported by the optimizer (nan when not given)
    compliance_error: float  # relative
    tolerances: dict
    active: list  # candidate rows in contact
    passed: bool

    @property
    def objective_ok(self) -> bool:
        return bool(self.compliance_error <= self.tolerances["compliance"])

    def to_dict(self) -> dict:
        out = asdict(self)
        out["u"], out["r"] = self.u.tolist(), self.r.tolist()
        out["pass"] = out.pop("passed")
        out["objective_ok"] = self.objective_ok
        return out


def _factor(K) -> np.ndarray:
    """Dense R with K = R R' for a symmetric PSD matrix."""
    K = K.toarray() if sp.issparse(K) else np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("K must be square")
    if not np.allclose(K, K.T, rtol=0, atol=1e-12 * (1 + np.abs(K).max(initial=0))):
        raise ValueError("K must be symmetric")
    lam, V = np.linalg.eigh(K)
    if lam.size and lam.min() < -1e-10 * max(lam.max(), 1.0):
        raise ValueError("K must be positive semidefinite")
    keep = lam > 1e-14 * max(lam.max(initial=0.0), 1e-300)
    return V[:, keep] * np.sqrt(lam[keep])


def solve_contact_equilibrium(K, f, contact: ContactSpec | None = None, factor=None,
                              config: SolverConfig | None = None) -> Equilibrium:
    """Maximize ``2 f'u - u'Ku`` subject to ``C u <= g``.

    ``factor`` may supply ``R`` with ``K = R R'`` (sparse is fine); otherwise it
    is computed from a dense eigendecomposition of ``K``. Unboundedness
    (a load not carried by the stiffness and the obstacle) returns
    ``compliance = inf`` with status DUAL_INFEASIBLE.
    """
    f = np.asarray(f, dtype=float).ravel()
    n = f.size
    R = _factor(K) if factor is None else sp.csc_matrix(factor, dtype=float)
    if R.shape[0] != n:
        raise ValueError(f"stiffness has {R.shape[0]} rows, load has length {n}")
    contact = contact if contact is not None else ContactSpec.empty(n)
    if contact.C.shape[1] != n:
        raise ValueError("contact matrix does not match the number of DOFs")
    R = sp.csc_matrix(R)
    norms = np.sqrt(np.asarray(R.multiply(R).sum(axis=0)).ravel())
    R = R[:, np.flatnonzero(norms > 0)]
    # forces in F, stiffness in k, displacements in F / k, energies in F^2 / k
    F = float(np.abs(f).max(initial=0.0)) or 1.0
    k = float(norms.max(initial=0.0)) ** 2 or 1.0
    U = F / k
    pb = ProgramBuilder("contact-equilibrium")
    u = pb.free(n)
    y = pb.free(R.shape[1])
    cone = pb.rsoc(R.shape[1], 3)
    sl = pb.orthant(contact.c)
    if R.shape[1]:
        rows = pb.rows(-R.T / np.sqrt(k), u, np.zeros(R.shape[1]), "factor")
        pb.diag_terms(rows, y, 1.0)
        rows = pb.equal(cone[:, 0], 0.0, "head")
        pb.diag_terms(rows, y, -1.0)
        pb.equal(cone[:, 2], 1.0, "unit")
        pb.objective(cone[:, 1], 1.0)
    if contact.c:
        rows = pb.rows(contact.C, u, contact.g / U, "contact")
        pb.diag_terms(rows, sl, 1.0)
    pb.objective(u, -2.0 * f / F)
    prob = pb.build()
    sol = solve_conic(prob, config or AUDIT_SOLVER)
    if sol.status == Status.DUAL_INFEASIBLE:
        return Equilibrium(None, None, np.inf, sol.status)
    if sol.status != Status.OPTIMAL:
        return Equilibrium(None, None, np.nan, sol.status)
    r = F * sol.dual_eq[prob.m - contact.c:] / 2.0 if contact.c else np.zeros(0)
    return Equilibrium(U * sol.primal[u], r, -F * F / k * sol.objective, sol.status)


def _report(K, f, contact, eq, out_u, out_r, objective, rtol, ctol, active_tol, internal=None):
    u = eq.u if out_u is None else np.asarray(out_u, dtype=float)
    r = eq.r if out_r is None else np.asarray(out_r, dtype=float)
    if u is None:
        u, r = np.full(f.size, np.nan), np.full(contact.c, np.nan)
    Fs = float(np.abs(f).max(initial=0.0)) or 1.0
    Ls = float(np.abs(contact.g).max(initial=0.0)) + float(np.abs(u).max(initial=0.0)) + 1.0
    slack = contact.g - contact.C @ u
    tols = dict(penetration=rtol * Ls, adhesion=rtol * Fs, complementarity=rtol * Fs * Ls,
                force_balance=rtol * Fs, compliance=ctol)
    pen = float(np.max(-slack, initial=0.0))
    adh = float(np.max(r, initial=0.0))
    comp = float(np.max(np.abs(r * slack), initial=0.0))
    # balance of the optimizer's internal forces when given (its displacements are
    # multipliers, accurate only to about the square root of the solver gap)
    inner = K @ u if internal is None else internal
    bal = float(np.abs(inner - f - contact.C.T @ r).max(initial=0.0))
    if objective is None:
        err = np.nan
    elif not (np.isfinite(objective) and np.isfinite(eq.compliance)):
        err = 0.0 if objective == eq.compliance else np.inf
    else:
        err = abs(objective - eq.compliance) / max(abs(eq.compliance), 1e-300)
    # contact = closed gap with a nonzero reaction (any sign, so bilateral solves are marked too)
    act = (np.abs(slack) <= active_tol * Ls) & (np.abs(r) > active_tol * Fs)
    checks = (pen <= tols["penetration"], adh <= tols["adhesion"],
              comp <= tols["complementarity"], bal <= tols["force_balance"])
    return EquilibriumReport(
        u=u, r=r, max_penetration=pen, max_adhesion=adh, complementarity=comp,
        force_balance=bal, compliance=float(eq.compliance),
        objective=np.nan if objective is None else float(objective),
        compliance_error=float(err), tolerances=tols, active=np.flatnonzero(act).tolist(),
        passed=bool(all(checks) and np.all(np.isfinite(u))))


def audit_truss(gs: GroundStructure, contact: ContactSpec | None, f, x, output=None,
                rtol: float = 1e-6, ctol: float = 1e-5, active_tol: float = 1e-6,
                config: SolverConfig | None = None) -> EquilibriumReport:
    """Audit a truss design and (optionally) an optimizer's ``u``, ``r`` and objective.

    ``output`` may be a result object or a dict with keys ``u``, ``r`` and
    ``objective``; missing entries are taken from the independent solve.
    """
    f = np.asarray(f, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    if f.size != gs.n or x.size != gs.m:
        raise ValueError("design or load does not match the ground structure")
    contact = contact if contact is not None else ContactSpec.empty(gs.n)
    x = np.maximum(x, 0.0)
    R = gs.B @ sp.diags(np.sqrt(gs.young * x / gs.lengths))
    K = (R @ R.T).tocsr()
    eq = solve_contact_equilibrium(K, f, contact, factor=R, config=config)
    u, r, obj = _fields(output)
    q = _get(output, "q")
    internal = None if q is None else gs.B @ np.asarray(q, dtype=float)
    return _report(K, f, contact, eq, u, r, obj, rtol, ctol, active_tol, internal)


def audit_continuum(mesh, fact, rho, f, contact: ContactSpec | None = None, output=None,
                    p: float = 3.0, young: float = 1.0, rtol: float = 1e-6,
                    ctol: float = 1e-5, active_tol: float = 1e-6,
                    config: SolverConfig | None = None) -> EquilibriumReport:
    """Audit a density field on a :class:`RegularMesh` (free DOFs only)."""
    rho = np.asarray(rho, dtype=float).ravel()
    f = np.asarray(f, dtype=float).ravel()
    if rho.size != mesh.m:
        raise ValueError("density does not match the mesh")
    if f.size == mesh.nbar:
        f = mesh.reduce(f)
    if f.size != mesh.n:
        raise ValueError("load does not match the mesh")
    contact = contact if contact is not None else ContactSpec.empty(mesh.n)
    # R = [sqrt(E rho_e^p) P B_e kappa^(1/2)], P dropping the fixed DOFs
    w = np.sqrt(young * np.clip(rho, 0.0, None) ** p)
    blocks = fact.V * np.sqrt(fact.kappa)  # (8, 5)
    rows = mesh.dof_map[mesh.edofs]  # (m, 8)
    vals = w[:, None, None] * blocks[None]  # (m, 8, 5)
    cols = np.arange(5 * mesh.m).reshape(mesh.m, 1, 5)
    rr = np.broadcast_to(rows[:, :, None], vals.shape)
    cc = np.broadcast_to(cols, vals.shape)
    keep = rr >= 0
    R = sp.csr_matrix((vals[keep], (rr[keep], cc[keep])), shape=(mesh.n, 5 * mesh.m))
    K = (R @ R.T).tocsr()
    eq = solve_contact_equilibrium(K, f, contact, factor=R, config=config)
    u, r, obj = _fields(output)
    if u is not None and np.size(u) == mesh.nbar:
        u = mesh.reduce(u)
    s = _get(output, "s")
    internal = None
    if s is not None:
        total = np.zeros(mesh.nbar)
        np.add.at(total, mesh.edofs, np.asarray(s, dtype=float) @ fact.V.T)
        internal = mesh.reduce(total)
    return _report(K, f, contact, eq, u, r, obj, rtol, ctol, active_tol, internal)


def _get(output, key):
    if output is None:
        return None
    return output.get(key) if isinstance(output, dict) else getattr(output, key, None)


def _fields(output):
    return _get(output, "u"), _get(output, "r"), _get(output, "objective")


def audit(structure, design, f, contact: ContactSpec | None = None, output=None,
          **kwargs) -> EquilibriumReport:
    """Dispatch to :func:`audit_truss` or :func:`audit_continuum`.

    For a mesh, pass the element factorization as ``fact=`` (and ``p``,
    ``young`` as used by the optimizer).
    """
    if isinstance(structure, GroundStructure):
        return audit_truss(structure, contact, f, design, output, **kwargs)
    fact = kwargs.pop("fact")
    return audit_continuum(structure, fact, design, f, contact, output, **kwargs)
