"""Continuum SIMP design on a regular Q4 mesh with unilateral contact.

Each element stiffness is factored once as ``K_e = B_e kappa B_e'`` with
``kappa`` the five positive eigenvalues of the element matrix, so that the
compliance of a density field is

    pi(rho) = min { sum_e w_e - 2 g'r : w_e rho_e^p >= s_e' kappa^-1 s_e,
                    sum_e B_e s_e = f + D't + C'r, r <= 0 }.

Cones carry ``h_e = kappa^-1/2 s_e`` directly. Fixed DOFs are eliminated,
and the reactions ``t`` are recovered from the balance residual. The design
problem is solved by a sequence of SOCPs in which ``rho_e^p`` is replaced by
its tangent at the previous iterate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .conic import SolverConfig, Status, solve_conic
from .conic.builder import ProgramBuilder
from .truss import ContactSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegularMesh:
    """``nx`` by ``ny`` square elements of side ``size``; node (i, j) is j*(nx+1)+i."""

    nx: int
    ny: int
    size: float = 1.0
    fixed_dofs: tuple = ()
    nodes: np.ndarray = field(init=False, repr=False)
    elements: np.ndarray = field(init=False, repr=False)  # (m, 4) CCW from lower-left
    edofs: np.ndarray = field(init=False, repr=False)  # (m, 8) full DOF indices
    dof_map: np.ndarray = field(init=False, repr=False)  # full -> reduced or -1

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or not self.size > 0:
            raise ValueError("mesh needs nx, ny >= 1 and a positive element size")
        ix, iy = np.meshgrid(np.arange(self.nx + 1), np.arange(self.ny + 1))
        nodes = np.column_stack([ix.ravel(), iy.ravel()]).astype(float) * self.size
        ex, ey = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        n0 = (ey * (self.nx + 1) + ex).ravel()
        elements = np.column_stack([n0, n0 + 1, n0 + self.nx + 2, n0 + self.nx + 1])
        edofs = np.repeat(2 * elements, 2, axis=1) + np.tile([0, 1], 4)
        nbar = 2 * len(nodes)
        fixed = tuple(sorted({int(i) for i in self.fixed_dofs}))
        if fixed and (fixed[0] < 0 or fixed[-1] >= nbar):
            raise ValueError("fixed dof out of range")
        dof_map = -np.ones(nbar, dtype=np.int64)
        free = np.setdiff1d(np.arange(nbar), fixed)
        dof_map[free] = np.arange(free.size)
        for name, arr in (("nodes", nodes), ("elements", elements), ("edofs", edofs),
                          ("dof_map", dof_map)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "fixed_dofs", fixed)

    @property
    def m(self) -> int:
        return self.nx * self.ny

    @property
    def nbar(self) -> int:
        return 2 * len(self.nodes)

    @property
    def n(self) -> int:
        """Number of free DOFs."""
        return self.nbar - len(self.fixed_dofs)

    @property
    def D(self) -> sp.csr_matrix:
        """Dirichlet selector rows, one per fixed DOF."""
        d = len(self.fixed_dofs)
        return sp.csr_matrix((np.ones(d), (np.arange(d), self.fixed_dofs)), shape=(d, self.nbar))

    def node(self, ix: int, iy: int) -> int:
        return iy * (self.nx + 1) + ix

    def node_dofs(self, node: int) -> tuple[int, int]:
        return int(self.dof_map[2 * node]), int(self.dof_map[2 * node + 1])

    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    def reduce(self, full: np.ndarray) -> np.ndarray:
        """Restrict a full-length DOF vector to the free DOFs."""
        return np.asarray(full, dtype=float)[self.dof_map >= 0]

    def expand(self, reduced: np.ndarray) -> np.ndarray:
        out = np.zeros(self.nbar)
        out[self.dof_map >= 0] = reduced
        return out


def q4_element_stiffness(young: float = 1.0, nu: float = 0.3, size: float = 1.0) -> np.ndarray:
    """Plane-stress bilinear square element (unit thickness), 2x2 Gauss rule.

    DOFs are (u1, v1, ..., u4, v4) for the corners counter-clockwise from the
    lower left. For a square the matrix does not depend on ``size``.
    """
    if not young > 0:
        raise ValueError("Young's modulus must be positive")
    if not -1.0 < nu < 0.5:
        raise ValueError("Poisson's ratio must lie in (-1, 0.5)")
    Dm = young / (1 - nu * nu) * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])
    xi_n = np.array([-1, 1, 1, -1.0])
    eta_n = np.array([-1, -1, 1, 1.0])
    K = np.zeros((8, 8))
    g = 1 / np.sqrt(3)
    for xi in (-g, g):
        for eta in (-g, g):
            # shape function derivatives; the Jacobian of the square is size/2 * I
            dxi = xi_n * (1 + eta * eta_n) / 4
            deta = eta_n * (1 + xi * xi_n) / 4
            dx, dy = dxi * 2 / size, deta * 2 / size
            Bm = np.zeros((3, 8))
            Bm[0, 0::2] = dx
            Bm[1, 1::2] = dy
            Bm[2, 0::2] = dy
            Bm[2, 1::2] = dx
            K += Bm.T @ Dm @ Bm * (size / 2) ** 2
    return (K + K.T) / 2


@dataclass(frozen=True)
class ElementFactorization:
    kappa: np.ndarray  # (5,) positive eigenvalues: kappa = diag(kappa)
    V: np.ndarray  # (8, 5) orthonormal eigenvectors: K_e = V diag(kappa) V'

    @property
    def kappa_matrix(self) -> np.ndarray:
        return np.diag(self.kappa)

    @property
    def kappa_inv_sqrt(self) -> np.ndarray:
        return np.diag(1.0 / np.sqrt(self.kappa))

    def B(self, mesh: RegularMesh, e: int) -> sp.csr_matrix:
        """``B_e`` as an nbar x 5 matrix."""
        rows = np.repeat(mesh.edofs[e], 5)
        cols = np.tile(np.arange(5), 8)
        return sp.csr_matrix((self.V.ravel(), (rows, cols)), shape=(mesh.nbar, 5))


def factorize_element_stiffness(Ke: np.ndarray, rtol: float = 1e-10) -> ElementFactorization:
    Ke = np.asarray(Ke, dtype=float)
    if Ke.shape != (8, 8) or not np.allclose(Ke, Ke.T, atol=1e-12 * np.abs(Ke).max()):
        raise ValueError("element matrix must be symmetric 8x8")
    lam, vec = np.linalg.eigh(Ke)
    keep = lam > rtol * lam.max()
    if keep.sum() != 5 or np.any(lam[~keep] < -rtol * lam.max()):
        raise ValueError(f"element matrix has rank {int(keep.sum())}, expected 5")
    return ElementFactorization(lam[keep], vec[:, keep])


def build_density_filter(mesh: RegularMesh, radius: float) -> sp.csr_matrix:
    """Row-normalized hat weights ``max(0, radius - dist)`` between element centroids."""
    if radius < 0:
        raise ValueError("filter radius must be nonnegative")
    cen = mesh.centroids()
    reach = int(np.floor(radius / mesh.size))
    ex, ey = np.arange(mesh.m) % mesh.nx, np.arange(mesh.m) // mesh.nx
    rows, cols, vals = [], [], []
    for dx in range(-reach, reach + 1):
        for dy in range(-reach, reach + 1):
            jx, jy = ex + dx, ey + dy
            ok = (jx >= 0) & (jx < mesh.nx) & (jy >= 0) & (jy < mesh.ny)
            i = np.flatnonzero(ok)
            j = jy[ok] * mesh.nx + jx[ok]
            w = radius - np.hypot(*(cen[i] - cen[j]).T)
            pos = w > 0
            rows.append(i[pos])
            cols.append(j[pos])
            vals.append(w[pos])
    H = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(mesh.m, mesh.m)) if radius > 0 else sp.csr_matrix((mesh.m, mesh.m))
    sums = np.asarray(H.sum(axis=1)).ravel()
    # radius below the centroid spacing leaves only (or not even) the diagonal
    empty = sums == 0
    if np.any(empty):
        H = H + sp.csr_matrix((np.ones(empty.sum()), (np.flatnonzero(empty),) * 2),
                              shape=H.shape)
        sums[empty] = 1.0
    return sp.csr_matrix(sp.diags(1.0 / sums) @ H)


def _element_operator(mesh: RegularMesh, fact: ElementFactorization, scale) -> sp.csr_matrix:
    """Sparse (n_free x 5m) matrix whose block e is ``scale_e * B_e`` restricted to free DOFs."""
    scale = np.asarray(scale, dtype=float)
    m = mesh.m
    rows = np.repeat(mesh.dof_map[mesh.edofs], 5, axis=1)  # (m, 40)
    cols = np.arange(5 * m).reshape(m, 5)[:, np.tile(np.arange(5), 8)]
    vals = fact.V.ravel()[None, :] * scale[:, None]
    keep = rows >= 0
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(mesh.n, 5 * m))


def _check_load(mesh: RegularMesh, f):
    f = np.asarray(f, dtype=float).ravel()
    if f.size == mesh.nbar:
        f = mesh.reduce(f)
    if f.size != mesh.n:
        raise ValueError(f"load must have {mesh.nbar} (full) or {mesh.n} (free) entries")
    return f


def _check_rho(mesh: RegularMesh, rho):
    rho = np.asarray(rho, dtype=float).ravel()
    if rho.size != mesh.m:
        raise ValueError(f"rho has length {rho.size}, mesh has {mesh.m} elements")
    if np.any(rho < 0) or not np.all(np.isfinite(rho)):
        raise ValueError("densities must be finite and nonnegative")
    return rho


def _scales(f, young):
    # forces in F, energies in F^2 / E, displacements in F / E
    F = float(np.abs(f).max(initial=0.0)) or 1.0
    return F, F * F / young, F / young


@dataclass
class ContinuumCompliance:
    value: float
    status: Status
    u: np.ndarray | None = None  # full length
    s: np.ndarray | None = None  # (m, 5) generalized stresses
    r: np.ndarray | None = None
    t: np.ndarray | None = None


def _contact(mesh, contact):
    return contact if contact is not None else ContactSpec.empty(mesh.n)


def compliance_continuum_direct(mesh: RegularMesh, fact: ElementFactorization, rho, f,
                                contact: ContactSpec | None = None, p: float = 3.0,
                                young: float = 1.0,
                                config: SolverConfig | None = None) -> ContinuumCompliance:
    """sup { 2f'u - u'K(rho)u : Du = 0, Cu <= g } through per-element energy cones.

    ``fact`` is the factorization of the element matrix for unit Young's
    modulus; ``young`` scales it.
    """
    rho, f, contact = _check_rho(mesh, rho), _check_load(mesh, f), _contact(mesh, contact)
    F, Cs, U = _scales(f, young)
    act = np.flatnonzero(rho > 0)
    pb = ProgramBuilder("continuum-direct")
    u = pb.free(mesh.n)
    cone = pb.rsoc(act.size, 7)
    sig = pb.orthant(contact.c)
    if act.size:
        # head = rho^(p/2) kappa^1/2 B_e'u
        G = _element_operator(mesh, fact, np.ones(mesh.m)).T.tocsr()
        w = np.sqrt(fact.kappa)[None, :] * rho[act, None] ** (p / 2)
        sel = (5 * act[:, None] + np.arange(5)).ravel()
        rows = pb.equal(cone[:, :5], 0.0, "strain")
        pb.add_terms(rows, -(sp.diags(w.ravel()) @ G[sel]), u)
        pb.equal(cone[:, 6], 1.0, "unit")
    if contact.c:
        rows = pb.rows(contact.C, u, contact.g / U, "contact")
        pb.diag_terms(rows, sig, 1.0)
    pb.objective(u, -2.0 * f / F)
    pb.objective(cone[:, 5], 1.0)
    prob = pb.build()
    sol = solve_conic(prob, config)
    if sol.status == Status.DUAL_INFEASIBLE:
        return ContinuumCompliance(np.inf, sol.status)
    if sol.status != Status.OPTIMAL:
        return ContinuumCompliance(np.nan, sol.status)
    uu = U * sol.primal[u]
    r = F * sol.dual_eq[prob.m - contact.c:] / 2.0 if contact.c else np.zeros(0)
    return ContinuumCompliance(-Cs * sol.objective, sol.status, u=mesh.expand(uu), r=r)


def compliance_continuum_dual(mesh: RegularMesh, fact: ElementFactorization, rho, f,
                              contact: ContactSpec | None = None, p: float = 3.0,
                              young: float = 1.0,
                              config: SolverConfig | None = None) -> ContinuumCompliance:
    """Stress-based form: min sum w - 2 g'r with (kappa^-1/2 s_e, w_e, rho_e^p) in K^7
    (solved with the stresses scaled by rho_e^(p/2))."""
    rho, f, contact = _check_rho(mesh, rho), _check_load(mesh, f), _contact(mesh, contact)
    F, Cs, U = _scales(f, young)
    act = np.flatnonzero(rho > 0)
    pb = ProgramBuilder("continuum-dual")
    cone = pb.rsoc(act.size, 7)
    rneg = pb.orthant(contact.c)
    if act.size:
        pb.equal(cone[:, 6], 1.0, "unit")
    # s_e = rho_e^(p/2) kappa^1/2 z_e keeps every cone at unit scale
    dens = np.sqrt(rho[act] ** p)
    sq = np.sqrt(fact.kappa)
    G = _element_operator(mesh, fact, np.ones(mesh.m))
    sel = (5 * act[:, None] + np.arange(5)).ravel()
    colscale = (dens[:, None] * sq[None, :]).ravel()
    rows = pb.rows(G[:, sel] @ sp.diags(colscale), cone[:, :5], f / F, "balance")
    if contact.c:
        pb.add_terms(rows, contact.C.T, rneg)
    pb.objective(cone[:, 5], 1.0)
    pb.objective(rneg, 2.0 * contact.g / U)
    prob = pb.build()
    sol = solve_conic(prob, config)
    if sol.status == Status.PRIMAL_INFEASIBLE:
        return ContinuumCompliance(np.inf, sol.status)
    if sol.status != Status.OPTIMAL:
        return ContinuumCompliance(np.nan, sol.status)
    s = np.zeros((mesh.m, 5))
    s[act] = F * sol.primal[cone[:, :5]] * sq * dens[:, None]
    r = -F * sol.primal[rneg]
    return ContinuumCompliance(Cs * sol.objective, sol.status, u=mesh.expand(U * sol.dual_eq[rows] / 2),
                               s=s, r=r, t=_reactions(mesh, fact, s, f, contact, r))


def _reactions(mesh, fact, s, f_red, contact, r):
    """Dirichlet reactions t = D (sum_e B_e s_e - f - C'r), on the full DOF set."""
    if not mesh.fixed_dofs:
        return np.zeros(0)
    total = np.zeros(mesh.nbar)
    np.add.at(total, mesh.edofs, s @ fact.V.T)
    ext = mesh.expand(f_red)
    if contact.c:
        ext += mesh.expand(contact.C.T @ r)
    return (total - ext)[list(mesh.fixed_dofs)]


def tangent(rho_k, p: float):
    """Coefficients (a, b) of the tangent a*rho + b of rho^p at rho_k."""
    rho_k = np.asarray(rho_k, dtype=float)
    return p * rho_k ** (p - 1), (1 - p) * rho_k ** p


@dataclass
class ContinuumSubproblem:
    program: object
    cone: np.ndarray  # (m, 7): (h_e, w_e, linearized rho_e^p)
    rho: np.ndarray
    x: np.ndarray
    rneg: np.ndarray
    balance_rows: np.ndarray
    scales: tuple  # (F, energy, displacement)


def build_continuum_subproblem(mesh: RegularMesh, fact: ElementFactorization, H, f, v: float,
                               rho_k, p: float = 3.0, contact: ContactSpec | None = None,
                               young: float = 1.0) -> ContinuumSubproblem:
    """SOCP with rho_e^p replaced by its tangent at ``rho_k``.

    Variables: rho, x in [0, 1], and per element the cone (h_e, w_e, a_e) with
    a_e = p rho_k^(p-1) rho_e + (1-p) rho_k^p; rho = H x; 1'rho <= v.
    """
    f, contact = _check_load(mesh, f), _contact(mesh, contact)
    rho_k = _check_rho(mesh, rho_k)
    if not 0 < v <= mesh.m:
        raise ValueError("volume bound must lie in (0, m]")
    F, Cs, U = _scales(f, young)
    m = mesh.m
    pb = ProgramBuilder("continuum-subproblem")
    cone = pb.rsoc(m, 7)
    rho = pb.free(m)
    x = pb.orthant(m)
    rneg = pb.orthant(contact.c)
    sq = np.sqrt(fact.kappa)
    G = _element_operator(mesh, fact, np.ones(m))
    rows = pb.rows(G @ sp.diags(np.tile(sq, m)), cone[:, :5], f / F, "balance")
    if contact.c:
        pb.add_terms(rows, contact.C.T, rneg)
    a, b = tangent(rho_k, p)
    lin = pb.rows(None, None, b, "tangent")
    pb.diag_terms(lin, cone[:, 6], 1.0)
    pb.diag_terms(lin, rho, -a)
    filt = pb.rows(sp.csr_matrix(H), x, np.zeros(m), "filter")
    pb.diag_terms(filt, rho, -1.0)
    ub = pb.rows(None, None, np.ones(m), "x<=1")
    pb.diag_terms(ub, x, 1.0)
    pb.diag_terms(ub, pb.orthant(m), 1.0)
    vol = pb.rows(np.ones((1, m)), rho, [float(v)], "volume")
    pb.diag_terms(vol, pb.orthant(1), 1.0)
    pb.objective(cone[:, 5], 1.0)
    pb.objective(rneg, 2.0 * contact.g / U)
    return ContinuumSubproblem(pb.build(), cone, rho, x, rneg, rows, (F, Cs, U))


@dataclass
class SequenceConfig:
    p: float = 3.0
    rho_tol: float = 1e-3
    obj_rtol: float = 1e-6
    stall_count: int = 3
    max_iter: int = 250
    solver: SolverConfig | None = None


@dataclass
class ContinuumResult:
    rho: np.ndarray
    x: np.ndarray
    s: np.ndarray  # (m, 5)
    t: np.ndarray
    r: np.ndarray
    w: np.ndarray
    u: np.ndarray  # full length, from the last subproblem's balance multipliers
    objective: float
    iterations: int
    history: list
    status: Status
    converged: str = ""  # which stopping rule fired

    @property
    def optimal(self) -> bool:
        return self.status == Status.OPTIMAL


def sequential_socp(mesh: RegularMesh, fact: ElementFactorization, H, f, v: float,
                    contact: ContactSpec | None = None, config: SequenceConfig | None = None,
                    young: float = 1.0, rho0=None, callback=None) -> ContinuumResult:
    """Sequence of tangent SOCPs from rho0 = v/m (uniform volume fraction).

    Every subproblem point is feasible for the exact problem, because the
    tangent underestimates rho^p; the previous iterate is feasible for the next
    subproblem, so the recorded objectives never increase.
    """
    cfg = config or SequenceConfig()
    f, contact = _check_load(mesh, f), _contact(mesh, contact)
    if not 0 < v <= mesh.m:
        raise ValueError("volume bound must lie in (0, m]")
    rho_k = np.full(mesh.m, v / mesh.m) if rho0 is None else _check_rho(mesh, rho0)
    history, stall = [], 0
    res = None
    reason = "max-iter"
    for k in range(1, cfg.max_iter + 1):
        sub = build_continuum_subproblem(mesh, fact, H, f, v, rho_k, cfg.p, contact, young)
        sol = solve_conic(sub.program, cfg.solver)
        if sol.status != Status.OPTIMAL:
            # the previous iterate is feasible, so this is a solver failure
            log.warning("subproblem %d ended with %s", k, sol.status.value)
            status = Status.NUMERICAL_FAILURE if sol.status in (
                Status.PRIMAL_INFEASIBLE, Status.DUAL_INFEASIBLE) else sol.status
            if res is None:
                nan = np.full(mesh.m, np.nan)
                return ContinuumResult(rho_k, nan, np.full((mesh.m, 5), np.nan), np.zeros(0),
                                       np.full(contact.c, np.nan), nan, np.full(mesh.nbar, np.nan),
                                       np.nan, k, history, status)
            res.status = status
            return res
        res = _continuum_result(mesh, fact, sub, sol, f, contact, k, history)
        obj = res.objective
        step = float(np.abs(res.rho - rho_k).max())
        prev = history[-1] if history else None
        history.append(obj)
        if callback is not None:
            callback(k, res)
        log.info("sequential socp %3d obj %.8g step %.2e", k, obj, step)
        rho_k = np.clip(res.rho, 0.0, 1.0)
        if cfg.p == 1:
            reason = "exact"  # the tangent is the constraint itself
            break
        if step <= cfg.rho_tol:
            reason = "rho-step"
            break
        if prev is not None and abs(prev - obj) <= cfg.obj_rtol * max(abs(prev), 1e-300):
            stall += 1
            if stall >= cfg.stall_count:
                reason = "objective-stall"
                break
        else:
            stall = 0
    res.converged = reason
    res.history = history
    return res


def _continuum_result(mesh, fact, sub, sol, f, contact, k, history) -> ContinuumResult:
    F, Cs, U = sub.scales
    p = sol.primal
    sq = np.sqrt(fact.kappa)
    s = F * p[sub.cone[:, :5]] * sq
    r = -F * p[sub.rneg]
    return ContinuumResult(
        rho=p[sub.rho].copy(), x=p[sub.x].copy(), s=s,
        t=_reactions(mesh, fact, s, f, contact, r), r=r,
        w=Cs * p[sub.cone[:, 5]],
        u=mesh.expand(U * sol.dual_eq[sub.balance_rows] / 2.0),
        objective=float(Cs * sol.objective), iterations=k, history=list(history),
        status=Status.OPTIMAL)
