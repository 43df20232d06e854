"""Independent reference computations used by the tests.

Nothing here imports the package's solver paths; random programs are
generated with a known strictly feasible primal and dual point, and external
references come from cvxpy/Clarabel, shapely or sympy.
"""

from __future__ import annotations

import functools
import itertools
import math

import numpy as np

from contact_topopt.conic import ConeBlock, ConicProgram, FreeBlock


def random_conic_program(rng, max_free=2, max_orth=3, max_soc=3) -> ConicProgram:
    """Random program with a strictly feasible primal and dual (so it is solvable)."""
    blocks = []
    nf = int(rng.integers(0, max_free + 1))
    no = int(rng.integers(0, max_orth + 1))
    ns = int(rng.integers(1, max_soc + 1))
    if nf:
        blocks.append(FreeBlock(nf))
    if no:
        blocks.append(ConeBlock("orthant", no))
    for _ in range(ns):
        blocks.append(ConeBlock("rsoc", int(rng.integers(3, 6))))
    n = sum(b.dim for b in blocks)
    m = int(rng.integers(1, n))
    A = rng.standard_normal((m, n))
    x0 = np.zeros(n)
    zd = np.zeros(n)
    off = 0
    for bl in blocks:
        d = bl.dim
        if isinstance(bl, FreeBlock):
            x0[off:off + d] = rng.standard_normal(d)
        elif bl.kind == "orthant":
            x0[off:off + d] = rng.random(d) + 0.1
            zd[off:off + d] = rng.random(d) + 0.1
        else:
            xx = rng.standard_normal(d - 2)
            y = rng.random() + 0.5
            x0[off:off + d] = np.r_[xx, y, (xx @ xx + rng.random() + 0.1) / y]
            a = rng.standard_normal(d - 2)
            bb = rng.random() + 0.5
            zd[off:off + d] = np.r_[a, bb, (a @ a / 4 + rng.random() + 0.1) / bb]
        off += d
    c = A.T @ rng.standard_normal(m) + zd
    return ConicProgram(c, A, A @ x0, blocks)


def clarabel_value(prob: ConicProgram) -> float:
    import cvxpy as cp

    x = cp.Variable(prob.n)
    cons = [prob.A.toarray() @ x == prob.b]
    for bl, sl in prob.block_slices():
        if isinstance(bl, FreeBlock):
            continue
        if bl.kind == "orthant":
            cons.append(x[sl] >= 0)
        else:
            xs = x[sl]
            d = bl.dim
            # x.x <= y z  <=>  ||(y - z, 2x)|| <= y + z
            cons.append(cp.SOC(xs[d - 2] + xs[d - 1], cp.hstack([xs[d - 2] - xs[d - 1], 2 * xs[:d - 2]])))
    pr = cp.Problem(cp.Minimize(prob.c @ x), cons)
    pr.solve(solver="CLARABEL")
    return float(pr.value)


def enumerate_lattice_members(nx: int, ny: int):
    """All node pairs of the grid whose segment contains no third grid node."""
    nodes = [(ix, iy) for iy in range(ny + 1) for ix in range(nx + 1)]
    out = set()
    for a, b in itertools.combinations(range(len(nodes)), 2):
        (x0, y0), (x1, y1) = nodes[a], nodes[b]
        dx, dy = x1 - x0, y1 - y0
        inner = any(
            (px - x0) * dy == (py - y0) * dx
            and min(x0, x1) <= px <= max(x0, x1) and min(y0, y1) <= py <= max(y0, y1)
            for k, (px, py) in enumerate(nodes) if k not in (a, b)
        )
        if not inner:
            out.add((a, b))
    return out


def brute_force_crossings(nodes, members):
    """Pairs of segments whose interiors cross at one point (shapely)."""
    from shapely.geometry import LineString, Point

    segs = [LineString([nodes[i], nodes[j]]) for i, j in members]
    out = set()
    for a, b in itertools.combinations(range(len(members)), 2):
        inter = segs[a].intersection(segs[b])
        if not isinstance(inter, Point):
            continue
        ends = {tuple(nodes[k]) for k in (*members[a], *members[b])}
        if (inter.x, inter.y) in ends or any(math.dist((inter.x, inter.y), e) < 1e-12 for e in ends):
            continue
        out.add((a, b))
    return out


@functools.lru_cache(maxsize=None)
def _q4_symbolic(E, nu):
    """Plane-stress Q4 stiffness on the unit square by exact integration (sympy)."""
    import sympy as sp

    xi, eta = sp.symbols("xi eta")
    # CCW nodes (0,0), (1,0), (1,1), (0,1); DOFs (u1, v1, ..., u4, v4)
    N = [(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta]
    Bm = sp.zeros(3, 8)
    for k, Nk in enumerate(N):
        Bm[0, 2 * k] = sp.diff(Nk, xi)
        Bm[1, 2 * k + 1] = sp.diff(Nk, eta)
        Bm[2, 2 * k] = sp.diff(Nk, eta)
        Bm[2, 2 * k + 1] = sp.diff(Nk, xi)
    En, nun = sp.nsimplify(E), sp.nsimplify(nu)
    Dm = En / (1 - nun ** 2) * sp.Matrix([[1, nun, 0], [nun, 1, 0], [0, 0, (1 - nun) / 2]])
    K = (Bm.T * Dm * Bm).applyfunc(lambda t: sp.integrate(t, (xi, 0, 1), (eta, 0, 1)))
    return np.array(K.evalf(), dtype=float)


def q4_stiffness_symbolic(E=1.0, nu=0.3):
    """Plane-stress Q4 stiffness on the unit square by exact integration (sympy)."""
    return _q4_symbolic(float(E), float(nu)).copy()


def ke_88_line(nu=0.3):
    """Element matrix as tabulated in the 88-line topology optimization code (E = 1)."""
    A11 = np.array([[12, 3, -6, -3], [3, 12, 3, 0], [-6, 3, 12, -3], [-3, 0, -3, 12]])
    A12 = np.array([[-6, -3, 0, 3], [-3, -6, -3, -6], [0, -3, -6, 3], [3, -6, 3, -6]])
    B11 = np.array([[-4, 3, -2, 9], [3, -4, -9, 4], [-2, -9, -4, -3], [9, 4, -3, -4]])
    B12 = np.array([[2, -3, 4, -9], [-3, 2, 9, -2], [4, 9, 2, 3], [-9, -2, 3, 2]])
    KE = 1 / (1 - nu ** 2) / 24 * (np.block([[A11, A12], [A12.T, A11]])
                                    + nu * np.block([[B11, B12], [B12.T, B11]]))
    return KE


def qp_compliance(gs, contact, f, x):
    """sup{2f'u - u'K(x)u : C u <= g} with cvxpy/Clarabel; +inf when unbounded."""
    import cvxpy as cp

    k = np.sqrt(gs.young * np.asarray(x) / gs.lengths)
    M = (gs.B @ np.diag(k)).T if gs.m else np.zeros((0, gs.n))
    u = cp.Variable(gs.n)
    cons = [contact.C.toarray() @ u <= contact.g] if contact is not None and contact.c else []
    pr = cp.Problem(cp.Maximize(2 * f @ u - cp.sum_squares(M @ u)), cons)
    pr.solve(solver="CLARABEL")
    if pr.status in ("unbounded", "unbounded_inaccurate"):
        return np.inf
    return float(pr.value)


def random_truss_instance(rng, max_nx=3, max_ny=2, zero_fraction=0.2, pin=True):
    """Small ground structure with a floor under the bottom row and a random load.

    The bottom-left node is pinned (when ``pin``) so most designs carry the
    load; a fraction of the areas is set exactly to zero.
    """
    from contact_topopt.truss import generate_ground_structure, halfplane_contact

    nx = int(rng.integers(1, max_nx + 1))
    ny = int(rng.integers(1, max_ny + 1))
    fixed = (0, 1) if pin else ()
    gs = generate_ground_structure(nx, ny, spacing=float(rng.uniform(0.5, 2.0)),
                                   young=float(rng.uniform(0.5, 3.0)), fixed_dofs=fixed)
    bottom = list(range(1 if pin else 0, nx + 1))
    gap = float(rng.uniform(0, 1))
    contact = halfplane_contact(gs, bottom, (0.0, -gap), (0.0, 1.0))
    f = rng.standard_normal(gs.n)
    x = rng.uniform(0, 1, gs.m)
    x[rng.random(gs.m) < zero_fraction] = 0.0
    return gs, contact, f, x


def pattern_objective(gs, contact, f, v, ones, xmin=0.0, xmax=np.inf, bilateral=False):
    """Topology SOCP with the existing members fixed to ``ones`` (cvxpy/Clarabel).

    min sum_e (l_e/E) q_e^2 / x_e - 2 g'r  s.t.  B q = f + C'r, l'x <= v,
    xmin <= x_e <= xmax on the pattern, r <= 0 unless bilateral. +inf if infeasible.
    """
    import cvxpy as cp

    ones = sorted(ones)
    l = gs.lengths[ones]
    Bk = gs.B[:, ones].toarray()
    nc = contact.c if contact is not None else 0
    r = cp.Variable(nc) if nc else None
    rhs = f + (contact.C.toarray().T @ r if nc else 0)
    cons = [] if bilateral or not nc else [r <= 0]
    obj = -2 * contact.g @ r if nc else 0
    if ones:
        x = cp.Variable(len(ones))
        q = cp.Variable(len(ones))
        cons += [Bk @ q == rhs, l @ x <= v, x >= xmin]
        if np.isfinite(xmax):
            cons.append(x <= xmax)
        obj = obj + sum(cp.quad_over_lin(np.sqrt(l[k] / gs.young) * q[k], x[k])
                        for k in range(len(ones)))
    elif nc:
        cons.append(rhs == 0)
    elif np.any(f != 0):
        return np.inf
    else:
        return 0.0
    # feasibility is linear: areas fit the volume and the balance rows have a solution
    if ones and l @ np.full(len(ones), xmin) > v * (1 + 1e-12):
        return np.inf
    if cp.Problem(cp.Minimize(0), cons).solve(solver="GLPK") == np.inf:
        return np.inf
    pr = cp.Problem(cp.Minimize(obj), cons)
    pr.solve(solver="CLARABEL")
    if pr.status != "optimal":
        raise RuntimeError(f"oracle solve ended with status {pr.status}")
    return float(pr.value)


def enumerate_patterns(gs, contact, f, v, xmin=0.0, xmax=np.inf, dmax=None, crossing=()):
    """Best objective over all existence patterns (exhaustive, small m only)."""
    deg_ok = lambda ones: dmax is None or all(
        sum(1 for e in ones if k in gs.members[e]) <= dmax for k in range(len(gs.nodes)))
    best, arg = np.inf, None
    for bits in itertools.product((0, 1), repeat=gs.m):
        ones = [e for e in range(gs.m) if bits[e]]
        if not deg_ok(ones) or any(bits[a] and bits[b] for a, b in crossing):
            continue
        val = pattern_objective(gs, contact, f, v, ones, xmin, xmax)
        if val < best:
            best, arg = val, bits
    return best, arg
