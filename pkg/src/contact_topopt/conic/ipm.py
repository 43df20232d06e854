"""Primal-dual interior-point method on the homogeneous self-dual embedding.

Nesterov-Todd scaling, Mehrotra predictor-corrector. The embedding keeps
iterates bounded on infeasible programs and yields Farkas-type certificates
instead of divergence.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp

from .cones import (ORTHANT, FreeBlock, cone_violation, rsoc_transform, soc_div, soc_max_step,
                    soc_nt_scaling, soc_prod, soc_wbar_matrices)
from .kkt import KKTFactorError, ReducedKKT
from .program import ConicProgram, ConicSolution, SolverConfig, Status

log = logging.getLogger(__name__)

_RUIZ_PASSES = 15


class _Layout:
    """Internal (Lorentz-coordinate, equilibrated) view of a ConicProgram.

    Each rotated block is mapped to a Lorentz cone ``(t, s, v)``. On top of
    that fixed map every Lorentz cone carries a hyperbolic rotation angle
    ``theta`` in the (t, s) plane, an automorphism of the cone that the solver
    adjusts to keep badly balanced (y, z) pairs representable.
    """

    def __init__(self, prob: ConicProgram):
        n = prob.n
        cone_vars, orth_pos = [], []
        soc = {}
        group = np.arange(n)
        T_blocks, Tinv_blocks = [], []
        pos = 0
        for bl, sl in prob.block_slices():
            idx = np.arange(sl.start, sl.stop)
            if isinstance(bl, FreeBlock):
                T_blocks.append(sp.identity(bl.dim))
                Tinv_blocks.append(sp.identity(bl.dim))
                continue
            cone_vars.append(idx)
            if bl.kind == ORTHANT:
                orth_pos.append(np.arange(pos, pos + bl.dim))
                T_blocks.append(sp.identity(bl.dim))
                Tinv_blocks.append(sp.identity(bl.dim))
            else:
                soc.setdefault(bl.dim, []).append(np.arange(pos, pos + bl.dim))
                T = rsoc_transform(bl.dim)
                T_blocks.append(sp.csr_matrix(T))
                Tinv_blocks.append(sp.csr_matrix(np.linalg.inv(T)))
                group[idx] = idx[0]
            pos += bl.dim
        self.cone_vars = np.concatenate(cone_vars) if cone_vars else np.zeros(0, dtype=int)
        self.orth_pos = np.concatenate(orth_pos) if orth_pos else np.zeros(0, dtype=int)
        self.soc_groups = {d: np.array(v) for d, v in soc.items()}
        self.theta = {d: np.zeros(v.shape[0]) for d, v in self.soc_groups.items()}
        self.N = self.cone_vars.size
        self.degree = self.orth_pos.size + sum(v.shape[0] for v in self.soc_groups.values())
        self.T = sp.block_diag(T_blocks, format="csr")
        self.Tinv = sp.block_diag(Tinv_blocks, format="csr")
        self.col_group = group

        rows, cols, data = _structural_product(prob.A, self.Tinv)
        c = self.Tinv.T @ prob.c
        b = prob.b.copy()
        D, Ec = _ruiz(sp.csr_matrix((data, (rows, cols)), shape=prob.A.shape), group)
        data = data * D[rows] * Ec[cols]
        b = D * b
        c = Ec * c
        self.beta_b = float(np.abs(b).max()) if b.size and np.abs(b).max() > 0 else 1.0
        self.beta_c = float(np.abs(c).max()) if c.size and np.abs(c).max() > 0 else 1.0
        self.rows, self.cols, self.data = rows, cols, data
        self.shape = prob.A.shape
        self.b = b / self.beta_b
        self.c = c / self.beta_c
        self.D, self.Ec = D, Ec
        self._rebuild()

        # aligned data positions of the t and s columns of every Lorentz cone
        colptr = np.searchsorted(cols, np.arange(n + 1))
        self._pair_pos = {}
        for d, idx in self.soc_groups.items():
            tcol = self.cone_vars[idx[:, 0]]
            scol = self.cone_vars[idx[:, 1]]
            lt = colptr[tcol + 1] - colptr[tcol]
            if np.any(lt != colptr[scol + 1] - colptr[scol]):
                raise AssertionError("t and s columns must share a pattern")
            cone_of = np.repeat(np.arange(idx.shape[0]), lt)
            within = np.arange(lt.sum()) - np.repeat(np.cumsum(lt) - lt, lt)
            self._pair_pos[d] = (colptr[tcol][cone_of] + within, colptr[scol][cone_of] + within,
                                 cone_of)

    def _rebuild(self):
        self.A = sp.csr_matrix((self.data, (self.rows, self.cols)), shape=self.shape)

    def identity(self) -> np.ndarray:
        e = np.zeros(self.N)
        e[self.orth_pos] = 1.0
        for idx in self.soc_groups.values():
            e[idx[:, 0]] = 1.0
        return e

    def rotate(self, d: int, sel: np.ndarray, dth: np.ndarray):
        """Compose the rotation of cones ``sel`` (group ``d``) with angle ``dth``.

        Primal coordinates transform with H(dth), A columns and c with H(-dth).
        """
        full = np.zeros(self.soc_groups[d].shape[0])
        full[sel] = dth
        self.theta[d] += full
        ch, sh = np.cosh(full), np.sinh(full)
        pt, ps, cone_of = self._pair_pos[d]
        at, as_ = self.data[pt], self.data[ps]
        self.data[pt] = ch[cone_of] * at - sh[cone_of] * as_
        self.data[ps] = -sh[cone_of] * at + ch[cone_of] * as_
        idx = self.soc_groups[d]
        tcol = self.cone_vars[idx[:, 0]]
        scol = self.cone_vars[idx[:, 1]]
        ct, cs = self.c[tcol].copy(), self.c[scol].copy()
        self.c[tcol] = ch * ct - sh * cs
        self.c[scol] = -sh * ct + ch * cs
        self._rebuild()

    def _unrotate(self, full: np.ndarray, sign: float) -> np.ndarray:
        out = full.copy()
        for d, idx in self.soc_groups.items():
            th = sign * self.theta[d]
            if not np.any(th):
                continue
            tcol = self.cone_vars[idx[:, 0]]
            scol = self.cone_vars[idx[:, 1]]
            out[tcol], out[scol] = _hrot(full[tcol], full[scol], th)
        return out

    # maps from internal iterates to the user's coordinates
    def primal(self, x):
        return self.Tinv @ (self.Ec * self._unrotate(x, -1.0) * self.beta_b)

    def dual_eq(self, y):
        return self.D * y * self.beta_c

    def dual_cone(self, z):
        full = np.zeros(self.Ec.size)
        full[self.cone_vars] = z
        return self.T.T @ (self._unrotate(full, 1.0) / self.Ec * self.beta_c)


def _hrot(t, s, theta):
    ch, sh = np.cosh(theta), np.sinh(theta)
    return ch * t + sh * s, sh * t + ch * s


def _structural_product(A: sp.csr_matrix, M: sp.csr_matrix):
    """COO triplets of ``A @ M`` on the structural pattern of ``|A| @ |M|``.

    Entries that cancel numerically are kept as explicit zeros so that the
    pattern does not depend on the data. Sorted column-major.
    """
    P = (abs(A) @ abs(M)).tocoo()
    R = (A @ M).tocoo()
    keys_p = P.col.astype(np.int64) * A.shape[0] + P.row
    order = np.argsort(keys_p)
    keys_p = keys_p[order]
    rows, cols = P.row[order].astype(np.int64), P.col[order].astype(np.int64)
    data = np.zeros(keys_p.size)
    keys_r = R.col.astype(np.int64) * A.shape[0] + R.row
    np.add.at(data, np.searchsorted(keys_p, keys_r), R.data)
    return rows, cols, data


def _ruiz(A: sp.csr_matrix, group: np.ndarray):
    """Ruiz equilibration; columns sharing a Lorentz cone get one factor."""
    m, n = A.shape
    D = np.ones(m)
    Ec = np.ones(n)
    if A.nnz == 0:
        return D, Ec
    M = abs(A).tocsr()
    for _ in range(_RUIZ_PASSES):
        rn = M.max(axis=1).toarray().ravel()
        rn[rn == 0] = 1.0
        cn = M.max(axis=0).toarray().ravel()
        gmax = np.zeros(n)
        np.maximum.at(gmax, group, cn)
        cn = gmax[group]
        cn[cn == 0] = 1.0
        dr = np.clip(1.0 / np.sqrt(rn), 1e-4, 1e4)
        dc = np.clip(1.0 / np.sqrt(cn), 1e-4, 1e4)
        M = sp.diags(dr) @ M @ sp.diags(dc)
        D *= dr
        Ec *= dc
        if np.all(np.abs(rn - 1) < 0.05) and np.all(np.abs(cn - 1) < 0.05):
            break
    return D, Ec


class _Cones:
    """Batched cone operations over the internal cone vector."""

    def __init__(self, lay: _Layout):
        self.op = lay.orth_pos
        self.groups = lay.soc_groups

    def step(self, u, du):
        alpha = np.inf
        if self.op.size:
            neg = du[self.op] < 0
            if np.any(neg):
                alpha = min(alpha, np.min(-u[self.op][neg] / du[self.op][neg]))
        for idx in self.groups.values():
            alpha = min(alpha, soc_max_step(u[idx], du[idx]).min())
        return alpha

    def scaling(self, s, z):
        op = self.op
        W = {"orth": np.sqrt(s[op] / z[op])}
        for d, idx in self.groups.items():
            eta, w = soc_nt_scaling(s[idx], z[idx])
            W[d] = (eta, soc_wbar_matrices(w), soc_wbar_matrices(w, inverse=True))
        return W

    def apply(self, W, v, power=1):
        """Apply W^power for power in {1, -1, 2, -2}."""
        out = np.empty_like(v)
        op = self.op
        out[op] = W["orth"] ** power * v[op]
        for d, idx in self.groups.items():
            eta, Wb, Wbi = W[d]
            M = Wb if power > 0 else Wbi
            blk = np.einsum("kij,kj->ki", M, v[idx])
            if abs(power) == 2:
                blk = np.einsum("kij,kj->ki", M, blk)
            out[idx] = (eta ** power)[:, None] * blk
        return out

    def inv_square_blocks(self, W):
        Horth = 1.0 / W["orth"] ** 2
        Hsoc = {}
        for d in self.groups:
            eta, Wb, Wbi = W[d]
            Hsoc[d] = np.einsum("kij,kjl->kil", Wbi, Wbi) / (eta**2)[:, None, None]
        return Horth, Hsoc

    def prod(self, u, v):
        out = np.empty_like(u)
        op = self.op
        out[op] = u[op] * v[op]
        for idx in self.groups.values():
            out[idx] = soc_prod(u[idx], v[idx])
        return out

    def div(self, lam, v):
        out = np.empty_like(v)
        op = self.op
        out[op] = v[op] / lam[op]
        for idx in self.groups.values():
            out[idx] = soc_div(lam[idx], v[idx])
        return out


def _residual_norms(prob: ConicProgram, lay: _Layout, x, y, z, s, tau):
    """Residuals of the normalized iterate in the user's coordinates."""
    xo = lay.primal(x / tau)
    yo = lay.dual_eq(-y / tau)
    zo = lay.dual_cone(z / tau)
    so = np.zeros(prob.n)
    so[lay.cone_vars] = s / tau
    so = lay.primal(so)
    pres = max(np.abs(prob.A @ xo - prob.b).max(initial=0.0),
               np.abs(xo[lay.cone_vars] - so[lay.cone_vars]).max(initial=0.0))
    dres = np.abs(prob.c - prob.A.T @ yo - zo).max(initial=0.0)
    pobj = prob.c @ xo
    dobj = prob.b @ yo
    return xo, yo, zo, pres, dres, pobj, dobj


def solve_conic(prob: ConicProgram, config: SolverConfig | None = None) -> ConicSolution:
    """Solve ``prob``; see :class:`ConicSolution` for the returned fields."""
    cfg = config or SolverConfig()
    if prob.n == 0:
        return _solve_empty(prob)
    lay = _Layout(prob)
    cones = _Cones(lay)
    b = lay.b
    n, p, N = prob.n, prob.m, lay.N
    E = lay.cone_vars
    bnorm = 1.0 + np.abs(prob.b).max(initial=0.0)
    cnorm = 1.0 + np.abs(prob.c).max(initial=0.0)

    kkt = ReducedKKT(lay.rows, lay.cols, lay.data, lay.shape, E, lay.orth_pos, lay.soc_groups,
                     reg=cfg.static_reg)

    e = lay.identity()
    x = np.zeros(n)
    x[E] = e
    s = e.copy()
    z = e.copy()
    y = np.zeros(p)
    tau = kappa = 1.0
    deg = lay.degree

    status = Status.MAX_ITERATIONS
    best = None
    best_pinf = (np.inf, None, None)
    best_dinf = (np.inf, None)
    last_progress = 0
    it = 0
    info = {}
    stall = 0
    for it in range(cfg.max_iter + 1):
        if it > 0 and _rebalance(lay, x, s, z):
            kkt.set_A(lay.data)
            info["rotations"] = info.get("rotations", 0) + 1
        A, c = lay.A, lay.c
        Rx = A.T @ y - _scatter(z, E, n) + c * tau
        Ry = -(A @ x) + b * tau
        Rz = s - x[E]
        Rt = kappa + c @ x + b @ y
        mu = (s @ z + tau * kappa) / (deg + 1)

        xo, yo, zo, pres, dres, pobj, dobj = _residual_norms(prob, lay, x, y, z, s, tau)
        gap = pobj - dobj
        pres_rel, dres_rel = pres / bnorm, dres / cnorm
        gap_ok = abs(gap) <= cfg.gap_tol * (1.0 + min(abs(pobj), abs(dobj)))
        if cfg.verbose:
            log.info("it %3d pobj %+.8e dobj %+.8e gap %.2e pres %.2e dres %.2e tau %.2e kap %.2e",
                     it, pobj, dobj, gap, pres_rel, dres_rel, tau, kappa)
        if np.all(np.isfinite(xo)):
            score = max(pres_rel / cfg.feas_tol, dres_rel / cfg.feas_tol,
                        abs(gap) / (cfg.gap_tol * (1.0 + min(abs(pobj), abs(dobj)))))
            if best is None or score < best[0]:
                if best is None or score < 0.9 * best[0]:
                    last_progress = it
                best = (score, xo, yo, zo, gap, pres, dres, pobj)
        if pres_rel <= cfg.feas_tol and dres_rel <= cfg.feas_tol and gap_ok:
            status = Status.OPTIMAL
            break
        # infeasibility certificates, measured in the user's coordinates from
        # the cone-interior parts of the iterate and normalized by their objective
        if tau < kappa:
            yc, zc = lay.dual_eq(-y), lay.dual_cone(z)
            by = prob.b @ yc
            if by > 0:
                pinf = np.abs(prob.A.T @ yc + zc).max(initial=0.0) / by
                if pinf < best_pinf[0]:
                    best_pinf = (pinf, yc, zc)
                    last_progress = it
                if pinf <= cfg.infeas_tol:
                    status = Status.PRIMAL_INFEASIBLE
                    break
            xs = x.copy()
            xs[E] = s
            xc = lay.primal(xs)
            cx = prob.c @ xc
            if cx < 0:
                dinf = np.abs(prob.A @ xc).max(initial=0.0) / -cx
                if dinf < best_dinf[0]:
                    best_dinf = (dinf, xc)
                    last_progress = it
                if dinf <= cfg.infeas_tol:
                    status = Status.DUAL_INFEASIBLE
                    break
        if it - last_progress >= cfg.stall_iterations:
            status = Status.NUMERICAL_FAILURE
            break
        if it == cfg.max_iter:
            break

        with np.errstate(divide="ignore", invalid="ignore"):
            W = cones.scaling(s, z)
            lam = cones.apply(W, z, 1)
        if not np.all(np.isfinite(lam)):
            # an iterate reached the cone boundary in floating point
            status = Status.NUMERICAL_FAILURE
            break
        try:
            kkt.factor(*cones.inv_square_blocks(W))
        except KKTFactorError:
            status = Status.NUMERICAL_FAILURE
            break

        def solve_k(r1, r2, r3, u=None):
            # K [dx;dy;dz] = [r1; r2; r3 - W u], K = [[0,A',-E'],[A,0,0],[-E,0,-W^2]].
            # W^-2 (W u) is formed as W^-1 u; the detour through W loses accuracy.
            Wi2r3 = cones.apply(W, r3, -2)
            if u is not None:
                Wi2r3 -= cones.apply(W, u, -1)
            rhs1 = r1 - _scatter(Wi2r3, E, n)
            sol = kkt.solve(np.concatenate((rhs1, r2)), refine=cfg.refine_steps)
            dx, dy = sol[:n], sol[n:]
            dz = -(Wi2r3 + cones.apply(W, dx[E], -2))
            if cfg.verbose:
                log.debug("      kkt residual %.2e reg %.1e", kkt.last_residual, kkt.active_reg)
            return dx, dy, dz

        x1, y1, z1 = solve_k(c, -b, np.zeros(N))
        v1 = c @ x1 + b @ y1  # h = 0

        def direction(frac, d_s, d_k):
            x2, y2, z2 = solve_k(-frac * Rx, frac * Ry, -frac * Rz, cones.div(lam, d_s))
            dtau = (c @ x2 + b @ y2 + frac * Rt + d_k / tau) / (v1 + kappa / tau)
            dx = x2 - dtau * x1
            dy = y2 - dtau * y1
            dz = z2 - dtau * z1
            # from the linear block row; going through W^2 loses accuracy as mu -> 0
            ds = -frac * Rz + dx[E]
            dkap = (d_k - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkap

        def max_step(dz, ds, dtau, dkap):
            a = min(cones.step(s, ds), cones.step(z, dz))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkap < 0:
                a = min(a, -kappa / dkap)
            return a

        # predictor
        d_s = -cones.prod(lam, lam)
        d_k = -tau * kappa
        dxa, dya, dza, dsa, dtaua, dkapa = direction(1.0, d_s, d_k)
        alpha_a = min(1.0, max_step(dza, dsa, dtaua, dkapa))
        sigma = float(np.clip((1.0 - alpha_a) ** 3, 0.0, 1.0))
        # corrector
        corr = cones.prod(cones.apply(W, dsa, -1), cones.apply(W, dza, 1))
        d_s = -cones.prod(lam, lam) - corr + sigma * mu * e
        d_k = -tau * kappa - dtaua * dkapa + sigma * mu
        dx, dy, dz, ds, dtau, dkap = direction(1.0 - sigma, d_s, d_k)
        amax = max_step(dz, ds, dtau, dkap)
        alpha = min(1.0, cfg.step_fraction * amax)
        if not np.isfinite(alpha) or not all(np.all(np.isfinite(v)) for v in (dx, dy, dz, ds)):
            status = Status.NUMERICAL_FAILURE
            break
        x += alpha * dx
        y += alpha * dy
        z += alpha * dz
        s += alpha * ds
        tau += alpha * dtau
        kappa += alpha * dkap
        stall = stall + 1 if alpha < 1e-8 else 0
        if stall >= 5:
            status = Status.NUMERICAL_FAILURE
            break

    info["iterations"] = it
    if status == Status.OPTIMAL:
        return ConicSolution(primal=xo, dual_eq=yo, dual_cone=zo, status=status, gap=gap,
                             primal_residual=pres, dual_residual=dres, iterations=it,
                             objective=pobj, info=info)
    if status not in (Status.PRIMAL_INFEASIBLE, Status.DUAL_INFEASIBLE):
        # the run stalled: fall back on the best iterate or certificate seen
        if best is not None and best[0] <= cfg.reduced_factor:
            info["reduced_accuracy"] = True
            status = Status.OPTIMAL
        elif min(best_pinf[0], best_dinf[0]) <= cfg.reduced_infeas_tol:
            info["reduced_accuracy"] = True
            status = (Status.PRIMAL_INFEASIBLE if best_pinf[0] <= best_dinf[0]
                      else Status.DUAL_INFEASIBLE)
    if status == Status.PRIMAL_INFEASIBLE:
        _, yc, zc = best_pinf
        scale = prob.b @ yc
        return ConicSolution(primal=np.full(n, np.nan), dual_eq=yc / scale, dual_cone=zc / scale,
                             status=status, iterations=it, objective=np.inf, info=info)
    if status == Status.DUAL_INFEASIBLE:
        xc = best_dinf[1]
        scale = -(prob.c @ xc)
        return ConicSolution(primal=xc / scale, dual_eq=np.full(p, np.nan),
                             dual_cone=np.full(n, np.nan), status=status, iterations=it,
                             objective=-np.inf, info=info)
    if best is None:
        return ConicSolution(primal=np.full(n, np.nan), dual_eq=np.full(p, np.nan),
                             dual_cone=np.full(n, np.nan), status=status, iterations=it,
                             objective=np.nan, info=info)
    score, xo, yo, zo, gap, pres, dres, pobj = best
    info["best_score"] = score
    return ConicSolution(primal=xo, dual_eq=yo, dual_cone=zo, status=status, gap=gap,
                         primal_residual=pres, dual_residual=dres, iterations=it,
                         objective=pobj, info=info)

_MAX_ANGLE = 1.0
# cumulative bound: cosh(3) ~ 10 keeps rotated columns within a few digits of the originals
_MAX_TOTAL_ANGLE = 3.0


def _rebalance(lay: _Layout, x, s, z) -> bool:
    """Rotate cones whose NT scaling point leans too far in the (t, s) plane.

    After the rotation the NT point of every touched cone has a zero second
    component, i.e. primal and dual are balanced between the y and z sides.
    """
    changed = False
    E = lay.cone_vars
    for d, idx in lay.soc_groups.items():
        with np.errstate(divide="ignore", invalid="ignore"):
            _, w = soc_nt_scaling(s[idx], z[idx])
        if not np.all(np.isfinite(w)):
            return changed
        dth = -np.arctanh(np.clip(w[:, 1] / w[:, 0], -1 + 1e-16, 1 - 1e-16))
        tot = lay.theta[d]
        dth = np.clip(tot + dth, -_MAX_TOTAL_ANGLE, _MAX_TOTAL_ANGLE) - tot
        sel = np.flatnonzero(np.abs(dth) > _MAX_ANGLE)
        if sel.size == 0:
            continue
        changed = True
        th = dth[sel]
        lay.rotate(d, sel, th)
        it_, is_ = idx[sel, 0], idx[sel, 1]
        s[it_], s[is_] = _hrot(s[it_], s[is_], th)
        z[it_], z[is_] = _hrot(z[it_], z[is_], -th)
        xt, xs = E[it_], E[is_]
        x[xt], x[xs] = _hrot(x[xt], x[xs], th)
    return changed


def _solve_empty(prob: ConicProgram) -> ConicSolution:
    """A program without variables: 0 = b is either trivially true or infeasible."""
    bb = float(prob.b @ prob.b)
    if bb == 0.0:
        return ConicSolution(np.zeros(0), np.zeros(prob.m), np.zeros(0), Status.OPTIMAL, gap=0.0,
                             primal_residual=0.0, dual_residual=0.0, objective=0.0)
    return ConicSolution(np.zeros(0), prob.b / bb, np.zeros(0), Status.PRIMAL_INFEASIBLE,
                         objective=np.inf)


def _scatter(v, idx, n):
    out = np.zeros(n)
    out[idx] = v
    return out


def certify(prob: ConicProgram, sol: ConicSolution) -> dict:
    """Recompute residuals, gap and cone violations from the solution vectors."""
    x = np.asarray(sol.primal, dtype=float)
    y = np.asarray(sol.dual_eq, dtype=float)
    z = np.asarray(sol.dual_cone, dtype=float)
    if x.size != prob.n or z.size != prob.n or y.size != prob.m:
        raise ValueError("solution vectors do not match program dimensions")
    pres = float(np.abs(prob.A @ x - prob.b).max(initial=0.0))
    dres = float(np.abs(prob.c - prob.A.T @ y - z).max(initial=0.0))
    pobj = float(prob.c @ x)
    dobj = float(prob.b @ y)
    pviol = dviol = 0.0
    for bl, sl in prob.block_slices():
        if isinstance(bl, FreeBlock):
            dviol = max(dviol, float(np.abs(z[sl]).max()))
            continue
        pviol = max(pviol, cone_violation(x[sl], bl))
        dviol = max(dviol, cone_violation(z[sl], bl, dual=True))
    return {
        "primal_residual": pres,
        "dual_residual": dres,
        "gap": pobj - dobj,
        "primal_objective": pobj,
        "dual_objective": dobj,
        "primal_cone_violation": pviol,
        "dual_cone_violation": dviol,
    }
