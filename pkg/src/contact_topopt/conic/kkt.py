"""Reduced KKT system of the interior-point method.

With the cone constraint written as ``-E x + s = 0`` the Newton system

    [ 0   A'  -E' ] [dx]   [r1]
    [ A   0    0  ] [dy] = [r2]
    [-E   0  -W^2 ] [dz]   [r3]

is reduced by eliminating ``dz = -W^-2 (r3 + E dx)`` to the quasi-definite

    [ E' W^-2 E + d I   A'  ] [dx]   [r1 - E' W^-2 r3]
    [ A                -d I ] [dy] = [r2            ]

which is factored with a sparse LDL' (qdldl). The sparsity pattern is fixed
at construction so refactorization only rewrites the value array.
"""

from __future__ import annotations

import logging

import numpy as np
import qdldl
import scipy.sparse as sp

log = logging.getLogger(__name__)


class KKTFactorError(RuntimeError):
    pass


class ReducedKKT:
    def __init__(self, rows: np.ndarray, cols: np.ndarray, data: np.ndarray, shape,
                 cone_vars: np.ndarray, orth_pos: np.ndarray,
                 soc_groups: dict[int, np.ndarray], reg: float = 1e-10):
        """``A`` is given as triplets whose order stays fixed for the lifetime
        of the object; :meth:`set_A` replaces the values only."""
        m, n = shape
        self.n, self.m = n, m
        self._a_rows, self._a_cols = rows, cols
        self.set_A(data)
        self.cone_vars = cone_vars
        self.orth_pos = orth_pos
        self.soc_groups = soc_groups
        self.reg = reg
        N = n + m

        rows, cols = [np.arange(N)], [np.arange(N)]
        self._orth_var = cone_vars[orth_pos]
        rows.append(self._orth_var)
        cols.append(self._orth_var)
        self._soc_tri = {}
        for d, idx in soc_groups.items():
            iu, ju = np.triu_indices(d)
            var = cone_vars[idx]  # (k, d)
            rows.append(var[:, iu].ravel())
            cols.append(var[:, ju].ravel())
            self._soc_tri[d] = (iu, ju)
        rows.append(self._a_cols)
        cols.append(self._a_rows + n)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        # all entries are upper triangular by construction
        keys = cols.astype(np.int64) * N + rows
        ukeys, inverse = np.unique(keys, return_inverse=True)
        self._inverse = inverse
        ucols = ukeys // N
        urows = ukeys % N
        indptr = np.zeros(N + 1, dtype=np.int64)
        np.add.at(indptr, ucols + 1, 1)
        indptr = np.cumsum(indptr)
        self._pattern = (urows.astype(np.int32), indptr.astype(np.int32))
        self._nnz = ukeys.size
        self._solver = None
        self._Horth = None
        self._Hsoc = None

    def set_A(self, data: np.ndarray):
        self._a_vals = np.asarray(data, dtype=float).copy()
        shape = (self.m, self.n)
        self.A = sp.csr_matrix((self._a_vals, (self._a_rows, self._a_cols)), shape=shape)
        self.AT = self.A.T.tocsr()

    def _matrix(self, Horth, Hsoc, reg):
        n, m = self.n, self.m
        diag = np.concatenate((np.full(n, reg), np.full(m, -reg)))
        vals = [diag, Horth]
        for d, (iu, ju) in self._soc_tri.items():
            vals.append(Hsoc[d][:, iu, ju].ravel())
        vals.append(self._a_vals)
        data = np.bincount(self._inverse, weights=np.concatenate(vals), minlength=self._nnz)
        indices, indptr = self._pattern
        return sp.csc_matrix((data, indices, indptr), shape=(n + m, n + m))

    def factor(self, Horth: np.ndarray, Hsoc: dict[int, np.ndarray], reg: float | None = None):
        """Factor with ``W^-2`` given as orthant diagonal and dense SOC blocks."""
        self._Horth, self._Hsoc = Horth, Hsoc
        reg = self.reg if reg is None else reg
        for _ in range(4):
            M = self._matrix(Horth, Hsoc, reg)
            try:
                if self._solver is None:
                    self._solver = qdldl.Solver(M, upper=True)
                else:
                    self._solver.update(M, upper=True)
                probe = self._solver.solve(np.ones(self.n + self.m))
                if np.all(np.isfinite(probe)):
                    self.active_reg = reg
                    return
            except (RuntimeError, ValueError) as exc:
                log.debug("KKT factorization failed at reg=%g: %s", reg, exc)
                self._solver = None
            reg *= 1e3
        raise KKTFactorError("KKT matrix could not be factored after regularization retries")

    def _apply_H(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros_like(v)
        cv = self.cone_vars
        out[cv[self.orth_pos]] += self._Horth * v[cv[self.orth_pos]]
        for d, idx in self.soc_groups.items():
            var = cv[idx]
            out_blk = np.einsum("kij,kj->ki", self._Hsoc[d], v[var])
            np.add.at(out, var.ravel(), out_blk.ravel())
        return out

    def _apply(self, sol: np.ndarray) -> np.ndarray:
        n = self.n
        dx, dy = sol[:n], sol[n:]
        return np.concatenate((self._apply_H(dx) + self.AT @ dy, self.A @ dx))

    def solve(self, rhs: np.ndarray, refine: int = 3, tol: float = 1.0) -> np.ndarray:
        """Solve with iterative refinement against the unregularized matrix.

        Refinement stops as soon as it fails to reduce the residual: with
        dependent equality rows the unregularized system can be inconsistent
        and refining towards it would diverge along the null space. When the
        refined residual stays above ``tol`` the factorization is unstable
        (tiny pivots on free variables) and it is redone with a larger
        regularization; the best solution seen is returned.
        """
        scale = 1.0 + np.abs(rhs).max()
        best = None
        for attempt in range(4):
            sol, rn = self._refined(rhs, refine)
            if best is None or rn < best[1]:
                best = (sol, rn, self.active_reg)
            if rn <= tol * scale or self._Horth is None:
                break
            reg = self.active_reg * 1e3
            if reg > 1e-4:
                break
            log.debug("KKT residual %.1e, refactoring at reg=%g", rn / scale, reg)
            try:
                self.factor(self._Horth, self._Hsoc, reg)
            except KKTFactorError:
                break
        sol, rn, reg = best
        if reg != self.active_reg:
            # keep the factorization that did best for the following solves
            self.factor(self._Horth, self._Hsoc, reg)
        self.last_residual = rn / scale
        return sol

    def _refined(self, rhs: np.ndarray, refine: int):
        sol = self._solver.solve(rhs)
        scale = 1.0 + np.abs(rhs).max()
        res = rhs - self._apply(sol)
        rn = np.abs(res).max()
        for _ in range(refine):
            if rn <= 1e-14 * scale:
                break
            cand = sol + self._solver.solve(res)
            cres = rhs - self._apply(cand)
            cn = np.abs(cres).max()
            if not cn < rn:
                break
            sol, res, rn = cand, cres, cn
        if not np.isfinite(rn):
            rn = np.inf
        return sol, rn
