"""Incremental assembly of a ConicProgram from named variable groups."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .cones import ORTHANT, RSOC, ConeBlock, FreeBlock
from .program import ConicProgram


class ProgramBuilder:
    """Collects variable blocks, equality rows and objective terms.

    Variable-adding methods return index arrays into the final primal vector;
    ``rsoc`` returns a (k, d) array, one row per cone.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self._blocks = []
        self._n = 0
        self._rows, self._cols, self._vals = [], [], []
        self._rhs = []
        self._row_names = []
        self._obj = {}

    @property
    def n(self) -> int:
        return self._n

    @property
    def m(self) -> int:
        return len(self._rhs)

    def _take(self, dim):
        idx = np.arange(self._n, self._n + dim)
        self._n += dim
        return idx

    def free(self, dim: int) -> np.ndarray:
        if dim == 0:
            return np.zeros(0, dtype=np.int64)
        self._blocks.append(FreeBlock(dim))
        return self._take(dim)

    def orthant(self, dim: int) -> np.ndarray:
        if dim == 0:
            return np.zeros(0, dtype=np.int64)
        self._blocks.append(ConeBlock(ORTHANT, dim))
        return self._take(dim)

    def rsoc(self, count: int, dim: int) -> np.ndarray:
        idx = np.zeros((count, dim), dtype=np.int64)
        for k in range(count):
            self._blocks.append(ConeBlock(RSOC, dim))
            idx[k] = self._take(dim)
        return idx

    def rows(self, mat, var_idx, rhs, name: str = "") -> np.ndarray:
        """Add rows ``mat @ x[var_idx] (+ previous terms) = rhs``; returns row indices.

        Further terms for the same rows can be added with :meth:`add_terms`.
        """
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        start = len(self._rhs)
        self._rhs.extend(rhs.tolist())
        self._row_names.extend([f"{name}[{i}]" for i in range(rhs.size)])
        rows = np.arange(start, start + rhs.size)
        if mat is not None:
            self.add_terms(rows, mat, var_idx)
        return rows

    def add_terms(self, rows, mat, var_idx):
        coo = sp.coo_matrix(mat)
        rows = np.asarray(rows)
        var_idx = np.asarray(var_idx).ravel()
        self._rows.append(rows[coo.row])
        self._cols.append(var_idx[coo.col])
        self._vals.append(coo.data.astype(float))

    def diag_terms(self, rows, var_idx, coef):
        """Entry ``coef_i`` at (rows_i, var_idx_i)."""
        rows = np.asarray(rows).ravel()
        var_idx = np.asarray(var_idx).ravel()
        coef = np.broadcast_to(np.asarray(coef, dtype=float), rows.shape)
        self._rows.append(rows)
        self._cols.append(var_idx)
        self._vals.append(coef.copy())

    def equal(self, var_idx, values, name: str = "") -> np.ndarray:
        """Rows ``x[var_idx] = values``."""
        var_idx = np.asarray(var_idx).ravel()
        values = np.broadcast_to(np.asarray(values, dtype=float), var_idx.shape)
        rows = self.rows(None, None, values, name)
        self.diag_terms(rows, var_idx, 1.0)
        return rows

    def objective(self, var_idx, coef):
        var_idx = np.asarray(var_idx).ravel()
        coef = np.broadcast_to(np.asarray(coef, dtype=float), var_idx.shape)
        for j, v in zip(var_idx.tolist(), coef.tolist()):
            self._obj[j] = self._obj.get(j, 0.0) + v

    def build(self) -> ConicProgram:
        c = np.zeros(self._n)
        for j, v in self._obj.items():
            c[j] = v
        m = len(self._rhs)
        if self._rows:
            A = sp.csr_matrix((np.concatenate(self._vals),
                               (np.concatenate(self._rows), np.concatenate(self._cols))),
                              shape=(m, self._n))
        else:
            A = sp.csr_matrix((m, self._n))
        return ConicProgram(c, A, np.array(self._rhs), self._blocks,
                            row_names=self._row_names, name=self.name)
