"""Standard-form conic programs.

    minimize    c'x
    subject to  A x = b,
                x in F x K_1 x ... x K_p

where each block is free, a nonnegative orthant or a rotated second-order
cone. Dual: maximize b'y subject to c - A'y = z, z in the dual cone (z = 0 on
free blocks).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .cones import ORTHANT, RSOC, ConeBlock, FreeBlock

Block = FreeBlock | ConeBlock


class Status(str, Enum):
    OPTIMAL = "optimal"
    PRIMAL_INFEASIBLE = "primal-infeasible"
    DUAL_INFEASIBLE = "dual-infeasible"
    MAX_ITERATIONS = "max-iterations"
    NUMERICAL_FAILURE = "numerical-failure"


@dataclass(frozen=True)
class SolverConfig:
    gap_tol: float = 1e-8
    feas_tol: float = 1e-8
    max_iter: int = 200
    step_fraction: float = 0.99
    # static KKT regularization and refinement budget
    static_reg: float = 1e-10
    refine_steps: int = 3
    # a run that stalls is still reported optimal when its best iterate is
    # within this factor of the tolerances (flagged in info["reduced_accuracy"])
    reduced_factor: float = 100.0
    # infeasibility certificates: residual relative to the certificate's
    # objective, with a looser fallback used only once the run has stalled
    infeas_tol: float = 1e-8
    reduced_infeas_tol: float = 1e-4
    # stop after this many iterations without progress on any criterion
    stall_iterations: int = 15
    verbose: bool = False

    def __post_init__(self):
        if self.gap_tol <= 0 or self.feas_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0.0 < self.step_fraction < 1.0:
            raise ValueError("step_fraction must lie strictly inside (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


class ConicProgram:
    """Immutable conic program. Arrays are copied and frozen on construction."""

    def __init__(
        self,
        c,
        A,
        b,
        blocks: Sequence[Block],
        row_names: Sequence[str] | None = None,
        col_names: Sequence[str] | None = None,
        name: str = "",
    ):
        self.c = np.array(c, dtype=float).ravel()
        self.A = sp.csr_matrix(A, dtype=float)
        self.A.sum_duplicates()
        self.b = np.array(b, dtype=float).ravel()
        self.blocks = tuple(blocks)
        self.name = name
        n = sum(bl.dim for bl in self.blocks)
        if self.c.size != n:
            raise ValueError(f"objective has length {self.c.size}, layout has {n} variables")
        if self.A.shape != (self.b.size, n):
            raise ValueError(f"A has shape {self.A.shape}, expected ({self.b.size}, {n})")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.b))
                and np.all(np.isfinite(self.A.data))):
            raise ValueError("program data must be finite")
        self.row_names = tuple(row_names) if row_names is not None else None
        self.col_names = tuple(col_names) if col_names is not None else None
        if self.row_names is not None and len(self.row_names) != self.b.size:
            raise ValueError("row_names length mismatch")
        if self.col_names is not None and len(self.col_names) != n:
            raise ValueError("col_names length mismatch")
        offsets = np.cumsum([0] + [bl.dim for bl in self.blocks])
        self.offsets = offsets
        for arr in (self.c, self.b, self.A.data, self.A.indices, self.A.indptr, offsets):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.b.size

    def block_slices(self):
        for k, bl in enumerate(self.blocks):
            yield bl, slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def cone_degree(self) -> int:
        deg = 0
        for bl in self.blocks:
            if isinstance(bl, ConeBlock):
                deg += bl.dim if bl.kind == ORTHANT else 1
        return deg

    def scaled(self, factor: float) -> "ConicProgram":
        """Same program with the objective multiplied by ``factor``."""
        return ConicProgram(factor * self.c, self.A, self.b, self.blocks,
                            self.row_names, self.col_names, self.name)

    def dump(self) -> str:
        """Plain-text listing for diffing against another solver."""
        lines = [f"# conic program {self.name}".rstrip(),
                 f"variables {self.n}", f"rows {self.m}", "blocks"]
        for bl, sl in self.block_slices():
            kind = "free" if isinstance(bl, FreeBlock) else bl.kind
            lines.append(f"  {kind} {sl.start} {bl.dim}")
        lines.append("objective")
        for j in np.flatnonzero(self.c):
            lines.append(f"  {j} {float(self.c[j])!r}")
        lines.append("matrix")
        coo = self.A.tocoo()
        for i, j, v in sorted(zip(coo.row, coo.col, coo.data)):
            lines.append(f"  {i} {j} {float(v)!r}")
        lines.append("rhs")
        for i in np.flatnonzero(self.b):
            lines.append(f"  {i} {float(self.b[i])!r}")
        return "\n".join(lines) + "\n"


@dataclass
class ConicSolution:
    """Solver output in the user's coordinates.

    ``gap`` is ``c'primal - b'dual_eq`` (tiny negative values are possible at
    tolerance level). For infeasible statuses the certificate is normalized:
    ``b'dual_eq = 1`` (primal infeasible) or ``c'primal = -1`` (dual infeasible).
    """

    primal: np.ndarray
    dual_eq: np.ndarray
    dual_cone: np.ndarray
    status: Status
    gap: float = np.nan
    primal_residual: float = np.nan
    dual_residual: float = np.nan
    iterations: int = 0
    objective: float = np.nan
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == Status.OPTIMAL
