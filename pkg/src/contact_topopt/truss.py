"""Ground structures, member geometry, stiffness and contact kinematics.

Displacements are ordered node by node, ``(u_x, u_y)`` per node, with fixed
DOFs removed. Each member carries the compatibility vector ``b_e`` with
``c_e = b_e' u`` its elongation, and ``K(x) = sum_e (E / l_e) x_e b_e b_e'``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class GroundStructure:
    nodes: np.ndarray  # (k, 2)
    members: np.ndarray  # (m, 2), i < j
    young: float = 1.0
    fixed_dofs: tuple = ()
    spacing: float | None = None
    grid: tuple | None = None  # (nx, ny) for generated structures
    lengths: np.ndarray = field(init=False, repr=False)
    B: sp.csc_matrix = field(init=False, repr=False)  # n x m, column e is b_e
    dof_map: np.ndarray = field(init=False, repr=False)  # full dof -> reduced index or -1

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).reshape(-1, 2)
        members = np.array(self.members, dtype=np.int64).reshape(-1, 2)
        if self.young <= 0:
            raise ValueError("Young's modulus must be positive")
        if members.size and (members.min() < 0 or members.max() >= len(nodes)):
            raise ValueError("member references a missing node")
        if np.any(members[:, 0] == members[:, 1]):
            raise ValueError("member joins a node to itself")
        members = np.sort(members, axis=1)
        if len({tuple(e) for e in members}) != len(members):
            raise ValueError("duplicate members")
        d = nodes[members[:, 1]] - nodes[members[:, 0]]
        lengths = np.hypot(d[:, 0], d[:, 1])
        if np.any(lengths <= 0):
            raise ValueError("zero-length member")
        fixed = tuple(sorted({int(i) for i in self.fixed_dofs}))
        ndof = 2 * len(nodes)
        if fixed and (fixed[0] < 0 or fixed[-1] >= ndof):
            raise ValueError("fixed dof out of range")
        dof_map = -np.ones(ndof, dtype=np.int64)
        free = np.setdiff1d(np.arange(ndof), fixed)
        dof_map[free] = np.arange(free.size)

        cosines = d / lengths[:, None]
        m = len(members)
        rows = np.stack([2 * members[:, 0], 2 * members[:, 0] + 1,
                         2 * members[:, 1], 2 * members[:, 1] + 1], axis=1)
        vals = np.hstack([-cosines, cosines])
        cols = np.repeat(np.arange(m), 4)
        rows, vals = dof_map[rows.ravel()], vals.ravel()
        keep = rows >= 0
        B = sp.csc_matrix((vals[keep], (rows[keep], cols[keep])), shape=(free.size, m))

        for name, arr in (("nodes", nodes), ("members", members), ("lengths", lengths),
                          ("dof_map", dof_map)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "fixed_dofs", fixed)
        object.__setattr__(self, "B", B)

    @property
    def m(self) -> int:
        return len(self.members)

    @property
    def n(self) -> int:
        """Number of free degrees of freedom."""
        return self.B.shape[0]

    def node_dofs(self, node: int) -> tuple[int, int]:
        """Reduced indices of the node's (x, y) DOFs (-1 where fixed)."""
        return int(self.dof_map[2 * node]), int(self.dof_map[2 * node + 1])

    def incidence(self) -> sp.csr_matrix:
        """Node-by-member 0/1 incidence matrix."""
        m = self.m
        rows = self.members.ravel()
        cols = np.repeat(np.arange(m), 2)
        return sp.csr_matrix((np.ones(2 * m), (rows, cols)), shape=(len(self.nodes), m))

    def member_b(self, e: int) -> np.ndarray:
        return self.B[:, e].toarray().ravel()


def _lattice_offsets(nx: int, ny: int):
    """Primitive lattice offsets (dx, dy) with dx > 0 or (dx == 0, dy > 0)."""
    out = []
    for dx in range(0, nx + 1):
        for dy in range(-ny, ny + 1):
            if dx == 0 and dy <= 0:
                continue
            if gcd(dx, abs(dy)) == 1:
                out.append((dx, dy))
    return out


def generate_ground_structure(nx: int, ny: int, spacing: float = 1.0, young: float = 1.0,
                              fixed_dofs=()) -> GroundStructure:
    """Grid of (nx+1) x (ny+1) nodes joined by all non-overlapping members.

    A pair of nodes is joined iff its integer offset has gcd 1, i.e. no other
    grid node lies on the segment (a longer collinear member would contain a
    shorter one). Node ``(ix, iy)`` has index ``iy * (nx + 1) + ix``.
    """
    if nx < 0 or ny < 0 or nx + ny < 1:
        raise ValueError("grid needs at least two nodes")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    ix, iy = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    nodes = spacing * np.column_stack([ix.ravel(), iy.ravel()]).astype(float)
    members = []
    for dx, dy in _lattice_offsets(nx, ny):
        for y0 in range(ny + 1):
            y1 = y0 + dy
            if not 0 <= y1 <= ny:
                continue
            for x0 in range(nx + 1 - dx):
                a = y0 * (nx + 1) + x0
                b = y1 * (nx + 1) + x0 + dx
                members.append((min(a, b), max(a, b)))
    members.sort()
    return GroundStructure(nodes, np.array(members, dtype=np.int64).reshape(-1, 2), young=young,
                           fixed_dofs=fixed_dofs, spacing=float(spacing), grid=(nx, ny))


def assemble_stiffness(gs: GroundStructure, x) -> sp.csr_matrix:
    """K(x) = sum_e (E / l_e) x_e b_e b_e' on the free DOFs."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != gs.m:
        raise ValueError(f"x has length {x.size}, structure has {gs.m} members")
    if np.any(x < 0):
        raise ValueError("member areas must be nonnegative")
    k = gs.young * x / gs.lengths
    return (gs.B @ sp.diags(k) @ gs.B.T).tocsr()


@dataclass(frozen=True)
class ContactSpec:
    """Non-penetration ``C u <= g`` for candidate nodes against a rigid obstacle."""

    nodes: np.ndarray
    C: sp.csr_matrix  # c x n
    g: np.ndarray

    def __post_init__(self):
        g = np.array(self.g, dtype=float).ravel()
        nodes = np.array(self.nodes, dtype=np.int64).ravel()
        C = sp.csr_matrix(self.C, dtype=float)
        if C.shape[0] != g.size or nodes.size != g.size:
            raise ValueError("contact rows, nodes and gaps must have equal length")
        if np.any(g < 0):
            raise ValueError("gaps must be nonnegative")
        for arr in (g, nodes):
            arr.flags.writeable = False
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "C", C)

    @property
    def c(self) -> int:
        return self.g.size

    def with_gaps(self, g) -> "ContactSpec":
        g = np.broadcast_to(np.asarray(g, dtype=float), self.g.shape)
        return ContactSpec(self.nodes, self.C, g.copy())

    @classmethod
    def empty(cls, n: int) -> "ContactSpec":
        return cls(np.zeros(0, dtype=np.int64), sp.csr_matrix((0, n)), np.zeros(0))


def halfplane_contact(gs: GroundStructure, candidates, point, normal) -> ContactSpec:
    """Half-plane obstacle through ``point`` with unit ``normal`` pointing into the body.

    The obstacle occupies ``{X : n.(X - point) < 0}``. A node moving by ``u``
    stays outside iff ``-n.u <= n.(X - point) = g``.
    """
    normal = np.asarray(normal, dtype=float).ravel()
    point = np.asarray(point, dtype=float).ravel()
    if normal.size != 2 or point.size != 2:
        raise ValueError("point and normal must be 2-vectors")
    if abs(np.linalg.norm(normal) - 1.0) > 1e-12:
        raise ValueError("obstacle normal must have unit length")
    candidates = np.asarray(candidates, dtype=np.int64).ravel()
    gaps = (gs.nodes[candidates] - point) @ normal
    tol = 1e-12 * (1.0 + np.abs(gs.nodes).max())
    if np.any(gaps < -tol):
        bad = candidates[gaps < -tol]
        raise ValueError(f"candidate nodes {bad.tolist()} lie inside the obstacle")
    gaps = np.maximum(gaps, 0.0)
    rows, cols, vals = [], [], []
    for j, node in enumerate(candidates):
        for k, dof in enumerate(gs.node_dofs(int(node))):
            if dof >= 0 and normal[k] != 0.0:
                rows.append(j)
                cols.append(dof)
                vals.append(-normal[k])
    C = sp.csr_matrix((vals, (rows, cols)), shape=(candidates.size, gs.n))
    return ContactSpec(candidates, C, gaps)


def crossing_pairs(gs: GroundStructure, tol: float | None = None) -> list[tuple[int, int]]:
    """Member pairs whose interiors cross at a single point.

    Uses strict sign changes of the orientation tests, so pairs that only touch
    at an endpoint (or are collinear) are not reported.
    """
    if gs.m < 2:
        return []
    if tol is None:
        tol = 1e-9 * (gs.spacing or float(np.min(gs.lengths)))
    P = gs.nodes[gs.members[:, 0]]
    Q = gs.nodes[gs.members[:, 1]]
    lo = np.minimum(P, Q)
    hi = np.maximum(P, Q)
    out = []
    # orientation values are areas; compare against tol * length
    for a in range(gs.m - 1):
        bs = np.arange(a + 1, gs.m)
        box = np.all((lo[bs] < hi[a] - tol) & (lo[a] < hi[bs] - tol), axis=1)
        bs = bs[box]
        if bs.size == 0:
            continue
        p, q = P[a], Q[a]
        dpq = q - p
        la = np.hypot(*dpq)
        o1 = _cross(dpq, P[bs] - p) / la
        o2 = _cross(dpq, Q[bs] - p) / la
        drs = Q[bs] - P[bs]
        lb = np.hypot(drs[:, 0], drs[:, 1])
        o3 = _cross(drs, p - P[bs]) / lb
        o4 = _cross(drs, q - P[bs]) / lb
        hit = ((o1 > tol) & (o2 < -tol) | (o1 < -tol) & (o2 > tol)) & \
              ((o3 > tol) & (o4 < -tol) | (o3 < -tol) & (o4 > tol))
        out.extend((a, int(b)) for b in bs[hit])
    return out


def _cross(u, v):
    u = np.asarray(u)
    v = np.asarray(v)
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
