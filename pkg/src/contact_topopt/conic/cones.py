"""Cone blocks and the small amount of Jordan algebra the solver needs.

Two user-facing cones exist: the nonnegative orthant and the rotated
second-order cone

    K^n = {(x, y, z) in R^(n-2) x R x R : x.x <= y z, y >= 0, z >= 0}.

Internally every rotated cone is mapped to a standard (Lorentz) cone
``{(t, v) : t >= ||v||}`` by a fixed linear change of variables, so the
batched helpers below only deal with standard cones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

ORTHANT = "orthant"
RSOC = "rsoc"

_SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class FreeBlock:
    """A block of unconstrained variables."""

    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"free block needs dim >= 1, got {self.dim}")


@dataclass(frozen=True)
class ConeBlock:
    """A block of variables constrained to a cone.

    ``kind`` is ``"orthant"`` or ``"rsoc"``. A rotated cone block is laid out
    as ``(x_1, ..., x_{dim-2}, y, z)``.
    """

    kind: Literal["orthant", "rsoc"]
    dim: int

    def __post_init__(self):
        if self.kind not in (ORTHANT, RSOC):
            raise ValueError(f"unknown cone kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError(f"cone block needs dim >= 1, got {self.dim}")
        if self.kind == RSOC and self.dim < 3:
            raise ValueError(f"rotated cone needs dim >= 3, got {self.dim}")


def cone_membership(point, block: ConeBlock, tol: float = 0.0) -> bool:
    """Return True if ``point`` lies in ``block`` up to ``tol``."""
    point = np.asarray(point, dtype=float).ravel()
    if point.size != block.dim:
        raise ValueError(f"point has length {point.size}, block has dim {block.dim}")
    if block.kind == ORTHANT:
        return bool(np.all(point >= -tol))
    x, y, z = point[:-2], point[-2], point[-1]
    return bool(x @ x <= y * z + tol and y >= -tol and z >= -tol)


def dual_cone_membership(point, block: ConeBlock, tol: float = 0.0) -> bool:
    """Membership in the dual cone under the standard inner product.

    The orthant is self-dual; the dual of ``x.x <= y z`` is ``a.a <= 4 b c``.
    """
    point = np.asarray(point, dtype=float).ravel()
    if point.size != block.dim:
        raise ValueError(f"point has length {point.size}, block has dim {block.dim}")
    if block.kind == ORTHANT:
        return bool(np.all(point >= -tol))
    a, b, c = point[:-2], point[-2], point[-1]
    return bool(a @ a <= 4.0 * b * c + tol and b >= -tol and c >= -tol)


def rotated_to_soc(x, y: float, z: float) -> np.ndarray:
    """Embed ``(x, y, z)`` as ``(y + z, y - z, 2x)``.

    ``(x, y, z)`` is in the rotated cone iff the first entry of the result is
    at least the Euclidean norm of the remaining entries.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return np.concatenate(([y + z, y - z], 2.0 * x))


def cone_violation(point, block: ConeBlock, dual: bool = False) -> float:
    """Distance-like violation measure, 0 for points inside the cone."""
    point = np.asarray(point, dtype=float).ravel()
    if block.kind == ORTHANT:
        return float(max(0.0, -point.min()))
    u = rsoc_forward(point, dual=dual)
    return float(max(0.0, np.linalg.norm(u[1:]) - u[0]))


# -- change of variables between the rotated cone and the Lorentz cone --------
#
# Primal: (x, y, z) -> (t, s, v) = ((y+z)/sqrt2, (y-z)/sqrt2, sqrt2 x).
# Under this map t^2 - s^2 - |v|^2 = 2(yz - x.x), so membership is preserved.
# Dual variables transform with the inverse transpose.


def rsoc_forward(point: np.ndarray, dual: bool = False) -> np.ndarray:
    """Map a rotated-cone point to Lorentz coordinates (head first)."""
    x, y, z = point[:-2], point[-2], point[-1]
    if dual:
        # inverse transpose of the primal map
        return np.concatenate((((y + z) / _SQRT2, (y - z) / _SQRT2), x / _SQRT2))
    return np.concatenate((((y + z) / _SQRT2, (y - z) / _SQRT2), _SQRT2 * x))


def rsoc_transform(dim: int) -> np.ndarray:
    """Matrix T with ``T @ (x, y, z) = (t, s, v)`` for a rotated block."""
    T = np.zeros((dim, dim))
    k = dim - 2
    T[0, k] = T[0, k + 1] = 1.0 / _SQRT2
    T[1, k] = 1.0 / _SQRT2
    T[1, k + 1] = -1.0 / _SQRT2
    T[2:, :k] = _SQRT2 * np.eye(k)
    return T


# -- batched Lorentz-cone algebra ---------------------------------------------
#
# Arrays of shape (k, d) hold k cones of dimension d, head in column 0.


def soc_det(u: np.ndarray) -> np.ndarray:
    return u[:, 0] ** 2 - np.einsum("ij,ij->i", u[:, 1:], u[:, 1:])


def soc_prod(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Jordan product u o v = (u.v, u0 v1 + v0 u1)."""
    out = np.empty_like(u)
    out[:, 0] = np.einsum("ij,ij->i", u, v)
    out[:, 1:] = u[:, :1] * v[:, 1:] + v[:, :1] * u[:, 1:]
    return out


def soc_div(lam: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Solve lam o x = v for x."""
    l0, l1 = lam[:, 0], lam[:, 1:]
    rho = l0**2 - np.einsum("ij,ij->i", l1, l1)
    x = np.empty_like(v)
    # degenerate lam gives non-finite entries; the solver rejects such directions
    with np.errstate(divide="ignore", invalid="ignore"):
        x[:, 0] = (l0 * v[:, 0] - np.einsum("ij,ij->i", l1, v[:, 1:])) / rho
        x[:, 1:] = (v[:, 1:] - x[:, :1] * l1) / l0[:, None]
    return x


def soc_nt_scaling(s: np.ndarray, z: np.ndarray):
    """Nesterov-Todd scaling for interior points ``s``, ``z``.

    Returns ``(eta, w)`` with ``W = eta * Wbar(w)`` and
    ``Wbar(w) = [[w0, w1'], [w1, I + w1 w1' / (1 + w0)]]`` so that
    ``W z = W^-1 s``.
    """
    sn = np.sqrt(soc_det(s))
    zn = np.sqrt(soc_det(z))
    sb = s / sn[:, None]
    zb = z / zn[:, None]
    gamma = np.sqrt(0.5 * (1.0 + np.einsum("ij,ij->i", sb, zb)))
    w = sb.copy()
    w[:, 0] += zb[:, 0]
    w[:, 1:] -= zb[:, 1:]
    w /= 2.0 * gamma[:, None]
    eta = np.sqrt(sn / zn)
    return eta, w


def soc_wbar_matrices(w: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Dense (k, d, d) stack of Wbar (or its inverse J Wbar J)."""
    k, d = w.shape
    w0, w1 = w[:, 0], w[:, 1:]
    M = np.zeros((k, d, d))
    sign = -1.0 if inverse else 1.0
    M[:, 0, 0] = w0
    M[:, 0, 1:] = sign * w1
    M[:, 1:, 0] = sign * w1
    M[:, 1:, 1:] = np.eye(d - 1)[None] + np.einsum("ki,kj->kij", w1, w1) / (1.0 + w0)[:, None, None]
    return M


def soc_max_step(u: np.ndarray, du: np.ndarray) -> np.ndarray:
    """Largest alpha >= 0 keeping ``u + alpha du`` in the cone (inf if none).

    ``u`` must be interior. Solves the quadratic det(u + a du) = 0 for its
    smallest positive root.
    """
    a = soc_det(du)
    b = u[:, 0] * du[:, 0] - np.einsum("ij,ij->i", u[:, 1:], du[:, 1:])
    c = soc_det(u)
    out = np.full(u.shape[0], np.inf)
    disc = b * b - a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        # stable roots of a t^2 + 2 b t + c = 0
        qq = -(b + np.copysign(sq, b))
        r1 = qq / a
        r2 = c / qq
    lin = np.abs(a) <= 1e-300
    for r in (r1, r2):
        ok = (~lin) & (disc >= 0) & np.isfinite(r) & (r > 0)
        out = np.where(ok, np.minimum(out, r), out)
    lin_ok = lin & (b < 0)
    out = np.where(lin_ok, np.minimum(out, -c / (2.0 * np.where(lin_ok, b, -1.0))), out)
    # the head may cross zero while det stays positive only through the apex
    head_ok = du[:, 0] < 0
    out = np.where(head_ok, np.minimum(out, -u[:, 0] / np.where(head_ok, du[:, 0], -1.0)), out)
    return out
