"""SVG, PGM and CSV output for truss and density results.

Contact markers always come from the audit's active set stored in the result;
the renderer never decides contact itself. Truss markers are filled circles,
continuum markers are small open circles.
"""

from __future__ import annotations

import numpy as np

PAD = 30.0  # px
WIDTH = 800.0  # px for the drawing area


def _frame(nodes):
    lo, hi = nodes.min(axis=0), nodes.max(axis=0)
    span = float(max((hi - lo).max(), 1e-12))
    scale = WIDTH / span
    size = (hi - lo) * scale + 2 * PAD

    def tx(p):
        p = np.atleast_2d(p)
        return np.column_stack([PAD + (p[:, 0] - lo[0]) * scale,
                                size[1] - PAD - (p[:, 1] - lo[1]) * scale])

    return tx, scale, size


def _fmt(v):
    return f"{v:.3f}".rstrip("0").rstrip(".")


def _obstacle(obstacle, nodes, contact_nodes, gaps, tx, scale):
    """Boundary of a half-plane obstacle, or a tick per candidate for uniform gaps."""
    if not obstacle:
        return []
    n = np.asarray(obstacle["normal"], dtype=float)
    n = n / np.linalg.norm(n)
    t = np.array([-n[1], n[0]])
    out = []
    if "point" in obstacle:
        lo, hi = nodes.min(axis=0), nodes.max(axis=0)
        reach = 0.6 * np.linalg.norm(hi - lo) + 1e-12
        p0 = np.asarray(obstacle["point"], dtype=float)
        c = 0.5 * (lo + hi)
        p0 = p0 + t * ((c - p0) @ t)
        ends = tx(np.vstack([p0 - reach * t, p0 + reach * t]))
        out.append(f'<line class="obstacle" x1="{_fmt(ends[0, 0])}" y1="{_fmt(ends[0, 1])}" '
                   f'x2="{_fmt(ends[1, 0])}" y2="{_fmt(ends[1, 1])}" stroke="#777" '
                   f'stroke-width="2" stroke-dasharray="6 3"/>')
    else:
        half = 8.0 / scale
        for k, g in zip(contact_nodes, gaps):
            p = nodes[k] - g * n
            ends = tx(np.vstack([p - half * t, p + half * t]))
            out.append(f'<line class="obstacle" x1="{_fmt(ends[0, 0])}" y1="{_fmt(ends[0, 1])}" '
                       f'x2="{_fmt(ends[1, 0])}" y2="{_fmt(ends[1, 1])}" stroke="#777" '
                       f'stroke-width="2"/>')
    return out


def _svg(size, body):
    w, h = (_fmt(s) for s in size)
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>', *body, "</svg>", ""])


def truss_svg(nodes, members, x, contact_nodes=(), gaps=(), active=(), obstacle=None,
              xmax=None, threshold=None, max_width=10.0) -> str:
    """Members drawn with width proportional to area; those below ``threshold`` are omitted.

    ``active`` indexes into ``contact_nodes`` (the audit's contact rows).
    """
    nodes = np.asarray(nodes, dtype=float)
    members = np.asarray(members, dtype=int).reshape(-1, 2)
    x = np.asarray(x, dtype=float)
    tx, scale, size = _frame(nodes)
    ref = xmax if xmax is not None else float(x.max(initial=0.0))
    if threshold is None:
        threshold = 1e-4 * ref if ref > 0 else 1e-4
    body = _obstacle(obstacle, nodes, contact_nodes, gaps, tx, scale)
    P = tx(nodes)
    for e in np.flatnonzero(x > threshold):
        a, b = members[e]
        wdt = max(max_width * x[e] / ref, 0.3)
        body.append(f'<line class="member" x1="{_fmt(P[a, 0])}" y1="{_fmt(P[a, 1])}" '
                    f'x2="{_fmt(P[b, 0])}" y2="{_fmt(P[b, 1])}" stroke="black" '
                    f'stroke-width="{_fmt(wdt)}" stroke-linecap="round"/>')
    for p in P:
        body.append(f'<circle class="node" cx="{_fmt(p[0])}" cy="{_fmt(p[1])}" r="1.5" '
                    f'fill="#999"/>')
    for j in active:
        p = P[contact_nodes[j]]
        body.append(f'<circle class="contact" cx="{_fmt(p[0])}" cy="{_fmt(p[1])}" r="5" '
                    f'fill="black"/>')
    return _svg(size, body)


def density_svg(nodes, elements, rho, contact_nodes=(), gaps=(), active=(),
                obstacle=None) -> str:
    """Grayscale elements (0 white, 1 black) with open circles at nodes in contact."""
    nodes = np.asarray(nodes, dtype=float)
    tx, scale, size = _frame(nodes)
    P = tx(nodes)
    body = []
    for e, quad in enumerate(np.asarray(elements, dtype=int)):
        lo = P[quad].min(axis=0)
        hi = P[quad].max(axis=0)
        level = int(round(255 * (1 - float(np.clip(rho[e], 0, 1)))))
        body.append(f'<rect x="{_fmt(lo[0])}" y="{_fmt(lo[1])}" width="{_fmt(hi[0] - lo[0])}" '
                    f'height="{_fmt(hi[1] - lo[1])}" fill="rgb({level},{level},{level})"/>')
    body += _obstacle(obstacle, nodes, contact_nodes, gaps, tx, scale)
    for j in active:
        p = P[contact_nodes[j]]
        body.append(f'<circle class="contact" cx="{_fmt(p[0])}" cy="{_fmt(p[1])}" r="4" '
                    f'fill="none" stroke="red" stroke-width="1.5"/>')
    return _svg(size, body)


def density_grid(rho, nx, ny) -> np.ndarray:
    """Element densities as an (ny, nx) array, row 0 at the bottom of the mesh."""
    return np.asarray(rho, dtype=float).reshape(ny, nx)


def density_csv(rho, nx, ny) -> str:
    """Row-major CSV, first row = bottom row of elements, full precision."""
    grid = density_grid(rho, nx, ny)
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in grid)


def density_pgm(rho, nx, ny) -> bytes:
    """Binary PGM (P5), top row first; 0 maps to white and 1 to black."""
    grid = np.clip(density_grid(rho, nx, ny)[::-1], 0.0, 1.0)
    pix = np.round(255 * (1 - grid)).astype(np.uint8)
    return f"P5\n{nx} {ny}\n255\n".encode() + pix.tobytes()
