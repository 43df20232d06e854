"""Member-existence binaries on top of the topology SOCP, solved by branch-and-bound.

Each member gets z_e in {0, 1} with ``xmin z_e <= x_e <= xmax z_e``; optional
rows bound the number of members meeting at a node and forbid crossing pairs.
Node relaxations replace z_e by [0, 1]. Members fixed to 0 are dropped from
the node program; members fixed to 1 keep only their area bounds.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .compliance import TrussDesignResult, _design_from_solution, build_topology_socp
from .conic import SolverConfig, Status, solve_conic
from .truss import ContactSpec, GroundStructure

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BinaryAugmentedModel:
    gs: GroundStructure
    contact: ContactSpec | None
    f: np.ndarray
    v: float
    bilateral: bool = False
    xmin: float = 0.0
    xmax: float = np.inf
    dmax: int | None = None
    crossing: tuple = ()
    fix0: frozenset = frozenset()
    fix1: frozenset = frozenset()


@dataclass
class MipConfig:
    mipgap: float = 1e-6
    integrality_tol: float = 1e-6
    max_nodes: int = 10_000
    workers: int = 1
    solver: SolverConfig | None = None

    def __post_init__(self):
        if not (self.mipgap >= 0 and self.integrality_tol > 0):
            raise ValueError("mipgap must be >= 0 and integrality_tol > 0")
        if self.max_nodes < 1 or self.workers < 1:
            raise ValueError("max_nodes and workers must be positive")


@dataclass
class BnBState:
    incumbent: TrussDesignResult | None = None
    pattern: np.ndarray | None = None  # bool per member
    best_bound: float = -np.inf
    node_count: int = 0
    open_nodes: list = field(default_factory=list)  # heap of (bound, seq, fix0, fix1)
    status: str = "running"  # optimal | infeasible | node-limit
    failed_nodes: int = 0

    @property
    def gap(self) -> float:
        if self.incumbent is None:
            return np.inf
        inc = self.incumbent.objective
        return (inc - self.best_bound) / max(abs(inc), 1e-300)


def binary_model(gs: GroundStructure, contact: ContactSpec | None, f, v: float,
                 bilateral: bool = False) -> BinaryAugmentedModel:
    f = np.asarray(f, dtype=float).ravel()
    if f.size != gs.n:
        raise ValueError(f"load has length {f.size}, structure has {gs.n} free DOFs")
    if not v > 0:
        raise ValueError("volume bound must be positive")
    return BinaryAugmentedModel(gs, contact, f, float(v), bilateral)


def attach_existence_bounds(model: BinaryAugmentedModel, xmin: float, xmax: float):
    if not 0 < xmin <= xmax:
        raise ValueError("existence bounds need 0 < xmin <= xmax")
    return replace(model, xmin=float(xmin), xmax=float(xmax))


def attach_degree_limits(model: BinaryAugmentedModel, dmax: int):
    if int(dmax) != dmax or dmax < 1:
        raise ValueError("degree limit must be an integer >= 1")
    return replace(model, dmax=int(dmax))


def attach_no_crossing(model: BinaryAugmentedModel, pairs):
    pairs = tuple(sorted({tuple(sorted((int(a), int(b)))) for a, b in pairs}))
    m = model.gs.m
    if any(a == b or a < 0 or b >= m for a, b in pairs):
        raise ValueError("crossing pair references an invalid member")
    return replace(model, crossing=tuple(sorted(set(model.crossing) | set(pairs))))


def fix_members(model: BinaryAugmentedModel, zero=(), one=()):
    """Fix existence variables before the search (z_e = 0 for ``zero``, 1 for ``one``)."""
    zero, one = frozenset(int(e) for e in zero), frozenset(int(e) for e in one)
    if zero & one:
        raise ValueError("a member cannot be fixed to both 0 and 1")
    return replace(model, fix0=model.fix0 | zero, fix1=model.fix1 | one)


def _upper_area(model: BinaryAugmentedModel) -> np.ndarray:
    # the volume row already implies x_e <= v / l_e, a valid big-M when xmax is infinite
    return np.minimum(model.xmax, model.v / model.gs.lengths)


def _propagate(model: BinaryAugmentedModel, fix0: set, fix1: set):
    """Fix the binaries implied by fixed ones; None when the node is infeasible."""
    fix0, fix1 = set(fix0), set(fix1)
    inc = _incident(model.gs)
    changed = True
    while changed:
        changed = False
        for a, b in model.crossing:
            if a in fix1 and b in fix1:
                return None
            for p, q in ((a, b), (b, a)):
                if p in fix1 and q not in fix0:
                    fix0.add(q)
                    changed = True
        if model.dmax is not None:
            for members in inc:
                ones = sum(e in fix1 for e in members)
                if ones > model.dmax:
                    return None
                if ones == model.dmax:
                    for e in members:
                        if e not in fix1 and e not in fix0:
                            fix0.add(e)
                            changed = True
    if fix0 & fix1:
        return None
    return frozenset(fix0), frozenset(fix1)


_INCIDENT_CACHE = {}


def _incident(gs: GroundStructure):
    key = id(gs)
    hit = _INCIDENT_CACHE.get(key)
    if hit is None or hit[0] is not gs:
        lists = [[] for _ in range(len(gs.nodes))]
        for e, (i, j) in enumerate(gs.members.tolist()):
            lists[i].append(e)
            lists[j].append(e)
        hit = (gs, lists)
        _INCIDENT_CACHE[key] = hit
    return hit[1]


@dataclass
class NodeRelaxation:
    bound: float
    status: Status
    design: TrussDesignResult | None
    z: np.ndarray  # per member; nan for members without a binary
    free: np.ndarray  # members with an unfixed binary


def solve_relaxation(model: BinaryAugmentedModel, fix0=None, fix1=None,
                     config: SolverConfig | None = None) -> NodeRelaxation:
    """Continuous relaxation with the given fixings (defaults: the model's own)."""
    gs = model.gs
    fix0 = model.fix0 if fix0 is None else fix0
    fix1 = model.fix1 if fix1 is None else fix1
    active = np.array([e for e in range(gs.m) if e not in fix0], dtype=np.int64)
    free_mask = np.array([e not in fix1 for e in active], dtype=bool)
    upper = _upper_area(model)

    def extend(pb, tm):
        A = tm.units.A
        xhat = tm.cone[:, 2]
        nf = int(free_mask.sum())
        z = pb.orthant(nf)
        if nf:
            rows = pb.rows(None, None, np.ones(nf), "z<=1")
            pb.diag_terms(rows, z, 1.0)
            pb.diag_terms(rows, pb.orthant(nf), 1.0)
            # x <= xmax z  and  xmin z <= x
            fa = active[free_mask]
            rows = pb.rows(None, None, np.zeros(nf), "upper")
            pb.diag_terms(rows, xhat[free_mask], 1.0)
            pb.diag_terms(rows, z, -upper[fa] / A)
            pb.diag_terms(rows, pb.orthant(nf), 1.0)
            if model.xmin > 0:
                rows = pb.rows(None, None, np.zeros(nf), "lower")
                pb.diag_terms(rows, xhat[free_mask], -1.0)
                pb.diag_terms(rows, z, model.xmin / A)
                pb.diag_terms(rows, pb.orthant(nf), 1.0)
        nfix = int((~free_mask).sum())
        if nfix:
            fa = active[~free_mask]
            rows = pb.rows(None, None, upper[fa] / A, "upper-fixed")
            pb.diag_terms(rows, xhat[~free_mask], 1.0)
            pb.diag_terms(rows, pb.orthant(nfix), 1.0)
            if model.xmin > 0:
                rows = pb.rows(None, None, np.full(nfix, model.xmin / A), "lower-fixed")
                pb.diag_terms(rows, xhat[~free_mask], 1.0)
                pb.diag_terms(rows, pb.orthant(nfix), -1.0)
        zpos = {int(e): int(z[k]) for k, e in enumerate(active[free_mask])}
        if model.dmax is not None:
            for members in _incident(gs):
                fr = [zpos[e] for e in members if e in zpos]
                ones = sum(e in fix1 for e in members)
                if not fr or len(fr) + ones <= model.dmax:
                    continue
                row = pb.rows(None, None, [model.dmax - ones], "degree")
                pb.diag_terms(np.repeat(row, len(fr)), fr, 1.0)
                pb.diag_terms(row, pb.orthant(1), 1.0)
        for a, b in model.crossing:
            if a in zpos and b in zpos:
                row = pb.rows(None, None, [1.0], "crossing")
                pb.diag_terms(np.repeat(row, 2), [zpos[a], zpos[b]], 1.0)
                pb.diag_terms(row, pb.orthant(1), 1.0)
        return z

    tm = build_topology_socp(gs, model.contact, model.f, model.v, model.bilateral,
                             active=active, extend=extend)
    sol = solve_conic(tm.program, config)
    design = _design_from_solution(gs, tm, sol, model.v)
    zfull = np.full(gs.m, np.nan)
    free = active[free_mask]
    if sol.status == Status.OPTIMAL:
        zfull[free] = np.clip(sol.primal[tm.extra], 0.0, 1.0)
        zfull[active[~free_mask]] = 1.0
        zfull[list(fix0)] = 0.0
        bound = design.objective
    elif sol.status == Status.PRIMAL_INFEASIBLE:
        bound = np.inf
    else:
        bound = np.nan
    return NodeRelaxation(bound, sol.status, design, zfull, free)


def _branch_member(rel: NodeRelaxation, gs: GroundStructure, tol: float):
    """Most fractional free binary, ties by larger l x; None when integral."""
    free = rel.free
    if free.size == 0:
        return None
    zf = rel.z[free]
    frac = np.minimum(zf, 1.0 - zf)
    if frac.max() <= tol:
        return None
    vol = gs.lengths[free] * np.nan_to_num(rel.design.x[free])
    # round the score so that near-equal fractionalities tie
    order = np.lexsort((-vol, -np.round(frac, 9)))
    return int(free[order[0]])


def branch_and_bound(model: BinaryAugmentedModel, config: MipConfig | None = None):
    """Best-bound-first search; returns (incumbent design, BnBState).

    Incumbents are re-solved with every binary fixed to the reported pattern,
    so their designs satisfy linking, degree and crossing rows exactly.
    """
    cfg = config or MipConfig()
    gs = model.gs
    state = BnBState()
    seq = itertools.count()
    root = _propagate(model, model.fix0, model.fix1)
    if root is not None:
        heapq.heappush(state.open_nodes, (-np.inf, next(seq), root[0], root[1]))
    leaf_cache = {}

    def prune_level():
        if state.incumbent is None:
            return np.inf
        inc = state.incumbent.objective
        return inc - cfg.mipgap * abs(inc)

    def solve_leaf(fix1):
        key = frozenset(fix1)
        if key not in leaf_cache:
            fix0 = frozenset(range(gs.m)) - key
            leaf_cache[key] = solve_relaxation(model, fix0, key, cfg.solver)
        return leaf_cache[key]

    def offer(pattern_ones):
        res = _propagate(model, frozenset(range(gs.m)) - frozenset(pattern_ones),
                         frozenset(pattern_ones))
        if res is None:
            return
        leaf = solve_leaf(res[1])
        if leaf.status != Status.OPTIMAL:
            return
        if state.incumbent is None or leaf.bound < state.incumbent.objective:
            state.incumbent = leaf.design
            state.pattern = np.zeros(gs.m, dtype=bool)
            state.pattern[list(res[1])] = True
            log.debug("incumbent %.10g at node %d", leaf.bound, state.node_count)

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        while state.open_nodes:
            if state.node_count >= cfg.max_nodes:
                state.status = "node-limit"
                break
            batch = []
            while state.open_nodes and len(batch) < cfg.workers:
                node = heapq.heappop(state.open_nodes)
                if node[0] >= prune_level():
                    continue
                batch.append(node)
            if not batch:
                break
            args = [(model, n[2], n[3], cfg.solver) for n in batch]
            if pool is None:
                results = [solve_relaxation(*a) for a in args]
            else:
                results = list(pool.map(lambda a: solve_relaxation(*a), args))
            for (pbound, _, fix0, fix1), rel in zip(batch, results):
                state.node_count += 1
                if rel.status == Status.PRIMAL_INFEASIBLE:
                    continue
                if rel.status != Status.OPTIMAL:
                    # no bound from this node: keep the parent's and split the
                    # longest free member so the search still covers it
                    state.failed_nodes += 1
                    if rel.free.size == 0:
                        continue
                    e = int(rel.free[np.argmax(gs.lengths[rel.free])])
                    bound = pbound
                else:
                    bound = max(rel.bound, pbound)
                    if bound >= prune_level():
                        continue
                    e = _branch_member(rel, gs, cfg.integrality_tol)
                    if e is None:
                        offer(np.flatnonzero(np.nan_to_num(rel.z) > 0.5).tolist())
                        continue
                    # rounding heuristic: keep every member the relaxation uses
                    offer(np.flatnonzero(np.nan_to_num(rel.z) > cfg.integrality_tol).tolist())
                    if bound >= prune_level():
                        continue
                for child in ((fix0 | {e}, fix1), (fix0, fix1 | {e})):
                    res = _propagate(model, *child)
                    if res is not None:
                        heapq.heappush(state.open_nodes, (bound, next(seq), res[0], res[1]))
    finally:
        if pool is not None:
            pool.shutdown()

    if state.status != "node-limit":
        state.status = "optimal" if state.incumbent is not None else "infeasible"
    # nodes left on the heap are either unexplored (node limit) or within the gap
    bounds = [n[0] for n in state.open_nodes]
    if state.incumbent is not None:
        bounds.append(state.incumbent.objective)
    state.best_bound = min(bounds) if bounds else np.inf
    return _result(model, state), state


def _result(model: BinaryAugmentedModel, state: BnBState) -> TrussDesignResult:
    gs = model.gs
    status = {"optimal": Status.OPTIMAL, "infeasible": Status.PRIMAL_INFEASIBLE,
              "node-limit": Status.MAX_ITERATIONS}[state.status]
    info = {"nodes": state.node_count, "best_bound": state.best_bound,
            "failed_nodes": state.failed_nodes, "mip_status": state.status}
    if state.incumbent is None:
        nan = np.full(gs.m, np.nan)
        nc = model.contact.c if model.contact is not None else 0
        return TrussDesignResult(nan, nan.copy(), nan.copy(), np.full(nc, np.nan),
                                 np.full(gs.n, np.nan), np.inf, model.v, status, info)
    inc = state.incumbent
    report = dict(inc.report)
    report.update(info)
    report["pattern"] = state.pattern.astype(int).tolist()
    return replace(inc, status=status, report=report)

