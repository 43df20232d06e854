import numpy as np
import pytest
import scipy.sparse as sp

from contact_topopt.conic import SolverConfig, certify, solve_conic
from contact_topopt.continuum import (RegularMesh, SequenceConfig, build_continuum_subproblem,
                                      build_density_filter, compliance_continuum_direct,
                                      compliance_continuum_dual, factorize_element_stiffness,
                                      q4_element_stiffness, sequential_socp, tangent)
from contact_topopt.truss import halfplane_contact

from oracles import ke_88_line, q4_stiffness_symbolic

TIGHT = SolverConfig(gap_tol=1e-10, feas_tol=1e-10)
FACT = factorize_element_stiffness(q4_element_stiffness())


def cantilever(nx=4, ny=2):
    """Left edge pinned, unit downward load at the lower right corner."""
    mesh = RegularMesh(nx, ny)
    left = [mesh.node(0, j) for j in range(ny + 1)]
    mesh = RegularMesh(nx, ny, fixed_dofs=[d for k in left for d in (2 * k, 2 * k + 1)])
    f = np.zeros(mesh.nbar)
    f[2 * mesh.node(nx, 0) + 1] = -1.0
    return mesh, f


def floor_contact(mesh, gap):
    nodes = [mesh.node(i, 0) for i in range(1, mesh.nx + 1)]
    return halfplane_contact(mesh, nodes, (0.0, -gap), (0.0, 1.0))


def assembled_stiffness(mesh, rho, p=3.0, E=1.0, nu=0.3):
    """Global K from the symbolic element matrix (independent of the package)."""
    Ke = q4_stiffness_symbolic(E, nu)
    K = np.zeros((mesh.nbar, mesh.nbar))
    for e, dofs in enumerate(mesh.edofs):
        K[np.ix_(dofs, dofs)] += rho[e] ** p * Ke
    free = mesh.dof_map >= 0
    return K[np.ix_(free, free)]


# element matrix and factorization

def test_element_matrix_matches_references():
    K = q4_element_stiffness(1.0, 0.3)
    np.testing.assert_allclose(K, q4_stiffness_symbolic(1.0, 0.3), atol=1e-14)
    np.testing.assert_allclose(K, ke_88_line(0.3), atol=1e-14)
    np.testing.assert_allclose(q4_element_stiffness(2.5, 0.2, size=3.0),
                               q4_stiffness_symbolic(2.5, 0.2), atol=1e-13)


def test_element_rank_and_rigid_modes():
    K = q4_element_stiffness()
    assert np.linalg.matrix_rank(K, tol=1e-10) == 5
    tx = np.tile([1.0, 0.0], 4)
    ty = np.tile([0.0, 1.0], 4)
    xy = np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]])
    rot = np.column_stack([-xy[:, 1], xy[:, 0]]).ravel()
    for mode in (tx, ty, rot):
        np.testing.assert_allclose(K @ mode, 0.0, atol=1e-14)
    with pytest.raises(ValueError):
        q4_element_stiffness(nu=0.5)


def test_factorization_reconstructs_and_matches_energy():
    K = q4_element_stiffness()
    kap, V = FACT.kappa, FACT.V
    assert np.all(kap > 0) and kap.size == 5
    np.testing.assert_allclose(V @ np.diag(kap) @ V.T, K, atol=1e-10 * np.abs(K).max())
    ki = FACT.kappa_inv_sqrt
    np.testing.assert_allclose(ki @ ki, np.linalg.inv(FACT.kappa_matrix), atol=1e-12)
    rng = np.random.default_rng(2)
    mesh = RegularMesh(2, 2)
    for _ in range(20):
        u = rng.standard_normal(mesh.nbar)
        e = int(rng.integers(mesh.m))
        Be = FACT.B(mesh, e)
        s = FACT.kappa_matrix @ (Be.T @ u)
        ue = u[mesh.edofs[e]]
        assert s @ np.linalg.solve(FACT.kappa_matrix, s) == pytest.approx(ue @ K @ ue, rel=1e-12)
    with pytest.raises(ValueError):
        factorize_element_stiffness(np.eye(8))


# filter

def test_filter_small_radius_is_identity():
    mesh = RegularMesh(3, 2)
    for radius in (0.0, 0.5, 0.99):
        assert abs(build_density_filter(mesh, radius) - sp.eye(mesh.m)).max() == 0


def test_filter_rows_against_distance_enumeration():
    mesh = RegularMesh(5, 5, size=2.0)
    R = 1.5 * 2.0
    H = build_density_filter(mesh, R).toarray()
    cen = mesh.centroids()
    ref = np.maximum(0.0, R - np.linalg.norm(cen[:, None] - cen[None], axis=2))
    ref /= ref.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(H, ref, atol=1e-15)
    centre = mesh.nx * 2 + 2
    assert np.count_nonzero(H[centre]) == 9
    np.testing.assert_allclose(H.sum(axis=1), 1.0)
    x = np.random.default_rng(0).random(mesh.m)
    rho = H @ x
    assert rho.min() >= x.min() and rho.max() <= x.max()
    np.testing.assert_allclose(H @ np.full(mesh.m, 0.4), 0.4)


# compliance

def test_full_density_matches_linear_solve():
    mesh, f = cantilever()
    rho = np.ones(mesh.m)
    K = assembled_stiffness(mesh, rho)
    fr = mesh.reduce(f)
    ref = fr @ np.linalg.solve(K, fr)
    d = compliance_continuum_direct(mesh, FACT, rho, f, config=TIGHT)
    p = compliance_continuum_dual(mesh, FACT, rho, f, config=TIGHT)
    assert d.value == pytest.approx(ref, rel=1e-8)
    assert p.value == pytest.approx(ref, rel=1e-8)
    np.testing.assert_allclose(mesh.reduce(d.u), np.linalg.solve(K, fr), atol=1e-6 * ref)
    # reactions balance the load on the pinned edge
    assert p.t[1::2].sum() == pytest.approx(1.0, rel=1e-7)


def test_zero_load_and_young_scaling():
    mesh, f = cantilever()
    rho = np.full(mesh.m, 0.6)
    assert compliance_continuum_direct(mesh, FACT, rho, 0 * f).value == pytest.approx(0, abs=1e-8)
    base = compliance_continuum_dual(mesh, FACT, rho, f).value
    assert compliance_continuum_dual(mesh, FACT, rho, f, young=4.0).value == pytest.approx(
        base / 4, rel=1e-7)


def test_direct_and_dual_agree_with_contact():
    rng = np.random.default_rng(6)
    mesh, f = cantilever()
    for _ in range(8):
        rho = rng.uniform(0, 1, mesh.m)
        rho[rng.random(mesh.m) < 0.2] = 0.0
        ct = floor_contact(mesh, float(rng.uniform(0, 0.5)))
        d = compliance_continuum_direct(mesh, FACT, rho, f, ct, config=TIGHT)
        p = compliance_continuum_dual(mesh, FACT, rho, f, ct, config=TIGHT)
        assert np.isfinite(d.value)
        assert abs(d.value - p.value) <= 1e-6 * (1 + abs(d.value))
        assert np.all(p.r <= 1e-9)


def test_void_structure_without_support_is_unbounded():
    mesh, f = cantilever()
    rho = np.zeros(mesh.m)
    assert compliance_continuum_direct(mesh, FACT, rho, f).value == np.inf
    assert compliance_continuum_dual(mesh, FACT, rho, f).value == np.inf


# sequential SOCP

def test_tangent_examples():
    a, b = tangent(0.5, 3.0)
    assert (a, b) == (0.75, -0.25)
    assert a * 0.5 + b == pytest.approx(0.125)
    rho = np.linspace(0, 1, 101)
    for rk in (0.1, 0.5, 0.9):
        a, b = tangent(rk, 3.0)
        assert np.all(a * rho + b <= rho ** 3 + 1e-15)


def test_previous_iterate_feasible_for_next_subproblem():
    mesh, f = cantilever()
    ct = floor_contact(mesh, 0.1)
    H = build_density_filter(mesh, 1.5)
    v = 0.5 * mesh.m
    rho0 = np.full(mesh.m, 0.5)
    sub = build_continuum_subproblem(mesh, FACT, H, f, v, rho0, 3.0, ct)
    sol = solve_conic(sub.program, TIGHT)
    assert sol.optimal
    rho1 = np.clip(sol.primal[sub.rho], 0, 1)
    nxt = build_continuum_subproblem(mesh, FACT, H, f, v, rho1, 3.0, ct)
    # same variable layout: transplant the point, fixing the tangent column
    x = sol.primal.copy()
    a, b = tangent(rho1, 3.0)
    x[nxt.cone[:, 6]] = a * sol.primal[sub.rho] + b
    rep = certify(nxt.program, type(sol)(x, sol.dual_eq, sol.dual_cone, sol.status))
    assert rep["primal_residual"] <= 1e-7
    assert rep["primal_cone_violation"] <= 1e-7


def test_history_is_nonincreasing_and_audited():
    mesh, f = cantilever(6, 3)
    ct = floor_contact(mesh, 0.05)
    H = build_density_filter(mesh, 1.5)
    v = 0.4 * mesh.m
    res = sequential_socp(mesh, FACT, H, f, v, ct, SequenceConfig(max_iter=40, solver=TIGHT))
    assert res.optimal and res.iterations == len(res.history)
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-8 * (1 + np.abs(h[:-1])))
    assert res.rho.sum() <= v * (1 + 1e-8)
    assert np.all(res.r <= 1e-8)
    assert np.all((res.x >= -1e-9) & (res.x <= 1 + 1e-9))
    # force balance sum B_e s_e = f + D't + C'r
    total = np.zeros(mesh.nbar)
    np.add.at(total, mesh.edofs, res.s @ FACT.V.T)
    rhs = f + mesh.expand(ct.C.T @ res.r) + mesh.D.T @ res.t
    np.testing.assert_allclose(total, rhs, atol=1e-7)
    # the reported objective is a valid bound: exact compliance of the final rho is no larger
    exact = compliance_continuum_dual(mesh, FACT, res.rho.clip(0, 1), f, ct, config=TIGHT)
    assert exact.value <= res.objective * (1 + 1e-7)


def test_linear_interpolation_stops_after_one_subproblem():
    mesh, f = cantilever()
    H = build_density_filter(mesh, 1.5)
    res = sequential_socp(mesh, FACT, H, f, 0.5 * mesh.m, config=SequenceConfig(p=1.0))
    assert res.iterations == 1 and res.converged == "exact"


def test_runs_with_exact_zero_densities():
    mesh, f = cantilever()
    H = build_density_filter(mesh, 0.5)
    rho0 = np.full(mesh.m, 0.5)
    rho0[:2] = 0.0
    res = sequential_socp(mesh, FACT, H, f, 0.5 * mesh.m, rho0=rho0,
                          config=SequenceConfig(max_iter=5))
    assert res.optimal and np.isfinite(res.objective)
