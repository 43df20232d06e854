import numpy as np
import pytest

from contact_topopt.compliance import optimize_truss
from contact_topopt.conic import SolverConfig, Status
from contact_topopt.continuum import (SequenceConfig, build_density_filter,
                                      factorize_element_stiffness, q4_element_stiffness,
                                      sequential_socp)
from contact_topopt.misocp import MipConfig, attach_existence_bounds, binary_model, branch_and_bound
from contact_topopt.truss import assemble_stiffness, generate_ground_structure, halfplane_contact
from contact_topopt.verify import audit, audit_truss, solve_contact_equilibrium

from oracles import qp_compliance, random_truss_instance
from test_compliance import floor_instance
from test_continuum import cantilever, floor_contact

TIGHT = SolverConfig(gap_tol=1e-10, feas_tol=1e-10)


def one_dof_wall(gap=1.0):
    gs = generate_ground_structure(1, 0, fixed_dofs=(0, 1, 3))
    return gs, halfplane_contact(gs, [1], point=(1.0 + gap, 0.0), normal=(-1.0, 0.0))


def test_one_dof_hand_kkt():
    _, wall = one_dof_wall()
    eq = solve_contact_equilibrium(np.eye(1), [2.0], wall)
    assert eq.status == Status.OPTIMAL
    assert eq.u == pytest.approx([1.0], abs=1e-8)
    assert eq.r == pytest.approx([-1.0], abs=1e-5)
    assert eq.compliance == pytest.approx(3.0, rel=1e-9)


def test_inactive_contact_and_rigid_floor():
    _, wall = one_dof_wall()
    eq = solve_contact_equilibrium(np.eye(1), [-2.0], wall)
    assert eq.u == pytest.approx([-2.0], abs=1e-5)
    assert eq.r == pytest.approx([0.0], abs=1e-9)
    # floor at zero gap right under the loaded node
    _, wall = one_dof_wall(gap=0.0)
    eq = solve_contact_equilibrium(np.eye(1) * 3.0, [5.0], wall)
    assert eq.u == pytest.approx([0.0], abs=1e-6)
    assert eq.r[0] < 0 and eq.r == pytest.approx([-5.0], rel=1e-5)


def test_unbounded_is_reported():
    eq = solve_contact_equilibrium(np.zeros((2, 2)), [1.0, 0.0])
    assert eq.compliance == np.inf and eq.status == Status.DUAL_INFEASIBLE
    with pytest.raises(ValueError):
        solve_contact_equilibrium(np.eye(3), [1.0, 0.0])
    with pytest.raises(ValueError):
        solve_contact_equilibrium(np.array([[1.0, 2.0], [0.0, 1.0]]), [1.0, 0.0])


def test_equilibrium_against_qp_oracle():
    rng = np.random.default_rng(12)
    for _ in range(12):
        gs, ct, f, x = random_truss_instance(rng)
        K = assemble_stiffness(gs, x)
        eq = solve_contact_equilibrium(K, f, ct)
        ref = qp_compliance(gs, ct, f, x)
        if ref == np.inf:
            assert eq.compliance == np.inf
            continue
        assert eq.compliance == pytest.approx(ref, rel=1e-6, abs=1e-8)
        # equilibrium in force form and sign of the reactions
        scale = 1 + np.abs(f).max()
        assert np.all(eq.r <= 1e-8 * scale)
        assert np.all(ct.C @ eq.u <= ct.g + 1e-7 * (1 + np.abs(eq.u).max()))


def test_optimizer_outputs_pass():
    for g in (0.0, 0.5):
        gs, ct, f = floor_instance(g)
        res = optimize_truss(gs, ct, f, 10.0)
        rep = audit_truss(gs, ct, f, res.x, res)
        assert rep.passed and rep.objective_ok
        assert rep.max_penetration <= rep.tolerances["penetration"]
        assert rep.compliance == pytest.approx(res.objective, rel=1e-5)
    assert rep.active  # the floor carries load


def test_injected_adhesion_is_flagged():
    gs, ct, f = floor_instance(0.0)
    res = optimize_truss(gs, ct, f, 10.0)
    r = res.r.copy()
    r[0] = 1e-3
    rep = audit_truss(gs, ct, f, res.x, dict(u=res.u, r=r, q=res.q, objective=res.objective))
    assert not rep.passed and rep.max_adhesion == pytest.approx(1e-3)
    rep = audit_truss(gs, ct, f, res.x, dict(u=res.u, r=res.r, q=res.q,
                                             objective=1.01 * res.objective))
    assert rep.passed and not rep.objective_ok


def test_bilateral_solution_flagged_as_adhesive():
    gs, ct, f = floor_instance(0.5)
    res = optimize_truss(gs, ct, f, 10.0, bilateral=True)
    assert np.any(res.r > 1e-6)
    rep = audit_truss(gs, ct, f, res.x, res)
    assert not rep.passed and rep.max_adhesion > rep.tolerances["adhesion"]
    # the adhesive reactions mark their nodes too
    assert set(np.flatnonzero(res.r > 1e-6)) <= set(rep.active)


def test_complementarity_shrinks_with_gap_tolerance():
    gs, ct, f = floor_instance(0.25)
    res = []
    for tol in (1e-6, 1e-8):
        out = optimize_truss(gs, ct, f, 10.0, SolverConfig(gap_tol=tol, feas_tol=tol))
        res.append(audit_truss(gs, ct, f, out.x, out).complementarity)
    assert res[1] <= res[0] / 10


def test_misocp_output_passes():
    gs = generate_ground_structure(2, 1, fixed_dofs=(0, 1, 6, 7))
    ct = halfplane_contact(gs, [1, 2], (0.0, -0.1), (0.0, 1.0))
    f = np.zeros(gs.n)
    f[gs.node_dofs(2)[1]] = -1.0
    model = attach_existence_bounds(binary_model(gs, ct, f, 4.0), 0.1, 2.0)
    res, _ = branch_and_bound(model, MipConfig(solver=TIGHT))
    rep = audit(gs, res.x, f, ct, res)
    assert rep.passed and rep.objective_ok


def test_continuum_output_passes():
    mesh, f = cantilever(6, 3)
    ct = floor_contact(mesh, 0.05)
    fact = factorize_element_stiffness(q4_element_stiffness())
    H = build_density_filter(mesh, 1.5)
    res = sequential_socp(mesh, fact, H, f, 0.4 * mesh.m, ct, SequenceConfig(max_iter=10))
    rep = audit(mesh, res.rho, f, ct, res, fact=fact)
    assert rep.passed
    # the tangent model overestimates compliance only through the linearization
    assert rep.compliance <= res.objective * (1 + 1e-7)
