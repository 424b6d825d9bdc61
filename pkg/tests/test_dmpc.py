import itertools
import logging

import numpy as np
import pytest
from scipy.optimize import minimize

from resdmpc.dmpc import (Contract, LocalController, assemble_ocp, build_tree, derive_contracts,
                          solve_ocp)
from resdmpc.errors import AssemblyError, TreeTooLarge
from resdmpc.microgrid import IDX_G, IDX_S, IDX_TR, SOC_FLOOR_OCP, MicrogridCost, PriceSchedule, build_network

from toys import DT, TrackingCost, scalar_model, shooting_cost, toy_problem



def point_contract(value=0.0, stages=4, owner="N"):
    return Contract.point(owner, 0, value, stages, DT)


def wide_contract(stages=4, owner="N"):
    return Contract(owner, 0, np.full((stages, 1), -1.0), np.full((stages, 1), 1.0), DT)


# -- contracts ---------------------------------------------------------------

def test_contract_rejects_crossed_bounds():
    with pytest.raises(ValueError):
        Contract("A", 0, [[1.0]], [[0.0]])


def test_contract_window_repeats_edge_rows():
    c = Contract("A", 2, [[0.0], [1.0]], [[0.5], [1.5]])
    lo, hi = c.window(1, 4)
    assert lo.ravel().tolist() == [0.0, 0.0, 1.0, 1.0]
    assert hi.ravel().tolist() == [0.5, 0.5, 1.5, 1.5]
    assert np.allclose(c.times, [0.5, 0.75])


# -- tree --------------------------------------------------------------------

def test_nominal_tree_is_a_single_path():
    tree = build_tree([0.0], [[0.0]], [point_contract()], [[0.0]], n_p=4, robust_horizon=2)
    assert tree.leaves.size == 1
    assert tree.n_nodes == 5
    assert tree.weights.tolist() == [1.0]


def test_three_attacks_times_three_coupling_labels_gives_81_leaves():
    tree = build_tree([0.0], [[-1.0], [0.0], [1.0]], [wide_contract()], None, n_p=4, robust_horizon=2)
    assert tree.leaves.size == 81
    assert tree.weights.sum() == pytest.approx(1.0)


def test_single_axis_tree_branches_twice_then_chains():
    tree = build_tree([0.0], [[-1.0], [0.0], [1.0]], [point_contract()], None, n_p=4, robust_horizon=2)
    per_stage = [int(np.sum(tree.stage == l)) for l in range(5)]
    assert per_stage == [1, 3, 9, 9, 9]
    children = np.bincount(tree.parent[1:], minlength=tree.n_nodes)
    assert np.all(children[tree.stage == 0] == 3)
    assert np.all(children[tree.stage == 1] == 3)
    assert np.all(children[(tree.stage >= 2) & (tree.stage < 4)] == 1)
    # chained nodes keep the realization of their parent
    chained = np.flatnonzero(tree.stage >= 3)
    assert np.all(tree.realization[chained] == tree.realization[tree.parent[chained]])


def test_duplicate_attack_vectors_are_merged():
    once = build_tree([0.0], [[0.0], [2.0]], [point_contract()], None, n_p=3)
    twice = build_tree([0.0], [[0.0], [2.0], [2.0 + 1e-12]], [point_contract()], None, n_p=3)
    assert twice.leaves.size == once.leaves.size == 2


def test_coupling_labels_use_contract_lo_mid_hi():
    c = Contract("N", 0, [[0.0], [1.0]], [[2.0], [5.0]])
    tree = build_tree([0.0], [[0.0]], [c], None, n_p=2, robust_horizon=1)
    first = tree.z_N[tree.stage == 1].ravel()
    assert sorted(first.tolist()) == [0.0, 1.0, 2.0]
    # chained stage-2 nodes read the stage-2 row with the same label
    for node in np.flatnonzero(tree.stage == 2):
        lo, hi = 1.0, 5.0
        label_value = {0.0: lo, 1.0: 0.5 * (lo + hi), 2.0: hi}[tree.z_N[tree.parent[node], 0]]
        assert tree.z_N[node, 0] == label_value


def test_tree_size_cap():
    attacks = np.arange(10.0)[:, None]
    with pytest.raises(TreeTooLarge):
        build_tree([0.0], attacks, [wide_contract()], None, n_p=3, robust_horizon=2)
    tree = build_tree([0.0], attacks[:9], [wide_contract()], None, n_p=3, robust_horizon=2)
    assert tree.leaves.size == 729


def test_non_anticipativity_groups_follow_the_tree():
    tree = build_tree([0.0], [[-1.0], [1.0]], [wide_contract()], None, n_p=3, robust_horizon=2)
    groups = tree.groups()
    assert sorted(groups[0]) == list(range(tree.leaves.size))
    paths = [tree.path(leaf) for leaf in tree.leaves]
    for node, members in groups.items():
        l = tree.stage[node]
        # every scenario in the group passes through the node, and no other does
        assert {s for s, p in enumerate(paths) if p[l] == node} == set(members)
    # two scenarios share a decision exactly when they share the node
    for s, t in itertools.combinations(range(len(paths)), 2):
        for l in range(tree.n_stages):
            same_group = any(s in m and t in m for n, m in groups.items() if tree.stage[n] == l)
            assert same_group == (paths[s][l] == paths[t][l])


def test_node_weights_sum_to_one_per_stage():
    tree = build_tree([0.0], [[-1.0], [0.0], [1.0]], [wide_contract()], None, n_p=3, robust_horizon=1)
    w = tree.node_weights()
    for l in range(4):
        assert w[tree.stage == l].sum() == pytest.approx(1.0)


# -- OCP on scalar toys ----------------------------------------------------------

def test_zero_target_from_rest_gives_zero_input():
    prob, _ = toy_problem(TrackingCost(target=0.0))
    sol = solve_ocp(prob)
    assert sol.report.converged
    assert np.abs(sol.inputs).max() <= 1e-8


def test_singleton_tree_matches_single_shooting():
    cost = TrackingCost(target=1.0)
    prob, _ = toy_problem(cost)
    sol = solve_ocp(prob, tol_opt=1e-9)
    assert sol.report.converged
    ref = minimize(shooting_cost, np.zeros(2), args=(0.0, cost), method="L-BFGS-B",
                   bounds=[(-1.0, 3.0)] * 2, options={"ftol": 1e-15, "gtol": 1e-12})
    assert np.allclose(sol.stage_inputs().ravel(), ref.x, atol=1e-6)
    assert sol.objective == pytest.approx(ref.fun, abs=1e-6)


def test_two_attack_scenarios_match_the_joint_shooting_problem():
    cost = TrackingCost(target=0.5)
    attacks = (-0.4, 0.8)
    prob, _ = toy_problem(cost, x0=0.2, attacks=[[a] for a in attacks])
    sol = solve_ocp(prob, tol_opt=1e-9)
    assert sol.report.converged

    def joint(v):
        # v = (shared u0, u1 in scenario 0, u1 in scenario 1)
        return sum(0.5 * shooting_cost([v[0], v[1 + s]], 0.2, cost, a) for s, a in enumerate(attacks))

    ref = minimize(joint, np.zeros(3), method="L-BFGS-B", bounds=[(-1.0, 3.0)] * 3,
                   options={"ftol": 1e-15, "gtol": 1e-12})
    tree = prob.tree
    stage1 = [int(n) for n in tree.inner if tree.stage[n] == 1]
    u1 = {float(tree.attack[n, 0]): sol.inputs[list(tree.inner).index(n), 0] for n in stage1}
    assert sol.first_input[0] == pytest.approx(ref.x[0], abs=1e-5)
    assert u1[attacks[0]] == pytest.approx(ref.x[1], abs=1e-5)
    assert u1[attacks[1]] == pytest.approx(ref.x[2], abs=1e-5)
    assert sol.objective == pytest.approx(ref.fun, abs=1e-7)


def test_kinked_cost_matches_grid_search():
    cost = TrackingCost(target=1.0, price_pos=0.4, kink=0.3)
    prob, _ = toy_problem(cost)
    sol = solve_ocp(prob)
    assert sol.report.converged
    grid = np.linspace(-1.0, 3.0, 401)
    step = grid[1] - grid[0]
    best, arg = np.inf, None
    for u0 in grid:
        for u1 in grid:
            c = shooting_cost([u0, u1], 0.0, cost)
            if c < best:
                best, arg = c, (u0, u1)
    u = sol.stage_inputs().ravel()
    assert np.all(np.abs(u - arg) <= step)
    assert sol.objective <= best + 1e-9
    assert sol.objective >= best - 1e-3


def test_split_variables_never_import_and_export_together():
    cost = TrackingCost(target=1.0, price_pos=100.0, price_neg=0.0, kink=0.3)
    prob, _ = toy_problem(cost, attacks=[[-0.5], [0.0], [0.5]], n_p=3)
    sol = solve_ocp(prob)
    assert sol.report.converged
    L, v = prob.layout, sol.report.solution
    pos, neg = v[L.pp_off:L.pm_off], v[L.pm_off:L.h_off]
    assert np.minimum(pos, neg).max() <= 1e-6


def test_pinned_contract_freezes_the_coupling():
    prob, _ = toy_problem(TrackingCost(target=1.0), contract=Contract.point("toy", 0, 0.0, 2, DT))
    sol = solve_ocp(prob)
    assert sol.report.converged
    assert np.abs(sol.states).max() <= 1e-6


def test_solution_satisfies_bounds_at_every_node():
    cost = TrackingCost(target=2.0)
    prob, _ = toy_problem(cost, attacks=[[-1.0], [0.0], [1.0]], n_p=3, x_bounds=([-1.0], [0.4]))
    sol = solve_ocp(prob)
    assert sol.report.converged
    assert sol.states[1:].max() <= 0.4 + 1e-6
    assert sol.report.max_violation <= 1e-6


def test_assembly_checks_dimensions():
    model = scalar_model()
    tree = build_tree([0.0, 0.0], [[0.0]], [], None, n_p=2)
    with pytest.raises(AssemblyError):
        assemble_ocp(tree, model, TrackingCost())
    tree = build_tree([0.0], [[0.0, 0.0]], [], None, n_p=2)
    with pytest.raises(AssemblyError):
        assemble_ocp(tree, model, TrackingCost())
    tree = build_tree([0.0], [[0.0]], [point_contract()], None, n_p=2)
    with pytest.raises(AssemblyError):
        assemble_ocp(tree, model, TrackingCost())
    tree = build_tree([0.0], [[0.0]], [], None, n_p=2)
    wrong = Contract("toy", 0, np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(AssemblyError):
        assemble_ocp(tree, model, TrackingCost(), wrong)


# -- contracts from solutions ----------------------------------------------------

def test_single_path_contract_has_margin_width():
    prob, model = toy_problem(TrackingCost(target=1.0))
    sol = solve_ocp(prob)
    c = derive_contracts(sol, model, margin=1e-3)
    assert np.allclose(c.hi - c.lo, 2e-3)
    assert np.allclose(0.5 * (c.lo + c.hi).ravel(), sol.states[1:].ravel(), atol=1e-6)


def microgrid_setup(attacks, prices=None):
    system, params, x0 = build_network()
    model = system.models["MG1"]
    cost = MicrogridCost(params["MG1"], 2, prices) if prices else MicrogridCost(params["MG1"], 2)
    nbr = [Contract.point(n, 0, [0.0, 0.0], 4, DT) for n in ("MG2", "MG3")]
    comps = [[system.route_index(n, "MG1")[0]] for n in ("MG2", "MG3")]
    tree = build_tree(x0["MG1"], attacks, nbr, None, 4, 1, 0, comps)
    x_lb = model.x_lb.copy()
    x_lb[IDX_S] = SOC_FLOOR_OCP
    return system, model, cost, tree, (x_lb, model.x_ub)


def test_generator_attack_contract_spans_the_induced_transfers():
    attacks = np.zeros((3, 4))
    attacks[:, 0] = [-5.0, 0.0, 5.0]
    _, model, cost, tree, xb = microgrid_setup(attacks)
    sol = solve_ocp(assemble_ocp(tree, model, cost, None, DT, xb))
    assert sol.report.converged
    c = derive_contracts(sol, model, margin=1e-3)
    # oracle: end-of-step transfers at every node of each stage
    for l in range(1, tree.n_stages + 1):
        nodes = tree.stage == l
        tr = sol.states[nodes][:, IDX_TR:]
        assert np.allclose(c.lo[l - 1], tr.min(axis=0) - 1e-3, atol=1e-6)
        assert np.allclose(c.hi[l - 1], tr.max(axis=0) + 1e-3, atol=1e-6)
    # generator scenarios must actually differ, transfers need not
    assert np.ptp(sol.states[tree.stage == 1][:, IDX_G]) > 1.0


def test_microgrid_split_tightness_with_import_price_above_export():
    flat = PriceSchedule(import_=((0, 24, 100.0),), export=((0, 24, 0.0),))
    _, model, cost, tree, xb = microgrid_setup(np.zeros((1, 4)), flat)
    prob = assemble_ocp(tree, model, cost, None, DT, xb)
    sol = solve_ocp(prob)
    assert sol.report.converged
    L, v = prob.layout, sol.report.solution
    assert np.minimum(v[L.pp_off:L.pm_off], v[L.pm_off:L.h_off]).max() <= 1e-6


def test_microgrid_pinned_contract_forces_zero_transfers():
    _, model, cost, tree, xb = microgrid_setup(np.zeros((1, 4)))
    pinned = Contract.point("MG1", 0, [0.0, 0.0], 4, DT)
    sol = solve_ocp(assemble_ocp(tree, model, cost, pinned, DT, xb))
    assert sol.report.converged
    assert np.abs(sol.states[:, IDX_TR:]).max() <= 1e-6


# -- controller --------------------------------------------------------------

def test_controller_first_input_is_shared_by_all_scenarios():
    ctrl = LocalController(scalar_model(-1.0, 3.0), TrackingCost(target=1.0), n_p=3, dt=DT)
    res = ctrl.plan(0, [0.0], [[-0.5], [0.5]], [])
    assert res.fallback is None
    # one input variable per inner node: the root holds the only stage-0 input
    tree = res.solution.tree
    assert res.solution.inputs.shape[0] == tree.inner.size
    assert np.all(res.input == res.solution.inputs[0])


def test_unreachable_contract_is_relaxed(caplog):
    ctrl = LocalController(scalar_model(-1.0, 1.0), TrackingCost(target=1.0), n_p=2, dt=DT)
    ctrl.contract = Contract.point("toy", 0, 5.0, 2, DT)
    with caplog.at_level(logging.INFO, logger="resdmpc.dmpc"):
        res = ctrl.plan(0, [0.0], [[0.0]], [])
    assert res.fallback == "contract_relaxed"
    assert res.solution.report.converged
    assert any("retrying without the contract" in r.message for r in caplog.records)


def test_infeasible_problem_falls_back_to_the_shifted_input(caplog):
    ctrl = LocalController(scalar_model(-1.0, 1.0), TrackingCost(target=1.0), n_p=2, dt=DT,
                           x_bounds=(np.array([4.0]), np.array([5.0])), max_iter=20)
    ctrl.initial_contract([0.0])
    with caplog.at_level(logging.WARNING, logger="resdmpc.dmpc"):
        res = ctrl.plan(0, [0.0], [[0.0]], [])
    assert res.fallback == "shifted_input"
    assert np.all(res.input == 0.0)
    assert any("ControllerFallback" in r.message for r in caplog.records)
