import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resdmpc.errors import InfeasibleChargePower, SocOutOfRange
from resdmpc.microgrid import (DEFAULT_PRICES, IDX_G, IDX_M, IDX_S, MicrogridCost, MicrogridParams,
                               PriceSchedule, battery_current, build_microgrid, build_network, ocv,
                               price_at, realized_stage_cost, soc_rate, stage_cost_q, storage_power,
                               terminal_cost_m, trade_cost_l, microgrid_rhs)

LITERAL = MicrogridParams(resistance_scale=1.0)
DEFAULT = MicrogridParams()


def ocv_by_hand(s):
    return 2.23 - 0.001 * (-math.log(s)) ** 3 - 0.35 * s + 0.6851 * math.exp(1.6 * (s - 1))


def test_ocv_at_full_charge_is_exact():
    assert ocv(1.0, DEFAULT) == 2.5651


def test_ocv_half_charge():
    assert ocv(0.5, DEFAULT) == pytest.approx(ocv_by_hand(0.5), abs=1e-12)
    assert ocv(0.5, DEFAULT) == pytest.approx(2.3625, abs=5e-4)


def test_ocv_rejects_empty_battery():
    with pytest.raises(SocOutOfRange):
        ocv(0.0, DEFAULT)


def test_ocv_increases_on_the_operating_range():
    s = np.linspace(0.3, 1.0, 100)
    assert np.all(np.diff(ocv(s, DEFAULT)) > 0)


def test_current_zero_at_zero_power():
    assert battery_current(0.5, 0.0, DEFAULT) == 0.0


def test_current_example_with_unscaled_resistance():
    u = ocv_by_hand(0.5)
    roots = np.roots([1.5, u, -10.0])
    expected = roots[roots > 0][0]
    assert battery_current(0.5, 10.0, LITERAL) == pytest.approx(expected, rel=1e-12)
    assert battery_current(0.5, 10.0, LITERAL) == pytest.approx(1.9119, abs=1e-4)


def test_charging_ten_kw_with_unscaled_resistance_is_beyond_the_cell_equation():
    # U^2 + 4 R p < 0 for R = 1.5 and p = -10
    with pytest.raises(InfeasibleChargePower):
        battery_current(0.5, -10.0, LITERAL)


def test_charging_current_residual_with_default_resistance():
    i = battery_current(0.5, -10.0, DEFAULT)
    assert i < 0
    u = ocv(0.5, DEFAULT)
    assert u * i + DEFAULT.r_eff * i * i == pytest.approx(-10.0, abs=1e-9)


def test_soc_rate_examples():
    assert soc_rate(0.5, 0.0, DEFAULT) == 0.0
    assert soc_rate(0.5, 10.0, LITERAL) == pytest.approx(-0.019119, abs=1e-6)
    assert soc_rate(0.5, -3.0, DEFAULT) > 0


@pytest.mark.parametrize("state, z, expected", [
    ([0.5, 0, 0, 0, 0], [0, 0], 2.0),
    ([0.5, 2, 0, 0, 0], [0, 0], 0.0),
    ([0.5, 12, -10, 0, 0], [0, 0], 0.0),
])
def test_storage_power_examples(state, z, expected):
    assert storage_power(np.array(state, float), np.array(z, float), DEFAULT) == pytest.approx(expected)


def test_storage_power_accounts_for_transfers():
    # send 1 kW to the first neighbor, receive 3 kW from the second
    p = storage_power(np.array([0.5, 0, 0, 1.0, 0]), np.array([0.0, 3.0]), DEFAULT)
    assert p == pytest.approx(2.0 + 1.0 - 3.0)


def test_rhs_fixed_point():
    x = np.array([0.4, 2.0, 0.0, 0.0, 0.0])
    u = np.array([2.0, 0.0, 0.0, 0.0])
    assert np.all(microgrid_rhs(x, u, np.zeros(4), np.zeros(2), DEFAULT) == 0)


def test_market_lag_settles_within_one_step():
    m = build_microgrid("MG1", ("MG2", "MG3"), DEFAULT)
    from resdmpc.dynamics import integrate_step
    out = integrate_step(m, np.array([0.5, 0, 0, 0, 0.0]), np.array([0, 7.0, 0, 0]), np.zeros(2))
    assert abs(out[IDX_M] - 7.0) / 7.0 < 1e-10


def test_generator_attack_drives_generation():
    x = np.array([0.5, 0.0, 0.0, 0.0, 0.0])
    dx = microgrid_rhs(x, np.zeros(4), np.array([10.0, 0, 0, 0]), np.zeros(2), DEFAULT)
    assert dx[IDX_G] == pytest.approx(100.0)


def test_stage_cost_examples():
    assert stage_cost_q(0.0, np.zeros(2), 0.0, DEFAULT) == 0
    assert stage_cost_q(10.0, np.zeros(2), 0.0, DEFAULT) == pytest.approx(20.0)
    assert stage_cost_q(0.0, np.zeros(2), -3.0, DEFAULT) == pytest.approx(9.0)


def test_trade_cost_examples():
    assert trade_cost_l(np.zeros(2), -10.0, price_at(16.0), DEFAULT) == pytest.approx(-150.0)
    assert trade_cost_l(np.zeros(2), 10.0, price_at(2.0), DEFAULT) == pytest.approx(1000.0)
    assert trade_cost_l(np.zeros(2), 0.0, price_at(2.0), DEFAULT) == 0.0
    # importing 1 kW from a neighbor costs 4, exporting 1 kW earns 0.04
    assert trade_cost_l(np.array([1.0, -1.0]), 0.0, (0.0, 0.0), DEFAULT) == pytest.approx(4 - 0.04)


def test_terminal_cost_examples():
    assert terminal_cost_m(0.9, 0.95, DEFAULT) == 0
    assert terminal_cost_m(0.9, 0.8, DEFAULT) == pytest.approx(20000.0)
    assert terminal_cost_m(0.6, 0.6, DEFAULT) == 0


@pytest.mark.parametrize("t, expected", [(16.0, (275.0, 15.0)), (2.0, (100.0, 0.0)), (40.0, (275.0, 15.0)),
                                         (7.0, (200.0, 10.0)), (12.0, (150.0, 0.0)), (21.0, (200.0, 10.0)),
                                         (23.0, (150.0, 0.0))])
def test_price_schedule(t, expected):
    assert price_at(t) == expected


def test_price_schedule_rejects_export_above_import():
    with pytest.raises(ValueError):
        PriceSchedule(((0, 24, 1.0),), ((0, 24, 2.0),))


def test_soc_upper_bound_is_one():
    m = build_microgrid("MG1", ("MG2", "MG3"), DEFAULT)
    assert m.x_ub[IDX_S] == 1.0 and m.x_lb[IDX_S] == 0.0


def test_cost_expressions_match_direct_evaluation():
    params = DEFAULT
    cost = MicrogridCost(params, 2, DEFAULT_PRICES)
    x = np.array([0.7, 3.0, -4.0, 1.5, -0.5])
    z = np.array([0.25, 2.0])
    R, r0, w = cost.quadratic(z)
    q = float(np.sum(w * (R @ x + r0) ** 2))
    p_st = storage_power(x, z, params)
    assert q == pytest.approx(stage_cost_q(x[IDX_G], x[3:], p_st, params), rel=1e-12)
    S, s0 = cost.splits(z)
    d = S @ x + s0
    pos, neg = cost.split_prices(np.array([16.0]))
    lin = float(pos[0] @ np.maximum(d, 0) + neg[0] @ np.minimum(d, 0))
    assert lin == pytest.approx(trade_cost_l(z - x[3:], x[IDX_M], price_at(16.0), params), rel=1e-12)
    assert cost.terminal_weight == 2000 * 100


def test_realized_cost_uses_end_state():
    params = DEFAULT
    x = np.array([0.7, 3.0, -1.0, 0.0, 0.0])
    c = realized_stage_cost(x, np.zeros(2), 16.0, 0.25, params)
    p_st = -3.0 + 1.0 + 2.0
    assert c == pytest.approx(0.25 * (0.2 * 9 + p_st ** 2 - 15.0))


def test_network_has_benchmark_values():
    system, params, x0 = build_network()
    assert params["MG2"].q_st == 200 and params["MG3"].r_st == 3.0 and params["MG1"].cost.c_g == 0.2
    assert x0["MG2"][IDX_S] == 0.5 and np.all(x0["MG3"][1:] == 0)
    assert system.models["MG1"].neighbors == ("MG2", "MG3")


@settings(max_examples=1000, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(-40.0, 40.0))
def test_battery_quadratic_residual(s, p):
    i = battery_current(s, p, DEFAULT)
    u = ocv(s, DEFAULT)
    assert abs(u * i + DEFAULT.r_eff * i * i - p) <= 1e-9
    assert i * p >= 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=5, max_size=5), st.lists(st.floats(-50, 50), min_size=2, max_size=2))
def test_power_balance_closes(state, z):
    x = np.array(state)
    zz = np.array(z)
    p_st = storage_power(x, zz, DEFAULT)
    residual = x[IDX_G] + x[IDX_M] + DEFAULT.p_load + (zz.sum() - x[3:].sum()) + p_st
    assert abs(residual) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.floats(-50, 50),
       st.floats(0, 1), st.floats(0, 1))
def test_costs_are_nonnegative(p_g, p_tr, p_st, s0, sT):
    assert stage_cost_q(p_g, np.array(p_tr), p_st, DEFAULT) >= 0
    assert terminal_cost_m(s0, sT, DEFAULT) >= 0


def test_flows_are_antisymmetric():
    system, _, x0 = build_network()
    rng = np.random.default_rng(5)
    x = {k: np.concatenate([[0.5], rng.normal(size=4)]) for k in system.ids}
    z = {k: system.models[k].coupling_fn(x[k]) for k in system.ids}
    inflow = {k: system.incoming(k, z) - x[k][3:] for k in system.ids}
    # MG1's neighbor order is (MG2, MG3); MG2's is (MG1, MG3)
    assert inflow["MG1"][0] == pytest.approx(-inflow["MG2"][0])
    assert inflow["MG1"][1] == pytest.approx(-inflow["MG3"][0])
    assert inflow["MG2"][1] == pytest.approx(-inflow["MG3"][1])
