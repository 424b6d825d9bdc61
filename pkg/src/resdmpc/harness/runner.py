"""Closed-loop simulation of the networked microgrids."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..adapt import AttackStats, attack_scenarios, update_stats
from ..adi import AdiSnapshot, DetectionConfig, run_distributed_adi
from ..dmpc import Contract, LocalController
from ..dynamics import nominal_coupling_step
from ..exchange import CONTRACT, Bus, ContractMsg
from ..microgrid import (IDX_S, SOC_FLOOR_OCP, MicrogridCost, MicrogridParams, build_network,
                         realized_stage_cost, terminal_cost_m)
from .attacks import AttackStream, inject_attack
from .config import ExperimentConfig
from .metrics import GridStep, GridSummary, StepRecord, summarize, write_summary, write_trace

log = logging.getLogger(__name__)

# the plant reaches SoC = 1 exactly when the plan saturates; this absorbs solver round-off
VIOLATION_TOL = 1e-6
GEN_CHANNEL = 0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[StepRecord]
    terminal: dict[str, float]
    summary: dict[str, GridSummary]
    fallbacks: int


def _controllers(cfg: ExperimentConfig, system, params):
    robust = cfg.controller == "robust"
    out = {}
    for g in cfg.grids:
        model = system.models[g.id]
        x_lb = model.x_lb.copy()
        x_lb[IDX_S] = SOC_FLOOR_OCP
        out[g.id] = LocalController(
            model, MicrogridCost(params[g.id], len(g.neighbors), cfg.prices), cfg.n_p, cfg.dt_h,
            robust_horizon=cfg.robust_horizon if robust else 0, use_contract=robust,
            x_bounds=(x_lb, model.x_ub))
    return out


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    robust = cfg.controller == "robust"
    base = replace(MicrogridParams(), resistance_scale=cfg.resistance_scale)
    system, params, x = build_network(cfg.grids, base)
    ids = system.ids
    models = system.models
    dt = cfg.dt_h
    nbrs = {i: models[i].neighbors for i in ids}
    ctrl = _controllers(cfg, system, params)
    streams = [AttackStream(cfg.seed, j) for j in range(len(cfg.attacks))]
    stats = {i: AttackStats.empty(models[i].n_u) for i in ids}
    det_cfg = DetectionConfig(tau_d=cfg.tau_d_kw, eps=cfg.eps_i, dt=dt)
    contract_bus = Bus(nbrs)
    adi_bus = Bus(nbrs)

    soc0 = {i: float(x[i][IDX_S]) for i in ids}
    z_meas = {i: models[i].coupling_fn(x[i]) for i in ids}
    nominal_prev = dict(z_meas)
    for i in ids:
        contract_bus.broadcast(i, -1, ContractMsg(ctrl[i].initial_contract(x[i], 0)))

    records: list[StepRecord] = []
    fallbacks = 0
    for k in range(cfg.n_steps):
        t = k * dt
        # local plans against the neighbors' latest contracts
        u, contracts, fb = {}, {}, {}
        for i in ids:
            routes = system.routes[i]
            if robust:
                msgs = contract_bus.collect(i, k - 1, [CONTRACT])
                by_sender = {m.sender: m.payload.contract for m in msgs}
                nb_contracts = [by_sender[src] for src, _ in routes]
                attack_set = attack_scenarios(stats[i])
            else:
                nb_contracts = [Contract.point(src, k, z_meas[src], cfg.n_p, dt) for src, _ in routes]
                attack_set = np.zeros((1, models[i].n_u))
            plan = ctrl[i].plan(k, x[i], attack_set, nb_contracts, [idx for _, idx in routes])
            u[i], contracts[i], fb[i] = plan.input, plan.contract, plan.fallback
            fallbacks += plan.fallback == "shifted_input"
        contract_bus.close_round(k - 1)
        for i in ids:
            contract_bus.broadcast(i, k, ContractMsg(contracts[i]))

        # nominal coupling coefficients for this step
        nominal_in = {i: system.incoming(i, nominal_prev) for i in ids}
        nominal = {i: nominal_coupling_step(models[i], x[i], u[i], nominal_in[i], dt) for i in ids}

        attack = {i: np.zeros(models[i].n_u) for i in ids}
        for spec, stream in zip(cfg.attacks, streams):
            attack[spec.grid] = attack[spec.grid] + inject_attack(spec, t, stream, u[spec.grid],
                                                                  nbrs[spec.grid])

        x_next = system.plant_step(x, {i: u[i] + attack[i] for i in ids}, dt)
        violation = {}
        for i in ids:
            s = x_next[i][IDX_S]
            violation[i] = bool(s < -VIOLATION_TOL or s > 1.0 + VIOLATION_TOL)
            x_next[i][IDX_S] = min(max(s, 0.0), 1.0)
        z_next = {i: models[i].coupling_fn(x_next[i]) for i in ids}

        a_star = {i: np.zeros(models[i].n_u) for i in ids}
        flagged: list[str] = []
        if robust:
            snap = AdiSnapshot(system, k, x, u, {i: models[i].output_fn(x_next[i]) for i in ids},
                               z_next, nominal, nominal_in, dt)
            res = run_distributed_adi(snap, cfg.adi_version, det_cfg, adi_bus, always_identify=True)
            flagged = res.flagged
            for i in ids:
                sus = res.suspicions[i]
                if sus.converged:
                    a_star[i] = sus.a_star
                    stats[i] = update_stats(stats[i], sus.a_star)
                else:
                    log.warning("step %d: no usable suspicion for %s (%s)", k, i, sus.status)

        grids = {}
        for i in ids:
            cost = realized_stage_cost(x_next[i], system.incoming(i, z_next), t, dt, params[i], cfg.prices)
            grids[i] = GridStep(x[i].copy(), u[i].copy(), attack[i], a_star[i].copy(),
                                float(stats[i].mean[GEN_CHANNEL]), float(stats[i].std[GEN_CHANNEL]),
                                i in flagged, cost, violation[i], fb[i])
        records.append(StepRecord(k, t, grids))
        x, z_meas, nominal_prev = x_next, z_next, nominal

    terminal = {i: float(terminal_cost_m(soc0[i], x[i][IDX_S], params[i])) for i in ids}
    summary = summarize(records, terminal, ids)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i in ids:
            write_trace(out / f"trace_{i}.csv", i, nbrs[i], records)
        write_summary(out / "summary.csv", summary)
    return ExperimentResult(cfg, records, terminal, summary, fallbacks)
