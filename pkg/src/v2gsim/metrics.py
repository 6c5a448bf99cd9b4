"""Evaluation pipeline and report emission.

A "day run" executes one EVA schedule through the environment with full
per-EV allocation; the year simulation repeats day runs with per-day
fleet seeds and folds the fleet-mean SOC trace through one representative
pack to produce the SOH trajectory. Indices follow C = C_ch + C_bat with
the battery term charged on the day's SOH drop.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import battery as bat
from .allocation import AllocationParams, FleetDispatch
from .env import EnvConfig, GridProfiles, MicrogridEnv, RewardWeights
from .fleet import Horizon, sample_fleet


@dataclass
class EvaluationIndices:
    soh_year_end: float      # percent
    load_variance: float     # kW^2, final accounting window
    charging_cost: float     # $/day, tariff-weighted dispatch sum
    battery_cost: float      # $/day from the day's SOH drop

    @property
    def total_cost(self) -> float:
        return self.charging_cost + self.battery_cost

    def as_dict(self) -> dict:
        return {"soh": self.soh_year_end, "lv": self.load_variance,
                "cost": self.total_cost, "charging_cost": self.charging_cost,
                "battery_cost": self.battery_cost}


@dataclass
class DayResult:
    schedule: np.ndarray           # applied grid-side kW per slot
    load_series: np.ndarray        # total load over the horizon slots
    load_variance: float           # variance of the final 24-window
    charging_cost: float
    energy_trajectory: np.ndarray  # EVA kWh per boundary
    dispatch: FleetDispatch
    projected_slots: int
    shortfall_kwh: float


def run_day(profiles: GridProfiles, sessions, policy_fn,
            config: EnvConfig = EnvConfig(),
            weights: RewardWeights = RewardWeights(),
            alloc_params: AllocationParams = AllocationParams(),
            rng=None, with_allocation: bool = True) -> DayResult:
    """Execute one scheduling day.

    policy_fn(slot, state, env) -> raw EVA power target (kW). Targets are
    projected by the env; with allocation on, the achieved per-EV sum is
    what actually steps the environment.
    """
    env = MicrogridEnv(profiles, sessions, config, weights)
    horizon = env.horizon
    dispatch = FleetDispatch(sessions, horizon, envelope=env.envelope,
                             params=alloc_params,
                             rng=rng if rng is not None else np.random.default_rng(0))
    state = env.reset()
    applied = []
    loads = []
    projected_count = 0
    shortfall = 0.0
    cost = 0.0
    sigma2 = 0.0
    for j in range(horizon.n_slots):
        target = float(policy_fn(j, state, env))
        proj_target, was_projected = env.project(target)
        if with_allocation:
            # Second projection stage: the dispatch layer sees per-EV
            # energies and refines the aggregate target before splitting.
            lo, hi = dispatch.target_bounds(j)
            refined = min(max(proj_target, lo), hi)
            prop = dispatch.allocate_slot(refined, j)
            dispatch.apply(prop)
            actual = float(prop.final_kw.sum())
            shortfall += (abs(prop.shortfall_kw)
                          + abs(proj_target - refined)) * horizon.dt_h
        else:
            actual = proj_target
        out = env.step(actual)
        if with_allocation:
            # Keep aggregate and per-EV books identical (heterogeneous
            # efficiency fleets would otherwise drift through the mean-eta
            # aggregate update).
            env.energy = float(dispatch.energies.sum())
            env.energy_trajectory[-1] = env.energy
        projected_count += int(was_projected)
        applied.append(out.applied_power)
        hour = horizon.slot_hour(j)
        loads.append(env.power_load(j, out.applied_power))
        cost += profiles.at(hour)[3] * out.applied_power * horizon.dt_h
        sigma2 = out.next_state.variance
        state = out.next_state
    return DayResult(schedule=np.array(applied), load_series=np.array(loads),
                     load_variance=sigma2, charging_cost=cost,
                     energy_trajectory=np.array(env.energy_trajectory),
                     dispatch=dispatch, projected_slots=projected_count,
                     shortfall_kwh=shortfall)


def schedule_policy(schedule) -> callable:
    """Wrap a precomputed aggregate schedule as a policy function."""
    arr = np.asarray(schedule, dtype=float)

    def policy(j, state, env):
        return float(arr[j])
    return policy


def agent_policy(agent) -> callable:
    """Deterministic mean-action policy from a trained agent."""
    def policy(j, state, env):
        bounds = env.admissible_bounds()
        mean = float(agent.actor_forward(state.to_vector())[0])
        return bounds[0] + mean * (bounds[1] - bounds[0])
    return policy


@dataclass
class YearResult:
    soh_series: np.ndarray     # percent, day 0 (initial) .. day N
    first_day: DayResult
    days: int


def simulate_year(schedule_builder, profiles: GridProfiles, master_seed,
                  config: EnvConfig = EnvConfig(),
                  weights: RewardWeights = RewardWeights(),
                  fleet_size: int = 509, days: int = 365,
                  fleet_kwargs: dict = None,
                  battery_config: dict = None) -> YearResult:
    """Repeat daily scheduling, folding the fleet-mean SOC trace through
    one representative pack.

    schedule_builder(sessions, profiles, day_index) -> policy_fn for
    run_day. The fleet is resampled each day from a per-day seed derived
    from the master seed.
    """
    fleet_kwargs = fleet_kwargs or {}
    battery_config = battery_config or {}
    soh_params = battery_config.get("soh_params", bat.SohModelParams())
    cell = battery_config.get("cell", bat.CellSpec())
    initial_soh = battery_config.get("initial_soh", 97.46)
    initial_efc = battery_config.get("initial_efc", 50.0)

    horizon = config.horizon()
    seed_seq = np.random.SeedSequence(master_seed)
    day_seeds = seed_seq.spawn(days)
    pack = bat.BatteryPackState(soc=0.5, soh=initial_soh, efc=initial_efc)
    soh_series = [pack.soh]
    first_day = None
    for d in range(days):
        rng = np.random.default_rng(day_seeds[d])
        sessions = sample_fleet(fleet_size, day_seeds[d], horizon=horizon,
                                **fleet_kwargs)
        policy = schedule_builder(sessions, profiles, d)
        result = run_day(profiles, sessions, policy, config, weights, rng=rng)
        if first_day is None:
            first_day = result
        fleet_cap = sum(s.spec.capacity_kwh for s in sessions)
        mean_soc = result.energy_trajectory / fleet_cap
        q_ah = cell.rated_capacity_ah * pack.soh / 100.0
        pack = bat.apply_daily_trace(pack, mean_soc, horizon.dt_h, q_ah, soh_params)
        soh_series.append(pack.soh)
    return YearResult(soh_series=np.array(soh_series), first_day=first_day,
                      days=days)


def evaluation_indices(day: DayResult, soh_series, fleet_size: int,
                       capacity_kwh: float = 24.0,
                       cost_params: bat.DegradationCostParams = bat.DegradationCostParams()
                       ) -> EvaluationIndices:
    """Indices for one strategy: year-end SOH, final-window LV, and the
    daily total cost split (charging + battery)."""
    soh = np.asarray(soh_series, dtype=float)
    if len(soh) > 1:
        per_ev = (bat.degradation_cost(soh[1] / 100.0, capacity_kwh, cost_params)
                  - bat.degradation_cost(soh[0] / 100.0, capacity_kwh, cost_params))
    else:
        per_ev = 0.0
    battery_cost = per_ev * fleet_size
    return EvaluationIndices(soh_year_end=float(soh[-1]),
                             load_variance=day.load_variance,
                             charging_cost=day.charging_cost,
                             battery_cost=battery_cost)


# Orientation per index: larger normalized value means better strategy.
INDEX_ORIENTATION = {"soh": "max", "lv": "min", "cost": "min"}


def normalize_indices(table: dict, orientation: dict = None) -> dict:
    """Linear per-index normalization to [0, 1], oriented larger-better.

    `table` maps strategy -> {index -> value}. Degenerate indices (all
    strategies equal) normalize to 1.0.
    """
    orientation = orientation or INDEX_ORIENTATION
    strategies = list(table)
    normalized = {s: {} for s in strategies}
    for index, sense in orientation.items():
        values = np.array([table[s][index] for s in strategies], dtype=float)
        best = values.max() if sense == "max" else values.min()
        worst = values.min() if sense == "max" else values.max()
        span = best - worst
        for s, v in zip(strategies, values):
            value = 1.0 if span == 0 else float((v - worst) / span)
            normalized[s][index] = value + 0.0 if value != 0 else 0.0
    return normalized


@dataclass
class StrategyReport:
    name: str
    day: DayResult
    soh_series: np.ndarray
    indices: EvaluationIndices


REPORT_FILES = ("load.csv", "soh_year.csv", "soc_dist.csv", "power_sop.csv",
                "indices.csv", "tables.csv", "summary.json")


def emit_reports(run_dir, profiles: GridProfiles, horizon: Horizon,
                 strategies: dict, primary: str = None,
                 cell: bat.CellSpec = bat.CellSpec(),
                 topology: bat.PackTopology = bat.PackTopology()) -> list:
    """Write the seven report artifacts; returns the file paths.

    `strategies` maps name -> StrategyReport; `primary` picks which
    strategy feeds the per-EV SOC distribution and SOP series (defaults
    to the first entry).
    """
    report_dir = os.path.join(run_dir, "report")
    os.makedirs(report_dir, exist_ok=True)
    names = list(strategies)
    primary = primary or names[0]
    paths = []

    def path_of(fname):
        p = os.path.join(report_dir, fname)
        paths.append(p)
        return p

    with open(path_of("load.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "hour", "baseload_kw", "pv_kw", "wind_kw"]
                        + [f"load_{n}" for n in names])
        for j in range(horizon.n_slots):
            h = horizon.slot_hour(j)
            b, pv, wt, _ = profiles.at(h)
            writer.writerow([j, h, f"{b:.10g}", f"{pv:.10g}", f"{wt:.10g}"]
                            + [f"{strategies[n].day.load_series[j]:.10g}" for n in names])

    with open(path_of("soh_year.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day"] + [f"soh_{n}" for n in names])
        depth = max(len(strategies[n].soh_series) for n in names)
        for d in range(depth):
            row = [d]
            for n in names:
                series = strategies[n].soh_series
                row.append(f"{series[min(d, len(series) - 1)]:.10g}")
            writer.writerow(row)

    soc = strategies[primary].day.dispatch.soc_matrix()
    sessions = strategies[primary].day.dispatch.sessions
    with open(path_of("soc_dist.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "ev_id", "soc"])
        for j in range(soc.shape[1]):
            for i, s in enumerate(sessions):
                writer.writerow([j, s.ev_id, f"{soc[i, j]:.10g}"])

    with open(path_of("power_sop.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "ev_id", "power_kw", "sop_charge_kw",
                         "sop_discharge_kw"])
        if sessions:
            i = 0
            s = sessions[i]
            for j, p_row in enumerate(strategies[primary].day.dispatch.power_log):
                state = bat.BatteryPackState(
                    soc=float(np.clip(soc[i, j], 0.0, 1.0)), soh=s.pack.soh,
                    efc=s.pack.efc)
                p_ch, p_dis = bat.peak_power(
                    state.soc, cell, topology, state, horizon.dt_h,
                    soc_bounds=(s.spec.soc_floor, s.spec.soc_ceiling))
                writer.writerow([j, s.ev_id, f"{p_row[i]:.10g}",
                                 f"{p_ch:.10g}", f"{-p_dis:.10g}"])

    raw = {n: strategies[n].indices.as_dict() for n in names}
    norm = normalize_indices({n: raw[n] for n in names})
    with open(path_of("indices.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "soh", "lv", "cost",
                         "norm_soh", "norm_lv", "norm_cost"])
        for n in names:
            writer.writerow([n, f"{raw[n]['soh']:.10g}", f"{raw[n]['lv']:.10g}",
                             f"{raw[n]['cost']:.10g}", f"{norm[n]['soh']:.10g}",
                             f"{norm[n]['lv']:.10g}", f"{norm[n]['cost']:.10g}"])

    with open(path_of("tables.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "soh", "lv", "total_cost",
                         "charging_cost", "battery_cost"])
        for n in names:
            idx = strategies[n].indices
            writer.writerow([n, f"{idx.soh_year_end:.10g}",
                             f"{idx.load_variance:.10g}",
                             f"{idx.total_cost:.10g}",
                             f"{idx.charging_cost:.10g}",
                             f"{idx.battery_cost:.10g}"])

    summary = {
        "strategies": {n: {**raw[n], "normalized": norm[n],
                           "projected_slots": strategies[n].day.projected_slots,
                           "shortfall_kwh": strategies[n].day.shortfall_kwh}
                       for n in names},
        "primary": primary,
        "n_evs": len(sessions),
        "horizon_slots": horizon.n_slots,
    }
    with open(path_of("summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
