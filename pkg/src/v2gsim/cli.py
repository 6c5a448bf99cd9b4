"""Command-line entry point: profile generation, training, evaluation,
allocation tracing, year simulation and report emission.

Exit codes: 0 success, 2 config error, 3 missing file, 4 infeasible
fleet/schedule, 5 training divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .allocation import inject_early_departure, settle_rewards, \
    write_allocation_trace
from .baselines import BASELINE_IDS, BaselineInfeasibleError, baseline_schedule
from .battery import apply_daily_trace, degradation_cost
from .config import ConfigError, RunConfig, config_path_from_env, load_config
from .env import MicrogridEnv, read_profiles_csv, synthetic_profiles, \
    write_profiles_csv
from .fleet import InfeasibleSessionError, export_fleet_table, \
    import_fleet_table, sample_fleet
from .metrics import StrategyReport, agent_policy, emit_reports, \
    evaluation_indices, run_day, schedule_policy, simulate_year
from .ppo import TrainingDiverged, load_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_INFEASIBLE = 4
EXIT_DIVERGENCE = 5

SCHEDULE_CSV_HEADER = ["slot", "hour", "p_eva_kw"]


def _seed_streams(cfg: RunConfig) -> dict:
    seq = np.random.SeedSequence(cfg.seed)
    children = seq.spawn(4)
    return {"profiles": children[0], "fleet": children[1],
            "train": children[2], "alloc": children[3]}


def _build_profiles(cfg: RunConfig, seeds):
    if cfg.profiles_csv:
        if not os.path.exists(cfg.profiles_csv):
            raise FileNotFoundError(f"profiles CSV not found: {cfg.profiles_csv}")
        return read_profiles_csv(cfg.profiles_csv)
    return synthetic_profiles(cfg.profiles, seeds["profiles"])


def _build_fleet(cfg: RunConfig, seeds):
    spec = cfg.fleet.spec()
    dists = cfg.fleet.distributions(cfg.battery.initial_soh, cfg.battery.initial_efc)
    if cfg.fleet_csv:
        if not os.path.exists(cfg.fleet_csv):
            raise FileNotFoundError(f"fleet CSV not found: {cfg.fleet_csv}")
        return import_fleet_table(cfg.fleet_csv, spec=spec, dists=dists)
    return sample_fleet(cfg.fleet.n_evs, seeds["fleet"], dists=dists, spec=spec,
                        horizon=cfg.env.horizon())


def _prepare_out(cfg: RunConfig, out_override=None) -> str:
    out = out_override or cfg.out
    os.makedirs(out, exist_ok=True)
    cfg.write_snapshot(os.path.join(out, "config.json"))
    return out


def _write_schedule_csv(path, horizon, schedule):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCHEDULE_CSV_HEADER)
        for j, p in enumerate(schedule):
            writer.writerow([j, horizon.slot_hour(j), f"{p:.10g}"])


def _read_schedule_csv(path, horizon):
    if not os.path.exists(path):
        raise FileNotFoundError(f"schedule CSV not found: {path}")
    values = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            values[int(row["slot"])] = float(row["p_eva_kw"])
    return np.array([values.get(j, 0.0) for j in range(horizon.n_slots)])


def _policy_and_label(args, cfg, sessions, profiles):
    """Resolve --baseline/--checkpoint/zero into (policy_fn, label, agent)."""
    if getattr(args, "baseline", None):
        sched = baseline_schedule(args.baseline, sessions, profiles, cfg.env)
        return schedule_policy(sched), args.baseline, None
    if getattr(args, "checkpoint", None):
        if not os.path.exists(args.checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        agent, _, _ = load_checkpoint(args.checkpoint)
        return agent_policy(agent), "mhvcs", agent
    return schedule_policy(np.zeros(cfg.env.horizon_slots)), "zero", None


def _year_builder(cfg, baseline=None, agent=None):
    """schedule_builder(sessions, profiles, day) for simulate_year."""
    def builder(sessions, profiles, day):
        if baseline:
            return schedule_policy(
                baseline_schedule(baseline, sessions, profiles, cfg.env))
        if agent is not None:
            return agent_policy(agent)
        return schedule_policy(np.zeros(cfg.env.horizon_slots))
    return builder


def _battery_bundle(cfg: RunConfig) -> dict:
    return {"soh_params": cfg.battery.soh_params(), "cell": cfg.battery.cell(),
            "initial_soh": cfg.battery.initial_soh,
            "initial_efc": cfg.battery.initial_efc}


def cmd_gen_profiles(args) -> int:
    cfg = _config_from_args(args)
    seeds = _seed_streams(cfg)
    profiles = synthetic_profiles(cfg.profiles, seeds["profiles"])
    out = args.out or os.path.join(cfg.out, "profiles.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    write_profiles_csv(profiles, out)
    print(f"wrote {out} ({len(profiles)} hourly slots)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = _prepare_out(cfg, args.out)
    seeds = _seed_streams(cfg)
    profiles = _build_profiles(cfg, seeds)
    sessions = _build_fleet(cfg, seeds)
    env = MicrogridEnv(profiles, sessions, cfg.env, cfg.reward)
    result = train(env, cfg.ppo, seeds["train"], checkpoint_dir=out)
    curve_path = os.path.join(out, "curve.csv")
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "reward", "f1", "f2", "f3", "sigma2"])
        for row in result["curve"]:
            writer.writerow([row.episode, f"{row.reward:.10g}", f"{row.f1:.10g}",
                             f"{row.f2:.10g}", f"{row.f3:.10g}", f"{row.sigma2:.10g}"])
    export_fleet_table(sessions, os.path.join(out, "fleet.csv"))
    print(f"trained {len(result['curve'])} episodes; best reward "
          f"{result['best_reward']:.4f}; checkpoint in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    out = _prepare_out(cfg, args.out)
    seeds = _seed_streams(cfg)
    profiles = _build_profiles(cfg, seeds)
    sessions = _build_fleet(cfg, seeds)
    policy, label, agent = _policy_and_label(args, cfg, sessions, profiles)

    rng = np.random.default_rng(seeds["alloc"])
    day = run_day(profiles, sessions, policy, cfg.env, cfg.reward,
                  cfg.allocation, rng=rng)
    builder = _year_builder(cfg, baseline=getattr(args, "baseline", None),
                            agent=agent)
    year = simulate_year(builder, profiles, cfg.seed,
                         cfg.env, cfg.reward, fleet_size=cfg.fleet.n_evs,
                         days=args.days,
                         fleet_kwargs={"spec": cfg.fleet.spec(),
                                       "dists": cfg.fleet.distributions(
                                           cfg.battery.initial_soh,
                                           cfg.battery.initial_efc)},
                         battery_config=_battery_bundle(cfg))
    indices = evaluation_indices(day, year.soh_series, len(sessions),
                                 cfg.fleet.capacity_kwh, cfg.battery.cost_params())

    horizon = cfg.env.horizon()
    _write_schedule_csv(os.path.join(out, "schedule.csv"), horizon, day.schedule)
    with open(os.path.join(out, "load.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "hour", "baseload_kw", "load_kw"])
        for j in range(horizon.n_slots):
            h = horizon.slot_hour(j)
            writer.writerow([j, h, f"{profiles.at(h)[0]:.10g}",
                             f"{day.load_series[j]:.10g}"])
    write_allocation_trace(day.dispatch, os.path.join(out, "allocation_trace.csv"))
    export_fleet_table(sessions, os.path.join(out, "fleet.csv"))
    with open(os.path.join(out, "indices.json"), "w") as fh:
        payload = {"strategy": label, **indices.as_dict(),
                   "projected_slots": day.projected_slots,
                   "shortfall_kwh": day.shortfall_kwh}
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{label}: LV={indices.load_variance:.1f} kW^2, "
          f"cost=${indices.total_cost:.1f}, SOH_end={indices.soh_year_end:.4f}")
    return EXIT_OK


def cmd_allocate(args) -> int:
    cfg = _config_from_args(args)
    out = _prepare_out(cfg, args.out)
    seeds = _seed_streams(cfg)
    profiles = _build_profiles(cfg, seeds)
    sessions = _build_fleet(cfg, seeds)
    horizon = cfg.env.horizon()
    schedule = _read_schedule_csv(args.schedule, horizon)

    rng = np.random.default_rng(seeds["alloc"])
    day = run_day(profiles, sessions, schedule_policy(schedule), cfg.env,
                  cfg.reward, cfg.allocation, rng=rng)
    dispatch = day.dispatch
    write_allocation_trace(dispatch, os.path.join(out, "allocation_trace.csv"))

    planned = np.stack([p for p in dispatch.power_log], axis=1)
    executed = planned
    if args.early_departure:
        ev_id, slot = (int(x) for x in args.early_departure.split(":"))
        idx = next(i for i, s in enumerate(sessions) if s.ev_id == ev_id)
        executed = inject_early_departure(planned, idx, slot)

    tariffs = np.array([profiles.at(horizon.slot_hour(j))[3]
                        for j in range(horizon.n_slots)])
    soc = dispatch.soc_matrix()
    soh_costs = []
    cell = cfg.battery.cell()
    cost_params = cfg.battery.cost_params()
    soh_params = cfg.battery.soh_params()
    for i, s in enumerate(sessions):
        pack_after = apply_daily_trace(s.pack, soc[i], horizon.dt_h,
                                       cell.rated_capacity_ah, soh_params)
        soh_costs.append(
            degradation_cost(pack_after.soh / 100.0, s.spec.capacity_kwh,
                             cost_params)
            - degradation_cost(s.pack.soh / 100.0, s.spec.capacity_kwh,
                               cost_params))
    entries = settle_rewards(sessions, planned, executed, tariffs, soh_costs,
                             horizon.dt_h, cfg.allocation)
    with open(os.path.join(out, "ledger.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ev_id", "charging_cost", "degradation_cost",
                         "deviation_penalty", "total"])
        for e in entries:
            writer.writerow([e.ev_id, f"{e.charging_cost:.10g}",
                             f"{e.degradation_cost:.10g}",
                             f"{e.deviation_penalty:.10g}", f"{e.total:.10g}"])
    accepted = sum(1 for p in dispatch.proposals if p.accepted)
    print(f"allocated {len(dispatch.proposals)} slots "
          f"({accepted} accepted); trace + ledger in {out}")
    return EXIT_OK


def cmd_simulate_year(args) -> int:
    cfg = _config_from_args(args)
    out = _prepare_out(cfg, args.out)
    seeds = _seed_streams(cfg)
    profiles = _build_profiles(cfg, seeds)
    agent = None
    if getattr(args, "checkpoint", None):
        if not os.path.exists(args.checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        agent, _, _ = load_checkpoint(args.checkpoint)
    builder = _year_builder(cfg, baseline=getattr(args, "baseline", None),
                            agent=agent)
    year = simulate_year(builder, profiles, cfg.seed,
                         cfg.env, cfg.reward, fleet_size=cfg.fleet.n_evs,
                         days=args.days,
                         fleet_kwargs={"spec": cfg.fleet.spec(),
                                       "dists": cfg.fleet.distributions(
                                           cfg.battery.initial_soh,
                                           cfg.battery.initial_efc)},
                         battery_config=_battery_bundle(cfg))
    path = os.path.join(out, "soh_year.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "soh"])
        for d, soh in enumerate(year.soh_series):
            writer.writerow([d, f"{soh:.10g}"])
    print(f"simulated {year.days} days; SOH {year.soh_series[0]:.4f} -> "
          f"{year.soh_series[-1]:.4f}; wrote {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _config_from_args(args)
    out = _prepare_out(cfg, args.out)
    seeds = _seed_streams(cfg)
    profiles = _build_profiles(cfg, seeds)
    horizon = cfg.env.horizon()

    agent = None
    primary = "zero"
    if getattr(args, "checkpoint", None):
        if not os.path.exists(args.checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        agent, _, _ = load_checkpoint(args.checkpoint)
        primary = "mhvcs"

    strategy_list = [primary] + list(BASELINE_IDS)
    strategies = {}
    fleet_kwargs = {"spec": cfg.fleet.spec(),
                    "dists": cfg.fleet.distributions(cfg.battery.initial_soh,
                                                     cfg.battery.initial_efc)}
    for name in strategy_list:
        baseline = name if name in BASELINE_IDS else None
        builder = _year_builder(cfg, baseline=baseline,
                                agent=agent if baseline is None else None)
        year = simulate_year(builder, profiles, cfg.seed,
                             cfg.env, cfg.reward, fleet_size=cfg.fleet.n_evs,
                             days=args.days, fleet_kwargs=fleet_kwargs,
                             battery_config=_battery_bundle(cfg))
        indices = evaluation_indices(year.first_day, year.soh_series,
                                     cfg.fleet.n_evs, cfg.fleet.capacity_kwh,
                                     cfg.battery.cost_params())
        strategies[name] = StrategyReport(name=name, day=year.first_day,
                                          soh_series=year.soh_series,
                                          indices=indices)
    paths = emit_reports(out, profiles, horizon, strategies, primary=primary,
                         cell=cfg.battery.cell(), topology=cfg.battery.topology())
    print(f"report bundle ({len(paths)} files) in {os.path.join(out, 'report')}")
    return EXIT_OK


def _config_from_args(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out"] = args.out
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    if getattr(args, "episodes", None) is not None:
        overrides["ppo.episodes"] = args.episodes
    if getattr(args, "fleet_size", None) is not None:
        overrides["fleet.n_evs"] = args.fleet_size
    if getattr(args, "sign_mode", None):
        overrides["reward.sign_mode"] = args.sign_mode
    path = config_path_from_env(getattr(args, "config", None))
    return load_config(path, overrides)


def _add_common(parser):
    parser.add_argument("--config", help="TOML config path (falls back to "
                                         "$V2G_SIM_CONFIG)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--fleet-size", dest="fleet_size", type=int)
    parser.add_argument("--sign-mode", dest="sign_mode",
                        choices=["paper_literal", "corrected"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="v2gsim",
                                     description="Hierarchical V2G fleet "
                                                 "coordination simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-profiles", help="write a synthetic profile CSV")
    _add_common(p)
    p.set_defaults(func=cmd_gen_profiles)

    p = sub.add_parser("train", help="train the dispatch agent")
    _add_common(p)
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run one scheduling day + indices")
    _add_common(p)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--baseline", choices=BASELINE_IDS)
    group.add_argument("--checkpoint")
    p.add_argument("--days", type=int, default=365,
                   help="days for the SOH index (default 365)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("allocate", help="disaggregate a schedule CSV")
    _add_common(p)
    p.add_argument("--schedule", required=True)
    p.add_argument("--early-departure", dest="early_departure",
                   help="EV_ID:SLOT early unplug injection")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("simulate-year", help="SOH trajectory over repeated days")
    _add_common(p)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--baseline", choices=BASELINE_IDS)
    group.add_argument("--checkpoint")
    p.add_argument("--days", type=int, default=365)
    p.set_defaults(func=cmd_simulate_year)

    p = sub.add_parser("report", help="full strategy comparison bundle")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--days", type=int, default=365)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (InfeasibleSessionError, BaselineInfeasibleError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
