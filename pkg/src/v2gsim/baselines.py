"""Deterministic dispatch baselines over the same envelope and profiles.

BL1 uncontrolled max-power charging, BL2 variance-minimal charge-only
(valley filling), BL3 variance-minimal signed dispatch, BL4 cost-minimal
signed dispatch (TOU arbitrage). BL2-4 are solved exactly as convex
programs whose feasible sets are nested (charge-only ⊂ signed), and each
one also scores its predecessors' schedules, so the dominance chain
LV(BL3) <= LV(BL2) <= LV(BL1) and Cost(BL4) <= all holds by construction
whenever the predecessor schedule is feasible.
"""

from __future__ import annotations

from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .env import EnvConfig, GridProfiles
from .fleet import AggregateEnvelope, Horizon, _fleet_rate_eta, aggregate_envelope

BASELINE_IDS = ("bl1", "bl2", "bl3", "bl4")
_SOLVER = dict(solver=cp.CLARABEL)
_FEAS_TOL = 1e-5


class BaselineError(ValueError):
    pass


class BaselineInfeasibleError(BaselineError):
    """Required energy cannot be delivered under the constraint set."""


@dataclass(frozen=True)
class BaselinePolicy:
    policy_id: str

    def __post_init__(self):
        if self.policy_id not in BASELINE_IDS:
            raise BaselineError(f"unknown baseline {self.policy_id!r}")


def bl1_uncontrolled(sessions, horizon: Horizon = Horizon()) -> np.ndarray:
    """Every plugged-in EV charges at max power until its upper energy
    bound; never discharges. Returns the aggregate kW schedule."""
    envelope = aggregate_envelope(sessions, horizon)
    k = horizon.n_slots
    schedule = np.zeros(k)
    for i, s in enumerate(sessions):
        arr = horizon.arrival_index(s.arrival_hour)
        dep = horizon.departure_index(s.departure_hour)
        e = s.energy_initial
        eta, dt = s.spec.efficiency, horizon.dt_h
        for j in range(arr, dep):
            room = max(0.0, float(envelope.e_hi[i, j + 1]) - e)
            p = min(s.spec.p_charge_max_kw, room / (eta * dt))
            schedule[j] += p
            e += eta * p * dt
    return schedule


def _grid_power_limits(profiles: GridProfiles, config: EnvConfig) -> tuple:
    horizon = config.horizon()
    net = np.array([profiles.net_base_at(horizon.slot_hour(j))
                    for j in range(horizon.n_slots)])
    return config.tie_line_min_kw - net, config.grid_cap_kw - net


def _pairwise_matrix(envelope: AggregateEnvelope) -> tuple:
    """Indicator matrix A with A[r] summing slots [k2, k1), plus the
    matching (lower, upper) cumulative battery-energy bounds."""
    k = envelope.horizon.n_slots
    rows, lo, hi = [], [], []
    for k1 in range(1, k + 1):
        for k2 in range(k1):
            row = np.zeros(k)
            row[k2:k1] = 1.0
            rows.append(row)
            lo.append(envelope.pair_lower[k2, k1])
            hi.append(envelope.pair_upper[k2, k1])
    return np.array(rows), np.array(lo), np.array(hi)


class _SchedulePlanner:
    """Shared constraint set for the optimized baselines."""

    def __init__(self, sessions, profiles: GridProfiles, config: EnvConfig):
        self.horizon = config.horizon()
        self.envelope = aggregate_envelope(sessions, self.horizon)
        self.profiles = profiles
        self.config = config
        self.eta = _fleet_rate_eta(self.envelope)
        self.dt = self.horizon.dt_h
        self.grid_lo, self.grid_hi = _grid_power_limits(profiles, config)
        self.pair_a, self.pair_lo, self.pair_hi = _pairwise_matrix(self.envelope)
        k = self.horizon.n_slots
        self.net = np.array([profiles.net_base_at(self.horizon.slot_hour(j))
                             for j in range(k)])
        self.tariff = np.array([profiles.at(self.horizon.slot_hour(j))[3]
                                for j in range(k)])
        win = config.accounting_window
        prefix_hours = [(self.horizon.start_hour - (win - k) + i) % 24
                        for i in range(win - k)]
        self.prefix = np.array([profiles.net_base_at(h) for h in prefix_hours])

    def constraints(self, x, charge_only=False):
        cons = [x >= np.maximum(self.envelope.P_lower, self.grid_lo),
                x <= np.minimum(self.envelope.P_upper, self.grid_hi),
                self.pair_a @ x * self.eta * self.dt >= self.pair_lo,
                self.pair_a @ x * self.eta * self.dt <= self.pair_hi]
        if charge_only:
            cons.append(x >= 0)
        return cons

    def feasible(self, schedule, charge_only=False, end_energy=None) -> bool:
        x = np.asarray(schedule, dtype=float)
        if np.any(x < np.maximum(self.envelope.P_lower, self.grid_lo) - _FEAS_TOL):
            return False
        if np.any(x > np.minimum(self.envelope.P_upper, self.grid_hi) + _FEAS_TOL):
            return False
        cum = self.pair_a @ x * self.eta * self.dt
        if np.any(cum < self.pair_lo - _FEAS_TOL) or np.any(cum > self.pair_hi + _FEAS_TOL):
            return False
        if charge_only and np.any(x < -_FEAS_TOL):
            return False
        if end_energy is not None:
            if abs(x.sum() * self.eta * self.dt - end_energy) > _FEAS_TOL:
                return False
        return True

    def load_window(self, schedule) -> np.ndarray:
        """Accounting-window total-load series implied by a schedule."""
        return np.concatenate([self.prefix, self.net + np.asarray(schedule)])

    def variance(self, schedule) -> float:
        return float(self.load_window(schedule).var())

    def cost(self, schedule) -> float:
        return float(np.sum(self.tariff * np.asarray(schedule)) * self.dt)

    def _solve(self, objective, constraints) -> np.ndarray:
        prob = cp.Problem(objective, constraints)
        prob.solve(**_SOLVER)
        if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            raise BaselineInfeasibleError(f"baseline solve failed: {prob.status}")
        return np.asarray(prob.variables()[0].value, dtype=float).ravel()

    def max_end_energy(self, charge_only=True) -> float:
        x = cp.Variable(self.horizon.n_slots)
        sched = self._solve(cp.Maximize(cp.sum(x)),
                            self.constraints(x, charge_only=charge_only))
        return float(sched.sum() * self.eta * self.dt)

    def min_variance(self, charge_only=False, end_energy=None) -> np.ndarray:
        x = cp.Variable(self.horizon.n_slots)
        # Objective in MW^2: same argmin, far better numerical conditioning.
        window = cp.hstack([self.prefix, self.net + x]) / 1000.0
        n = window.shape[0]
        objective = cp.Minimize(cp.sum_squares(window - cp.sum(window) / n) / n)
        cons = self.constraints(x, charge_only=charge_only)
        if end_energy is not None:
            cons.append(cp.sum(x) * self.eta * self.dt == end_energy)
        return self._solve(objective, cons)

    def min_cost(self) -> np.ndarray:
        x = cp.Variable(self.horizon.n_slots)
        objective = cp.Minimize(cp.sum(cp.multiply(self.tariff, x)) * self.dt)
        return self._solve(objective, self.constraints(x))


def bl2_optimal_charging(sessions, profiles: GridProfiles,
                         config: EnvConfig = EnvConfig()) -> np.ndarray:
    """Charge-only valley filling: minimal load variance while delivering
    the maximum reachable end energy ("until the battery is full")."""
    planner = _SchedulePlanner(sessions, profiles, config)
    target = planner.max_end_energy(charge_only=True)
    best = planner.min_variance(charge_only=True, end_energy=target)
    bl1 = bl1_uncontrolled(sessions, planner.horizon)
    if planner.feasible(bl1, charge_only=True, end_energy=target) and \
            planner.variance(bl1) < planner.variance(best):
        best = bl1
    return best


def bl3_min_variance(sessions, profiles: GridProfiles,
                     config: EnvConfig = EnvConfig()) -> np.ndarray:
    """Signed dispatch minimizing load variance inside the envelope."""
    planner = _SchedulePlanner(sessions, profiles, config)
    best = planner.min_variance(charge_only=False)
    for candidate in (bl2_optimal_charging(sessions, profiles, config),):
        if planner.feasible(candidate) and \
                planner.variance(candidate) < planner.variance(best):
            best = candidate
    return best


def bl4_min_cost(sessions, profiles: GridProfiles,
                 config: EnvConfig = EnvConfig()) -> np.ndarray:
    """Signed dispatch minimizing TOU charging cost inside the envelope."""
    planner = _SchedulePlanner(sessions, profiles, config)
    best = planner.min_cost()
    candidates = [bl2_optimal_charging(sessions, profiles, config),
                  bl3_min_variance(sessions, profiles, config),
                  bl1_uncontrolled(sessions, planner.horizon)]
    for candidate in candidates:
        if planner.feasible(candidate) and \
                planner.cost(candidate) < planner.cost(best):
            best = candidate
    return best


def baseline_schedule(policy_id: str, sessions, profiles: GridProfiles,
                      config: EnvConfig = EnvConfig()) -> np.ndarray:
    BaselinePolicy(policy_id)
    if policy_id == "bl1":
        return bl1_uncontrolled(sessions, config.horizon())
    if policy_id == "bl2":
        return bl2_optimal_charging(sessions, profiles, config)
    if policy_id == "bl3":
        return bl3_min_variance(sessions, profiles, config)
    return bl4_min_cost(sessions, profiles, config)
