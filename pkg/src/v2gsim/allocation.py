"""Lower hierarchy level: split one EVA power target across individual EVs.

Pipeline per slot: stake-weighted validator selection, headroom/footroom
proportional proposal, per-EV safety clamp, residual redistribution and a
deterministic validation re-check (the consensus stand-in). Powers are
grid-side kW; per-EV energy advances as e' = e + eta*p*dt.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .fleet import AggregateEnvelope, Horizon, aggregate_envelope


class AllocationError(ValueError):
    pass


class AllocationInfeasibleError(AllocationError):
    """No EV can absorb/supply a nonzero target (should be unreachable
    after env projection)."""


@dataclass(frozen=True)
class AllocationParams:
    deviation_penalty_rate: float = 0.1   # $/kWh of plan deviation
    balance_tolerance: float = 1e-6       # kW


@dataclass
class StakeRecord:
    ev_id: int
    locked_energy: float        # kWh staked (current battery energy)
    battery_age: float          # equivalent full cycles
    random_tiebreak: float = 0.0

    def __post_init__(self):
        if self.locked_energy < 0:
            raise AllocationError("locked energy must be non-negative")


@dataclass
class AllocationProposal:
    slot: int
    target_kw: float
    proposed_kw: np.ndarray     # p* before clamping
    final_kw: np.ndarray        # after clamp + redistribution
    energies_before: np.ndarray
    validator: int
    shortfall_kw: float = 0.0
    accepted: bool = False

    @property
    def residual_kw(self) -> float:
        return self.target_kw - float(self.final_kw.sum())


def select_validator(stakes, rng) -> int:
    """Roulette-wheel draw with weight stake/(1 + age/max_age).

    Probability of selection is exactly proportional to the weight; an
    all-zero stake list degrades to a uniform draw.
    """
    if not stakes:
        raise AllocationError("cannot select a validator from an empty fleet")
    max_age = max(s.battery_age for s in stakes)
    weights = []
    for s in stakes:
        age_norm = s.battery_age / max_age if max_age > 0 else 0.0
        weights.append(s.locked_energy / (1.0 + age_norm))
    total = sum(weights)
    if total <= 0.0:
        weights = [1.0] * len(stakes)
        total = float(len(stakes))
    r = rng.random() * total
    acc = 0.0
    for s, w in zip(stakes, weights):
        acc += w
        if r < acc:
            return s.ev_id
    return stakes[-1].ev_id


def propose_powers(target_kw: float, energies, e_next_lo, e_next_hi,
                   connected) -> np.ndarray:
    """Headroom/footroom proportional split of the EVA target.

    Charging weight is the energy gap to the next-boundary upper bound,
    discharging weight the gap to the lower bound; full EVs get zero when
    charging and empty EVs zero when discharging.
    """
    energies = np.asarray(energies, dtype=float)
    n = len(energies)
    p_star = np.zeros(n)
    if target_kw == 0.0:
        return p_star
    if target_kw > 0:
        w = np.maximum(np.asarray(e_next_hi) - energies, 0.0)
    else:
        w = np.maximum(energies - np.asarray(e_next_lo), 0.0)
    w = np.where(np.asarray(connected, dtype=bool), w, 0.0)
    total = w.sum()
    if total <= 0.0:
        raise AllocationInfeasibleError(
            f"no headroom/footroom for target {target_kw:.3f} kW")
    p_star[:] = target_kw * w / total
    return p_star


def power_window(spec, energy: float, e_next_lo: float, e_next_hi: float,
                 dt_h: float) -> tuple:
    """Admissible power interval keeping the next-boundary energy inside
    its (departure-tightened) bounds and the rated power box."""
    eta = spec.efficiency
    lo = max(spec.p_discharge_max_kw, (e_next_lo - energy) / (eta * dt_h))
    hi = min(spec.p_charge_max_kw, (e_next_hi - energy) / (eta * dt_h))
    if lo > hi:  # float sliver when energy sits on a cone corner
        mid = 0.5 * (lo + hi)
        lo = hi = mid
    return lo, hi


def safety_clamp(p_star: float, window: tuple) -> float:
    lo, hi = window
    return min(max(p_star, lo), hi)


def redistribute_residual(target_kw: float, powers, windows,
                          tol: float = 1e-9, max_iter: int = 64) -> tuple:
    """Reallocate clamp losses proportionally among EVs with room left.

    Returns (final_powers, shortfall_kw); shortfall is the part of the
    target no EV can absorb/supply (reported, never raised).
    """
    p = np.array(powers, dtype=float)
    lo = np.array([w[0] for w in windows])
    hi = np.array([w[1] for w in windows])
    shortfall = 0.0
    for _ in range(max_iter):
        residual = target_kw - p.sum()
        if abs(residual) <= tol:
            shortfall = 0.0
            break
        room = (hi - p) if residual > 0 else (lo - p)
        total_room = room.sum()
        if abs(total_room) <= tol:
            shortfall = residual
            break
        scale = min(1.0, residual / total_room)  # same sign by construction
        p = np.clip(p + room * scale, lo, hi)
        shortfall = target_kw - p.sum()
    return p, shortfall


def validate_proposal(proposal: AllocationProposal, sessions,
                      horizon: Horizon, params: AllocationParams = AllocationParams()) -> tuple:
    """Deterministic constraint re-check standing in for consensus.

    Accepts iff every per-EV power and SOC box holds and the power balance
    closes up to the tolerance net of the declared shortfall. Idempotent.
    """
    tol = params.balance_tolerance
    violations = []
    dt = horizon.dt_h
    for i, s in enumerate(sessions):
        p = float(proposal.final_kw[i])
        if p < s.spec.p_discharge_max_kw - tol or p > s.spec.p_charge_max_kw + tol:
            violations.append(f"EV {s.ev_id}: power {p:.4f} outside "
                              f"[{s.spec.p_discharge_max_kw}, {s.spec.p_charge_max_kw}]")
        e_next = proposal.energies_before[i] + s.spec.efficiency * p * dt
        q = s.spec.capacity_kwh
        if e_next < s.spec.soc_floor * q - tol or e_next > s.spec.soc_ceiling * q + tol:
            violations.append(f"EV {s.ev_id}: next energy {e_next:.4f} outside "
                              f"SOC box [{s.spec.soc_floor * q}, {s.spec.soc_ceiling * q}]")
    balance_gap = abs(proposal.final_kw.sum() + proposal.shortfall_kw - proposal.target_kw)
    if balance_gap > tol:
        violations.append(f"power balance off by {balance_gap:.6g} kW "
                          f"(declared shortfall {proposal.shortfall_kw:.6g})")
    if abs(proposal.shortfall_kw) > tol:
        # Coherent but short of the target: reported, never accepted.
        violations.append(f"undelivered target: shortfall "
                          f"{proposal.shortfall_kw:.6g} kW")
    return len(violations) == 0, violations


class FleetDispatch:
    """Per-slot allocation state over one scheduling day."""

    def __init__(self, sessions, horizon: Horizon = Horizon(),
                 envelope: AggregateEnvelope = None,
                 params: AllocationParams = AllocationParams(), rng=None):
        self.sessions = list(sessions)
        self.horizon = horizon
        self.envelope = envelope if envelope is not None else \
            aggregate_envelope(self.sessions, horizon)
        self.params = params
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.energies = np.array([s.energy_initial for s in self.sessions])
        self.power_log = []    # list of final_kw arrays, one per slot
        self.proposals = []

    def connected(self, slot: int) -> np.ndarray:
        mask = np.zeros(len(self.sessions), dtype=bool)
        for i, s in enumerate(self.sessions):
            arr = self.horizon.arrival_index(s.arrival_hour)
            dep = self.horizon.departure_index(s.departure_hour)
            mask[i] = arr <= slot < dep
        return mask

    def stake_records(self) -> list:
        return [StakeRecord(ev_id=s.ev_id, locked_energy=float(self.energies[i]),
                            battery_age=s.pack.efc,
                            random_tiebreak=float(self.rng.random()))
                for i, s in enumerate(self.sessions)]

    def target_bounds(self, slot: int) -> tuple:
        """Exact aggregate power bounds from the per-EV windows; tighter
        than the envelope's one-step bounds because it sees actual
        energies (the envelope cannot tell departed-EV slack apart)."""
        conn = self.connected(slot)
        lo = hi = 0.0
        for i, s in enumerate(self.sessions):
            if conn[i]:
                w_lo, w_hi = power_window(s.spec, float(self.energies[i]),
                                          float(self.envelope.e_lo[i, slot + 1]),
                                          float(self.envelope.e_hi[i, slot + 1]),
                                          self.horizon.dt_h)
                lo += w_lo
                hi += w_hi
        return lo, hi

    def allocate_slot(self, target_kw: float, slot: int) -> AllocationProposal:
        conn = self.connected(slot)
        e_lo_next = self.envelope.e_lo[:, slot + 1]
        e_hi_next = self.envelope.e_hi[:, slot + 1]
        validator = select_validator(self.stake_records(), self.rng)

        if target_kw != 0.0 and conn.any():
            try:
                p_star = propose_powers(target_kw, self.energies, e_lo_next,
                                        e_hi_next, conn)
            except AllocationInfeasibleError:
                # Nobody can move toward the target; the whole target
                # becomes shortfall, reported below.
                p_star = np.zeros(len(self.sessions))
        else:
            p_star = np.zeros(len(self.sessions))

        windows = []
        for i, s in enumerate(self.sessions):
            if conn[i]:
                windows.append(power_window(s.spec, float(self.energies[i]),
                                            float(e_lo_next[i]), float(e_hi_next[i]),
                                            self.horizon.dt_h))
            else:
                windows.append((0.0, 0.0))
        clamped = np.array([safety_clamp(float(p_star[i]), windows[i])
                            for i in range(len(self.sessions))])
        final, shortfall = redistribute_residual(target_kw, clamped, windows)

        proposal = AllocationProposal(slot=slot, target_kw=target_kw,
                                      proposed_kw=p_star, final_kw=final,
                                      energies_before=self.energies.copy(),
                                      validator=validator,
                                      shortfall_kw=shortfall)
        proposal.accepted, _ = validate_proposal(proposal, self.sessions,
                                                 self.horizon, self.params)
        return proposal

    def apply(self, proposal: AllocationProposal) -> None:
        dt = self.horizon.dt_h
        eta = np.array([s.spec.efficiency for s in self.sessions])
        self.energies = self.energies + eta * proposal.final_kw * dt
        self.power_log.append(proposal.final_kw.copy())
        self.proposals.append(proposal)

    def run_schedule(self, schedule) -> list:
        """Allocate a full-horizon EVA power schedule slot by slot."""
        proposals = []
        for j, target in enumerate(schedule):
            prop = self.allocate_slot(float(target), j)
            self.apply(prop)
            proposals.append(prop)
        return proposals

    def soc_matrix(self) -> np.ndarray:
        """Per-EV SOC at every boundary reached so far, shape (N, steps+1)."""
        caps = np.array([s.spec.capacity_kwh for s in self.sessions])
        eta = np.array([s.spec.efficiency for s in self.sessions])
        e = np.array([s.energy_initial for s in self.sessions], dtype=float)
        cols = [e / caps]
        for p in self.power_log:
            e = e + eta * p * self.horizon.dt_h
            cols.append(e / caps)
        return np.stack(cols, axis=1)


@dataclass
class LedgerEntry:
    ev_id: int
    charging_cost: float
    degradation_cost: float
    deviation_penalty: float

    @property
    def total(self) -> float:
        return self.charging_cost + self.degradation_cost + self.deviation_penalty


def settle_rewards(sessions, planned_kw: np.ndarray, executed_kw: np.ndarray,
                   tariffs, soh_cost_deltas, dt_h: float = 1.0,
                   params: AllocationParams = AllocationParams()) -> list:
    """Per-EV end-of-day ledger.

    planned/executed are (N, K) power matrices; `soh_cost_deltas` is the
    per-EV degradation cost of the day (replacement-cost rate applied to
    the day's SOH drop). Deviation is billed at the configured rate per
    kWh of plan departure.
    """
    tariffs = np.asarray(tariffs, dtype=float)
    entries = []
    for i, s in enumerate(sessions):
        exec_row = np.asarray(executed_kw[i], dtype=float)
        plan_row = np.asarray(planned_kw[i], dtype=float)
        charging = float(np.sum(tariffs * exec_row) * dt_h)
        deviation = params.deviation_penalty_rate * float(
            np.sum(np.abs(exec_row - plan_row)) * dt_h)
        entries.append(LedgerEntry(ev_id=s.ev_id, charging_cost=charging,
                                   degradation_cost=float(soh_cost_deltas[i]),
                                   deviation_penalty=deviation))
    return entries


def inject_early_departure(planned_kw: np.ndarray, ev_index: int,
                           leave_slot: int) -> np.ndarray:
    """Executed-power matrix for an EV that unplugs at `leave_slot`."""
    executed = np.array(planned_kw, dtype=float)
    executed[ev_index, leave_slot:] = 0.0
    return executed


ALLOCATION_CSV_HEADER = ["slot", "ev_id", "proposed_kw", "final_kw", "soc_after"]


def write_allocation_trace(dispatch: FleetDispatch, path) -> None:
    caps = np.array([s.spec.capacity_kwh for s in dispatch.sessions])
    soc = dispatch.soc_matrix()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ALLOCATION_CSV_HEADER)
        for prop in dispatch.proposals:
            for i, s in enumerate(dispatch.sessions):
                writer.writerow([prop.slot, s.ev_id,
                                 f"{prop.proposed_kw[i]:.10g}",
                                 f"{prop.final_kw[i]:.10g}",
                                 f"{soc[i, prop.slot + 1]:.10g}"])
