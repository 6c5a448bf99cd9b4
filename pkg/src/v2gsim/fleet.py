"""EV plug-in sessions and the aggregate (EVA) flexibility envelope.

Energies are battery-side kWh and evolve as e' = e + eta*p*dt for both
signs of p (single-efficiency form), powers are grid-side kW. An EV is
available from the start of its arrival hour to the end of its departure
hour; outside that window its energy contribution is pinned (constant
e_init before arrival, frozen departure bounds after), so the aggregate
energy never jumps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .battery import BatteryPackState


class FleetError(ValueError):
    pass


class InfeasibleSessionError(FleetError):
    """Departure band unreachable for a sampled session."""


class EnvelopeProjectionError(FleetError):
    """EVA energy handed to eva_power_bounds lies outside the envelope."""

    def __init__(self, msg, violation_kwh):
        super().__init__(msg)
        self.violation_kwh = violation_kwh


@dataclass(frozen=True)
class Horizon:
    """Scheduling window: `n_slots` hourly slots starting at `start_hour`.

    Slot j covers clock hour (start_hour + j) % 24; energies live on the
    n_slots + 1 boundaries.
    """

    start_hour: int = 15
    n_slots: int = 20
    dt_h: float = 1.0

    @property
    def n_boundaries(self) -> int:
        return self.n_slots + 1

    def slot_hour(self, j: int) -> int:
        return (self.start_hour + j) % 24

    def arrival_index(self, arrival_hour: int) -> int:
        idx = (arrival_hour - self.start_hour) % 24
        if idx >= self.n_slots:
            raise FleetError(f"arrival hour {arrival_hour} outside the horizon")
        return idx

    def departure_index(self, departure_hour: int) -> int:
        # Departure at the end of the departure hour.
        idx = (departure_hour - self.start_hour) % 24 + 1
        if idx > self.n_slots:
            raise FleetError(f"departure hour {departure_hour} outside the horizon")
        return idx


@dataclass(frozen=True)
class EvSpec:
    capacity_kwh: float = 24.0
    p_charge_max_kw: float = 6.0
    p_discharge_max_kw: float = -6.0
    efficiency: float = 0.95
    soc_floor: float = 0.2
    soc_ceiling: float = 0.9
    departure_band: tuple = (0.8, 0.9)

    def __post_init__(self):
        if not self.p_discharge_max_kw < 0 < self.p_charge_max_kw:
            raise FleetError("power limits must satisfy p_dis < 0 < p_ch")
        if not 0.0 <= self.soc_floor < self.soc_ceiling <= 1.0:
            raise FleetError("SOC bounds must satisfy 0 <= floor < ceiling <= 1")
        if not 0.0 < self.efficiency <= 1.0:
            raise FleetError("efficiency must be in (0, 1]")
        lo, hi = self.departure_band
        if not self.soc_floor <= lo < hi <= self.soc_ceiling:
            raise FleetError("departure band must sit inside the SOC bounds")


@dataclass
class EvSession:
    ev_id: int
    arrival_hour: int
    departure_hour: int
    soc_initial: float
    spec: EvSpec
    pack: BatteryPackState = None

    def __post_init__(self):
        if not 0.0 <= self.soc_initial <= 1.0:
            raise FleetError(f"soc_initial {self.soc_initial} outside [0, 1]")
        if self.pack is None:
            self.pack = BatteryPackState(soc=self.soc_initial)

    @property
    def energy_initial(self) -> float:
        return self.soc_initial * self.spec.capacity_kwh


@dataclass(frozen=True)
class FleetDistributions:
    """Sampling parameters for plug-in sessions."""

    arrival_mean: float = 18.0
    arrival_std: float = 1.0
    arrival_bounds: tuple = (15, 21)
    departure_mean: float = 8.0
    departure_std: float = 1.0
    departure_bounds: tuple = (6, 10)
    soc_mean: float = 0.5
    soc_std: float = 0.1
    soc_bounds: tuple = (0.2, 0.8)
    initial_soh: float = 97.46
    initial_efc: float = 50.0


def _session_feasible(session: EvSession, horizon: Horizon) -> bool:
    try:
        per_ev_bound_arrays(session, horizon)
        return True
    except InfeasibleSessionError:
        return False


def sample_fleet(n: int, seed, dists: FleetDistributions = FleetDistributions(),
                 spec: EvSpec = EvSpec(), horizon: Horizon = Horizon(),
                 max_attempts: int = 100) -> list:
    """Draw `n` feasible sessions; bit-reproducible for a given seed."""
    if n < 1:
        raise FleetError("fleet size must be >= 1")
    rng = np.random.default_rng(seed)
    sessions = []
    for ev_id in range(n):
        for attempt in range(max_attempts):
            arrival = int(round(float(np.clip(rng.normal(dists.arrival_mean,
                                                         dists.arrival_std),
                                              *dists.arrival_bounds))))
            departure = int(round(float(np.clip(rng.normal(dists.departure_mean,
                                                           dists.departure_std),
                                                *dists.departure_bounds))))
            soc = float(np.clip(rng.normal(dists.soc_mean, dists.soc_std),
                                *dists.soc_bounds))
            session = EvSession(ev_id=ev_id, arrival_hour=arrival,
                                departure_hour=departure, soc_initial=soc,
                                spec=spec,
                                pack=BatteryPackState(soc=soc, soh=dists.initial_soh,
                                                      efc=dists.initial_efc))
            if _session_feasible(session, horizon):
                sessions.append(session)
                break
        else:
            raise InfeasibleSessionError(
                f"no feasible session for EV {ev_id} in {max_attempts} attempts")
    return sessions


def per_ev_energy_bounds(session: EvSession, k: int, horizon: Horizon = Horizon()) -> tuple:
    """(e_min, e_max) kWh reachable at boundary k for one session."""
    lo, hi = per_ev_bound_arrays(session, horizon)
    return float(lo[k]), float(hi[k])


def per_ev_bound_arrays(session: EvSession, horizon: Horizon) -> tuple:
    """Energy bound arrays (lo, hi) over all n_slots+1 boundaries.

    Inside the plug-in window the bounds are the reachability cone clipped
    to the SOC box and tightened so the departure band stays reachable;
    before arrival both equal e_init, after departure they freeze.
    """
    spec = session.spec
    arr = horizon.arrival_index(session.arrival_hour)
    dep = horizon.departure_index(session.departure_hour)
    if dep <= arr:
        raise FleetError(f"EV {session.ev_id}: departure at boundary {dep} "
                         f"not after arrival {arr}")
    q = spec.capacity_kwh
    e0 = session.soc_initial * q
    floor_e, ceil_e = spec.soc_floor * q, spec.soc_ceiling * q
    band_lo, band_hi = spec.departure_band[0] * q, spec.departure_band[1] * q
    eta, dt = spec.efficiency, horizon.dt_h
    ch_rate = eta * spec.p_charge_max_kw * dt
    dis_rate = eta * abs(spec.p_discharge_max_kw) * dt

    nb = horizon.n_boundaries
    lo = np.full(nb, e0)
    hi = np.full(nb, e0)
    for j in range(arr + 1, nb):
        jj = min(j, dep)
        lo[j] = max(floor_e, e0 - dis_rate * (jj - arr), band_lo - ch_rate * (dep - jj))
        hi[j] = min(ceil_e, e0 + ch_rate * (jj - arr), band_hi + dis_rate * (dep - jj))
    if np.any(lo > hi + 1e-12):
        raise InfeasibleSessionError(
            f"EV {session.ev_id}: departure band unreachable "
            f"(soc {session.soc_initial:.3f}, window {arr}..{dep})")
    return lo, hi


@dataclass
class AggregateEnvelope:
    """Second-order outer approximation of the fleet's feasible region."""

    horizon: Horizon
    sessions: list
    e_lo: np.ndarray       # (N, K+1) per-EV energy lower bounds, kWh
    e_hi: np.ndarray       # (N, K+1)
    p_lo: np.ndarray       # (N, K) per-EV grid-side power bounds, kW
    p_hi: np.ndarray       # (N, K)
    eta: np.ndarray        # (N,) per-EV efficiency
    E_lower: np.ndarray = field(init=False)
    E_upper: np.ndarray = field(init=False)
    P_lower: np.ndarray = field(init=False)
    P_upper: np.ndarray = field(init=False)
    pair_lower: np.ndarray = field(init=False)  # (K+1, K+1), valid for k2 < k1
    pair_upper: np.ndarray = field(init=False)

    def __post_init__(self):
        self.E_lower = self.e_lo.sum(axis=0)
        self.E_upper = self.e_hi.sum(axis=0)
        self.P_lower = self.p_lo.sum(axis=0)
        self.P_upper = self.p_hi.sum(axis=0)

        # Cumulative battery-side energy-rate sums, per EV: (N, K+1).
        dt = self.horizon.dt_h
        rate_hi = np.concatenate([np.zeros((len(self.sessions), 1)),
                                  np.cumsum(self.eta[:, None] * self.p_hi * dt, axis=1)],
                                 axis=1)
        rate_lo = np.concatenate([np.zeros((len(self.sessions), 1)),
                                  np.cumsum(self.eta[:, None] * self.p_lo * dt, axis=1)],
                                 axis=1)
        nb = self.horizon.n_boundaries
        self.pair_lower = np.full((nb, nb), -np.inf)
        self.pair_upper = np.full((nb, nb), np.inf)
        for k2 in range(nb - 1):
            # Vectorized over k1 > k2 and EVs.
            k1 = np.arange(k2 + 1, nb)
            de_hi = self.e_hi[:, k1] - self.e_lo[:, [k2]]
            de_lo = self.e_lo[:, k1] - self.e_hi[:, [k2]]
            pr_hi = rate_hi[:, k1] - rate_hi[:, [k2]]
            pr_lo = rate_lo[:, k1] - rate_lo[:, [k2]]
            self.pair_upper[k2, k1] = np.minimum(de_hi, pr_hi).sum(axis=0)
            self.pair_lower[k2, k1] = np.maximum(de_lo, pr_lo).sum(axis=0)

    @property
    def n_evs(self) -> int:
        return len(self.sessions)


def aggregate_envelope(sessions, horizon: Horizon = Horizon()) -> AggregateEnvelope:
    """Sum per-EV bounds (with connectivity masks) into the EVA envelope."""
    if not sessions:
        raise FleetError("cannot build an envelope for an empty fleet")
    n = len(sessions)
    nb = horizon.n_boundaries
    e_lo = np.zeros((n, nb))
    e_hi = np.zeros((n, nb))
    p_lo = np.zeros((n, horizon.n_slots))
    p_hi = np.zeros((n, horizon.n_slots))
    eta = np.zeros(n)
    for i, s in enumerate(sessions):
        lo, hi = per_ev_bound_arrays(s, horizon)
        e_lo[i], e_hi[i] = lo, hi
        arr = horizon.arrival_index(s.arrival_hour)
        dep = horizon.departure_index(s.departure_hour)
        p_lo[i, arr:dep] = s.spec.p_discharge_max_kw
        p_hi[i, arr:dep] = s.spec.p_charge_max_kw
        eta[i] = s.spec.efficiency
    return AggregateEnvelope(horizon=horizon, sessions=list(sessions),
                             e_lo=e_lo, e_hi=e_hi, p_lo=p_lo, p_hi=p_hi, eta=eta)


def envelope_contains(envelope: AggregateEnvelope, energy_trajectory,
                      tol: float = 1e-6) -> tuple:
    """Pairwise energy-change check over every boundary pair (k2 < k1).

    Returns (True, None) or (False, (k1, k2)) for the first violated pair.
    """
    e = np.asarray(energy_trajectory, dtype=float)
    nb = envelope.horizon.n_boundaries
    if e.shape != (nb,):
        raise FleetError(f"trajectory must cover all {nb} boundaries")
    if not (envelope.E_lower[0] - tol <= e[0] <= envelope.E_upper[0] + tol):
        return False, (0, 0)
    for k1 in range(1, nb):
        for k2 in range(k1):
            diff = e[k1] - e[k2]
            if diff < envelope.pair_lower[k2, k1] - tol or \
                    diff > envelope.pair_upper[k2, k1] + tol:
                return False, (k1, k2)
    return True, None


def eva_power_bounds(envelope: AggregateEnvelope, current_energy: float,
                     k: int, tol: float = 1e-6) -> tuple:
    """(P_min, P_max) grid-side kW admissible during slot k.

    Tightest one-step bounds: the instantaneous power sums intersected
    with the energy headroom to the k+1 boundary bounds.
    """
    if not 0 <= k < envelope.horizon.n_slots:
        raise FleetError(f"slot {k} outside horizon")
    lo_k, hi_k = envelope.E_lower[k], envelope.E_upper[k]
    if current_energy < lo_k - tol or current_energy > hi_k + tol:
        gap = max(lo_k - current_energy, current_energy - hi_k)
        raise EnvelopeProjectionError(
            f"EVA energy {current_energy:.3f} kWh outside envelope "
            f"[{lo_k:.3f}, {hi_k:.3f}] at boundary {k}", gap)

    eta_mean = _fleet_rate_eta(envelope)
    dt = envelope.horizon.dt_h
    p_max = min(envelope.P_upper[k],
                (envelope.E_upper[k + 1] - current_energy) / (eta_mean * dt))
    p_min = max(envelope.P_lower[k],
                (envelope.E_lower[k + 1] - current_energy) / (eta_mean * dt))
    if p_min > p_max:  # numerical sliver at envelope corners
        mid = 0.5 * (p_min + p_max)
        p_min = p_max = mid
    return p_min, p_max


def _fleet_rate_eta(envelope: AggregateEnvelope) -> float:
    # Fleets are homogeneous in efficiency in every spec scenario; fall
    # back to the mean if a custom fleet mixes values.
    return float(envelope.eta.mean()) if envelope.n_evs else 1.0


FLEET_CSV_HEADER = ["ev_id", "arrival_hour", "departure_hour", "soc_initial",
                    "capacity_kwh", "p_charge_max_kw", "p_discharge_max_kw"]


def export_fleet_table(sessions, path) -> None:
    """One row per session, %.10g formatting for byte-stable reruns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FLEET_CSV_HEADER)
        for s in sessions:
            writer.writerow([s.ev_id, s.arrival_hour, s.departure_hour,
                             f"{s.soc_initial:.10g}",
                             f"{s.spec.capacity_kwh:.10g}",
                             f"{s.spec.p_charge_max_kw:.10g}",
                             f"{s.spec.p_discharge_max_kw:.10g}"])


def import_fleet_table(path, spec: EvSpec = EvSpec(),
                       dists: FleetDistributions = FleetDistributions()) -> list:
    sessions = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(FLEET_CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise FleetError(f"fleet table missing columns: {sorted(missing)}")
        for row in reader:
            row_spec = replace(spec,
                               capacity_kwh=float(row["capacity_kwh"]),
                               p_charge_max_kw=float(row["p_charge_max_kw"]),
                               p_discharge_max_kw=float(row["p_discharge_max_kw"]))
            soc = float(row["soc_initial"])
            sessions.append(EvSession(
                ev_id=int(row["ev_id"]),
                arrival_hour=int(row["arrival_hour"]),
                departure_hour=int(row["departure_hour"]),
                soc_initial=soc, spec=row_spec,
                pack=BatteryPackState(soc=soc, soh=dists.initial_soh,
                                      efc=dists.initial_efc)))
    return sessions
