"""Independent oracles for the test suite.

The LP feasibility oracle re-states the per-EV physics directly (SOC box,
power box, departure band, connectivity) and asks scipy's HiGHS whether a
given aggregate energy trajectory can be disaggregated. It shares no code
with the envelope arithmetic it checks.
"""

import numpy as np
from scipy.optimize import linprog


def lp_disaggregate(sessions, horizon, energy_trajectory, require_band=True):
    """True iff some per-EV power matrix realizes the aggregate trajectory.

    Constraints, straight from the session physics:
      p[n,j] in [p_dis, p_ch] while plugged in, 0 otherwise
      floor*Q <= e_n(j) <= ceil*Q at every owned boundary
      band at the departure boundary (optional)
      sum_n eta_n * p[n,j] * dt = E[j+1] - E[j]
    """
    e = np.asarray(energy_trajectory, dtype=float)
    n = len(sessions)
    k = horizon.n_slots
    dt = horizon.dt_h
    if abs(e[0] - sum(s.energy_initial for s in sessions)) > 1e-6:
        return False

    n_var = n * k

    def var(i, j):
        return i * k + j

    bounds = []
    for i, s in enumerate(sessions):
        arr = horizon.arrival_index(s.arrival_hour)
        dep = horizon.departure_index(s.departure_hour)
        for j in range(k):
            if arr <= j < dep:
                bounds.append((s.spec.p_discharge_max_kw, s.spec.p_charge_max_kw))
            else:
                bounds.append((0.0, 0.0))

    a_ub, b_ub = [], []
    for i, s in enumerate(sessions):
        arr = horizon.arrival_index(s.arrival_hour)
        dep = horizon.departure_index(s.departure_hour)
        q = s.spec.capacity_kwh
        eta = s.spec.efficiency
        e0 = s.energy_initial
        for j in range(arr + 1, dep + 1):
            row = np.zeros(n_var)
            for jj in range(arr, j):
                row[var(i, jj)] = eta * dt
            lo, hi = s.spec.soc_floor * q, s.spec.soc_ceiling * q
            if require_band and j == dep:
                lo = max(lo, s.spec.departure_band[0] * q)
                hi = min(hi, s.spec.departure_band[1] * q)
            a_ub.append(row.copy())
            b_ub.append(hi - e0)
            a_ub.append(-row)
            b_ub.append(e0 - lo)

    a_eq, b_eq = [], []
    for j in range(k):
        row = np.zeros(n_var)
        for i, s in enumerate(sessions):
            row[var(i, j)] = s.spec.efficiency * dt
        a_eq.append(row)
        b_eq.append(e[j + 1] - e[j])

    res = linprog(np.zeros(n_var), A_ub=np.array(a_ub), b_ub=np.array(b_ub),
                  A_eq=np.array(a_eq), b_eq=np.array(b_eq), bounds=bounds,
                  method="highs")
    return res.status == 0


def random_feasible_trajectory(sessions, horizon, rng):
    """Aggregate trajectory built from random per-EV feasible schedules
    (uniform draw inside each EV's admissible per-slot window)."""
    from v2gsim.fleet import per_ev_bound_arrays

    k = horizon.n_slots
    dt = horizon.dt_h
    total = np.zeros(k + 1)
    for s in sessions:
        lo, hi = per_ev_bound_arrays(s, horizon)
        arr = horizon.arrival_index(s.arrival_hour)
        dep = horizon.departure_index(s.departure_hour)
        e = s.energy_initial
        eta = s.spec.efficiency
        traj = np.full(k + 1, e)
        for j in range(k):
            if arr <= j < dep:
                p_lo = max(s.spec.p_discharge_max_kw, (lo[j + 1] - e) / (eta * dt))
                p_hi = min(s.spec.p_charge_max_kw, (hi[j + 1] - e) / (eta * dt))
                p = rng.uniform(min(p_lo, p_hi), max(p_lo, p_hi))
                e = e + eta * p * dt
            traj[j + 1] = e
        total += traj
    return total


def grid_search_schedule(session, horizon, profiles, config, objective,
                         n_levels=13):
    """Exhaustive 1-EV schedule search over a power grid; returns the best
    objective value. Only the connected slots are enumerated."""
    import itertools

    s = session
    arr = horizon.arrival_index(s.arrival_hour)
    dep = horizon.departure_index(s.departure_hour)
    levels = np.linspace(s.spec.p_discharge_max_kw, s.spec.p_charge_max_kw,
                         n_levels)
    k = horizon.n_slots
    dt = horizon.dt_h
    eta = s.spec.efficiency
    q = s.spec.capacity_kwh
    best = None
    for combo in itertools.product(levels, repeat=dep - arr):
        e = s.energy_initial
        ok = True
        for p in combo:
            e += eta * p * dt
            if e < s.spec.soc_floor * q - 1e-9 or e > s.spec.soc_ceiling * q + 1e-9:
                ok = False
                break
        if not ok:
            continue
        if not (s.spec.departure_band[0] * q - 1e-9 <= e
                <= s.spec.departure_band[1] * q + 1e-9):
            continue
        schedule = np.zeros(k)
        schedule[arr:dep] = combo
        value = objective(schedule)
        if best is None or value < best:
            best = value
    return best
