"""Battery conditioning models: cycle-fade SOH, equivalent-full-cycle
accounting, peak-power (SOP) limits and degradation cost.

All SOC quantities are fractions in [0, 1]; SOH is a percent in (0, 100];
DOD is a percent in (0, 100]; currents are per-cell amperes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace


class BatteryModelError(ValueError):
    """Raised on out-of-domain inputs or inconsistent cell parameters."""


# Piecewise-linear OCV table typical of a 3.3 V LFP cell, 11 knots.
DEFAULT_OCV_TABLE = (
    (0.0, 2.80),
    (0.1, 3.05),
    (0.2, 3.17),
    (0.3, 3.23),
    (0.4, 3.27),
    (0.5, 3.30),
    (0.6, 3.33),
    (0.7, 3.36),
    (0.8, 3.40),
    (0.9, 3.45),
    (1.0, 3.60),
)


@dataclass(frozen=True)
class CellSpec:
    """Electrical parameters of a single cell."""

    nominal_voltage: float = 3.3
    rated_capacity_ah: float = 2.3
    internal_resistance: float = 0.01
    ocv_curve: tuple = DEFAULT_OCV_TABLE
    terminal_voltage_min: float = 2.8
    terminal_voltage_max: float = 3.65
    design_current_charge: float = 2.3
    design_current_discharge: float = 4.6

    def __post_init__(self):
        if not (self.terminal_voltage_min < self.nominal_voltage < self.terminal_voltage_max):
            raise BatteryModelError("terminal voltage bounds must bracket the nominal voltage")
        if self.internal_resistance <= 0:
            raise BatteryModelError("internal resistance must be positive")
        if self.design_current_charge <= 0 or self.design_current_discharge <= 0:
            raise BatteryModelError("design currents must be positive")
        socs = [s for s, _ in self.ocv_curve]
        volts = [v for _, v in self.ocv_curve]
        if socs != sorted(socs) or len(set(socs)) != len(socs):
            raise BatteryModelError("OCV table SOC knots must be strictly increasing")
        if any(b <= a for a, b in zip(volts, volts[1:])):
            raise BatteryModelError("OCV table must be strictly increasing in SOC")

    def ocv(self, soc: float) -> float:
        """Open-circuit voltage by linear interpolation of the knot table."""
        knots = self.ocv_curve
        if soc <= knots[0][0]:
            return knots[0][1]
        if soc >= knots[-1][0]:
            return knots[-1][1]
        for (s0, v0), (s1, v1) in zip(knots, knots[1:]):
            if soc <= s1:
                return v0 + (v1 - v0) * (soc - s0) / (s1 - s0)
        return knots[-1][1]

    def ocv_slope(self, soc: float) -> float:
        """dU_oc/dSOC, the finite-difference slope of the knot interval containing soc."""
        knots = self.ocv_curve
        for (s0, v0), (s1, v1) in zip(knots, knots[1:]):
            if soc <= s1:
                return (v1 - v0) / (s1 - s0)
        s0, v0 = knots[-2]
        s1, v1 = knots[-1]
        return (v1 - v0) / (s1 - s0)


@dataclass(frozen=True)
class PackTopology:
    """Series/parallel arrangement of cells in one EV pack."""

    cells_in_series: int = 39
    parallel_branches: int = 4

    def __post_init__(self):
        if self.cells_in_series < 1 or self.parallel_branches < 1:
            raise BatteryModelError("pack topology counts must be >= 1")


@dataclass(frozen=True)
class SohModelParams:
    """Cycle-life power-law constants and the equivalent-full-cycle constant."""

    cycle_constant: float = 3000.0       # H
    dod_exponent: float = 0.5            # kappa
    discharge_current_exponent: float = 0.2  # gamma_1
    charge_current_exponent: float = 0.2     # gamma_2
    efc_constant: float = 1500.0         # M1

    def __post_init__(self):
        if self.cycle_constant <= 0 or self.efc_constant <= 0:
            raise BatteryModelError("cycle constants must be positive")
        for e in (self.dod_exponent, self.discharge_current_exponent,
                  self.charge_current_exponent):
            if not math.isfinite(e):
                raise BatteryModelError("exponents must be finite")


@dataclass(frozen=True)
class DegradationCostParams:
    unit_battery_cost: float = 300.0   # $/kWh
    labor_cost: float = 240.0          # $
    soh_min: float = 0.80              # scrap threshold, fraction

    def __post_init__(self):
        if not 0.0 < self.soh_min < 1.0:
            raise BatteryModelError("soh_min must be inside (0, 1)")
        if self.unit_battery_cost < 0 or self.labor_cost < 0:
            raise BatteryModelError("costs must be non-negative")


@dataclass(frozen=True)
class CycleRecord:
    """Summary of one charge/discharge excursion."""

    soc_ave: float
    delta_soc: float
    dod: float          # percent
    i_dis_ave: float    # amperes, per cell
    i_ch_ave: float     # amperes, per cell


@dataclass
class BatteryPackState:
    """Electro-aging state of one EV pack."""

    soc: float
    soh: float = 100.0                 # percent
    efc: float = 0.0                   # equivalent full cycles, real-valued
    aging_factor: float = 0.0          # epsilon; 0 means "not yet initialized"
    cycle_log: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.soc <= 1.0:
            raise BatteryModelError(f"soc {self.soc} outside [0, 1]")
        if not 0.0 < self.soh <= 100.0:
            raise BatteryModelError(f"soh {self.soh} outside (0, 100]")
        if self.efc < 0:
            raise BatteryModelError("efc must be non-negative")


def soh_capacity_fade(soc_ave: float, delta_soc: float, efc: float) -> float:
    """Closed-form capacity retention (percent) after `efc` equivalent full
    cycles spent around soc_ave with swing delta_soc.

    SOH = 100 - 3.25*SOC_ave*(1 + 3.25*dSOC - 2.25*dSOC^2)*(efc/100)^0.453
    """
    if not 0.0 <= soc_ave <= 1.0:
        raise BatteryModelError(f"soc_ave {soc_ave} outside [0, 1]")
    if not 0.0 <= delta_soc <= 1.0:
        raise BatteryModelError(f"delta_soc {delta_soc} outside [0, 1]")
    if efc < 0:
        raise BatteryModelError("efc must be non-negative")
    swing = 1.0 + 3.25 * delta_soc - 2.25 * delta_soc * delta_soc
    return 100.0 - 3.25 * soc_ave * swing * (efc / 100.0) ** 0.453


def max_cycle_number(dod: float, i_dis_ave: float, i_ch_ave: float,
                     params: SohModelParams) -> float:
    """Cycle life M for a cycle of the given depth and average currents.

    M = H * (DOD/100)^-kappa * I_dis^-gamma1 * I_ch^-gamma2
    """
    if not 0.0 < dod <= 100.0:
        raise BatteryModelError(f"dod {dod} outside (0, 100]")
    if i_dis_ave <= 0 or i_ch_ave <= 0:
        raise BatteryModelError("average currents must be positive")
    return (params.cycle_constant
            * (dod / 100.0) ** (-params.dod_exponent)
            * i_dis_ave ** (-params.discharge_current_exponent)
            * i_ch_ave ** (-params.charge_current_exponent))


# The three-point DOD correction is a pure integrator and diverges under
# sustained alternating shallow/deep cycling; the aging factor is kept
# within this multiple of the fresh per-cycle base rate 1/M.
AGING_FACTOR_HEADROOM = 2.0


def update_cycle_count(state: BatteryPackState, completed_cycle: CycleRecord,
                       params: SohModelParams) -> BatteryPackState:
    """Fold one completed cycle into the pack state.

    efc advances by epsilon*M1; epsilon picks up the three-point DOD
    correction once two prior cycles exist. The first cycle initializes
    epsilon to 1/M(that cycle) so the first increment is worth M1/M
    equivalent full cycles. A zero-depth previous cycle skips the
    correction, and epsilon is clamped into [0, HEADROOM/M(this cycle)]
    so the correction modulates rather than integrates without bound.

    SOH takes the closed-form fade *increment* of this cycle at the
    current cycle count (the absolute level stays anchored at the
    configured initial SOH; the closed form supplies marginal fade).
    """
    m_cur = max_cycle_number(completed_cycle.dod, completed_cycle.i_dis_ave,
                             completed_cycle.i_ch_ave, params)
    eps = state.aging_factor if state.cycle_log else 1.0 / m_cur
    efc = state.efc + eps * params.efc_constant

    log = list(state.cycle_log) + [completed_cycle]
    if len(log) >= 3:
        prev, prev2 = log[-2], log[-3]
        if prev.dod > 0.0:
            m_prev = max_cycle_number(prev.dod, prev.i_dis_ave, prev.i_ch_ave, params)
            eps = eps + 0.5 / m_prev * (2.0 - (prev2.dod + completed_cycle.dod) / prev.dod)
    eps = min(max(eps, 0.0), AGING_FACTOR_HEADROOM / m_cur)

    fade = (soh_capacity_fade(completed_cycle.soc_ave,
                              completed_cycle.delta_soc, state.efc)
            - soh_capacity_fade(completed_cycle.soc_ave,
                                completed_cycle.delta_soc, efc))
    new_soh = state.soh - max(fade, 0.0)
    return BatteryPackState(soc=state.soc, soh=new_soh, efc=efc,
                            aging_factor=eps, cycle_log=log)


def soc_limited_current(soc: float, soc_bounds: tuple, capacity_ah: float,
                        horizon_h: float) -> tuple:
    """(i_ch_max, i_dis_max) that keep SOC inside bounds over the horizon.

    I_dis = Q*(SOC - SOC_min)/(n*Ts), I_ch = Q*(SOC_max - SOC)/(n*Ts).
    """
    soc_min, soc_max = soc_bounds
    if horizon_h <= 0:
        raise BatteryModelError("horizon must be positive")
    if not soc_min <= soc <= soc_max:
        raise BatteryModelError(f"soc {soc} outside bounds ({soc_min}, {soc_max})")
    i_dis = capacity_ah * (soc - soc_min) / horizon_h
    i_ch = capacity_ah * (soc_max - soc) / horizon_h
    return i_ch, i_dis


def voltage_limited_current(soc: float, spec: CellSpec, capacity_ah: float,
                            horizon_h: float) -> tuple:
    """(i_ch_max, i_dis_max) that keep the terminal voltage inside design
    limits over the horizon, using the table slope of the OCV curve.

    I = (U_oc(SOC) - U_T_bound) / (R0 + (n*Ts/Q) * dU_oc/dSOC); the charge
    branch takes the absolute value (its numerator is negative).
    """
    u_oc = spec.ocv(soc)
    denom = spec.internal_resistance + (horizon_h / capacity_ah) * spec.ocv_slope(soc)
    if denom <= 0:
        raise BatteryModelError("non-positive SOP denominator: OCV slope "
                                "inconsistent with R0")
    i_dis = (u_oc - spec.terminal_voltage_min) / denom
    i_ch = abs(u_oc - spec.terminal_voltage_max) / denom
    return max(i_ch, 0.0), max(i_dis, 0.0)


def limiting_currents(soc: float, spec: CellSpec, soc_bounds: tuple,
                      capacity_ah: float, horizon_h: float) -> tuple:
    """Per-branch (i_ch, i_dis): min over SOC, voltage and design limits."""
    soc_ch, soc_dis = soc_limited_current(soc, soc_bounds, capacity_ah, horizon_h)
    v_ch, v_dis = voltage_limited_current(soc, spec, capacity_ah, horizon_h)
    i_ch = min(soc_ch, v_ch, spec.design_current_charge)
    i_dis = min(soc_dis, v_dis, spec.design_current_discharge)
    return i_ch, i_dis


def peak_power(soc: float, spec: CellSpec, topology: PackTopology,
               state: BatteryPackState, horizon_h: float,
               soc_bounds: tuple = (0.0, 1.0)) -> tuple:
    """(p_ch_max, p_dis_max) in kW for the whole pack.

    Branch capacity is SOH-derated (Q_i = Q*SOH); the limiting branch
    current is the min of the three constraint currents; terminal voltage
    is the ohmic estimate clipped to the design window.
    """
    q_eff = spec.rated_capacity_ah * state.soh / 100.0
    i_ch, i_dis = limiting_currents(soc, spec, soc_bounds, q_eff, horizon_h)
    u_oc = spec.ocv(soc)
    u_ch = min(max(u_oc + spec.internal_resistance * i_ch,
                   spec.terminal_voltage_min), spec.terminal_voltage_max)
    u_dis = min(max(u_oc - spec.internal_resistance * i_dis,
                    spec.terminal_voltage_min), spec.terminal_voltage_max)
    scale = topology.cells_in_series * topology.parallel_branches / 1000.0
    return u_ch * i_ch * scale, u_dis * i_dis * scale


def degradation_cost(soh: float, capacity_kwh: float,
                     params: DegradationCostParams) -> float:
    """Replacement-cost share of the capacity already lost.

    C_bat = (c_bat + c_l/(1 - SOH_min)) * (1 - SOH) * Q, SOH as a fraction.
    """
    if not 0.0 < soh <= 1.0:
        raise BatteryModelError(f"soh fraction {soh} outside (0, 1]")
    if capacity_kwh <= 0:
        raise BatteryModelError("capacity must be positive")
    rate = params.unit_battery_cost + params.labor_cost / (1.0 - params.soh_min)
    return rate * (1.0 - soh) * capacity_kwh


def segment_cycles(soc_trace, dt_h: float, capacity_ah: float,
                   min_swing: float = 1e-9) -> list:
    """Split a SOC trace into charge/discharge excursions.

    Turning points partition the trace into monotone segments; adjacent
    opposite segments pair into one cycle, a trailing unpaired segment
    counts as a half cycle. Swings below min_swing are ignored. Average
    per-side currents come from the SOC rate: I = |dSOC/dt| * Q_ah.
    """
    soc = list(soc_trace)
    if len(soc) < 2:
        return []

    # Monotone segments as (start, end) index pairs, flat samples merged.
    segments = []
    start = 0
    direction = 0
    for j in range(1, len(soc)):
        step = soc[j] - soc[j - 1]
        d = 0 if abs(step) < min_swing else (1 if step > 0 else -1)
        if d == 0:
            continue
        if direction == 0:
            direction = d
        elif d != direction:
            segments.append((start, j - 1, direction))
            start, direction = j - 1, d
    if direction != 0:
        segments.append((start, len(soc) - 1, direction))

    def side_current(a, b):
        swing = abs(soc[b] - soc[a])
        hours = (b - a) * dt_h
        return swing * capacity_ah / hours if hours > 0 else 0.0

    cycles = []
    i = 0
    while i < len(segments):
        a0, b0, d0 = segments[i]
        if i + 1 < len(segments):
            a1, b1, _ = segments[i + 1]
            lo = min(soc[a0], soc[b0], soc[a1], soc[b1])
            hi = max(soc[a0], soc[b0], soc[a1], soc[b1])
            ch = side_current(a0, b0) if d0 > 0 else side_current(a1, b1)
            dis = side_current(a0, b0) if d0 < 0 else side_current(a1, b1)
            i += 2
        else:
            lo, hi = sorted((soc[a0], soc[b0]))
            ch = side_current(a0, b0) if d0 > 0 else 0.0
            dis = side_current(a0, b0) if d0 < 0 else 0.0
            i += 1
        if hi - lo < min_swing:
            continue
        # One-sided excursions reuse the present side's current for both.
        if ch <= 0.0:
            ch = dis
        if dis <= 0.0:
            dis = ch
        cycles.append(CycleRecord(soc_ave=0.5 * (hi + lo), delta_soc=hi - lo,
                                  dod=(hi - lo) * 100.0,
                                  i_dis_ave=dis, i_ch_ave=ch))
    return cycles


def apply_daily_trace(state: BatteryPackState, soc_trace, dt_h: float,
                      capacity_ah: float, params: SohModelParams) -> BatteryPackState:
    """Run one day's SOC trace through segmentation and the EFC/SOH update."""
    new_state = state
    for cyc in segment_cycles(soc_trace, dt_h, capacity_ah):
        new_state = update_cycle_count(new_state, cyc, params)
    if soc_trace is not None and len(soc_trace) > 0:
        new_state = replace(new_state, soc=float(soc_trace[-1]))
    return new_state
