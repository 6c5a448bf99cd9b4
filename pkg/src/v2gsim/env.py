"""Microgrid MDP: grid profiles, the 28-dim observation, safety projection,
EVA energy dynamics and the three-part reward.

Grid powers are kW at the point of common coupling. The EVA action is
grid-side; EVA energy is battery-side and advances by eta * P * dt (see
fleet module). Profiles are a daily cycle indexed by clock hour modulo
their length.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .fleet import (Horizon, _fleet_rate_eta, aggregate_envelope,
                    eva_power_bounds)


class EnvError(ValueError):
    pass


@dataclass
class GridProfiles:
    """Hourly baseload / PV / wind / tariff series (one daily cycle)."""

    baseload_kw: np.ndarray
    pv_kw: np.ndarray
    wind_kw: np.ndarray
    tariff: np.ndarray        # $/kWh

    def __post_init__(self):
        series = [np.asarray(s, dtype=float) for s in
                  (self.baseload_kw, self.pv_kw, self.wind_kw, self.tariff)]
        self.baseload_kw, self.pv_kw, self.wind_kw, self.tariff = series
        n = len(self.baseload_kw)
        if n < 24:
            raise EnvError("profiles must cover at least 24 hourly slots")
        if any(len(s) != n for s in series):
            raise EnvError("profile series lengths differ")
        if np.any(self.tariff <= 0):
            raise EnvError("tariff must be positive")
        if np.any(self.baseload_kw < 0):
            raise EnvError("baseload must be non-negative")

    def __len__(self):
        return len(self.baseload_kw)

    def at(self, hour: int) -> tuple:
        i = hour % len(self)
        return (float(self.baseload_kw[i]), float(self.pv_kw[i]),
                float(self.wind_kw[i]), float(self.tariff[i]))

    def net_base_at(self, hour: int) -> float:
        """Non-EVA part of the power load: base - pv - wind."""
        b, pv, wt, _ = self.at(hour)
        return b - pv - wt

    def renewable_net_at(self, hour: int) -> float:
        """Non-EVA part of the net load: -pv - wind."""
        _, pv, wt, _ = self.at(hour)
        return -pv - wt


PROFILE_CSV_HEADER = ["slot", "baseload_kw", "pv_kw", "wind_kw", "tariff"]


def write_profiles_csv(profiles: GridProfiles, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROFILE_CSV_HEADER)
        for i in range(len(profiles)):
            writer.writerow([i, f"{profiles.baseload_kw[i]:.10g}",
                             f"{profiles.pv_kw[i]:.10g}",
                             f"{profiles.wind_kw[i]:.10g}",
                             f"{profiles.tariff[i]:.10g}"])


def read_profiles_csv(path) -> GridProfiles:
    cols = {name: [] for name in PROFILE_CSV_HEADER[1:]}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PROFILE_CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise EnvError(f"profile CSV missing columns: {sorted(missing)}")
        for row in reader:
            for name in cols:
                cols[name].append(float(row[name]))
    return GridProfiles(baseload_kw=np.array(cols["baseload_kw"]),
                        pv_kw=np.array(cols["pv_kw"]),
                        wind_kw=np.array(cols["wind_kw"]),
                        tariff=np.array(cols["tariff"]))


@dataclass(frozen=True)
class SyntheticProfileParams:
    baseload_min_kw: float = 1200.0
    baseload_amplitude_kw: float = 1400.0
    baseload_peak_hour: int = 19
    baseload_sharpness: float = 2.0
    pv_peak_kw: float = 600.0
    pv_center_hour: float = 12.0
    pv_width_hours: float = 2.5
    wind_mean_kw: float = 200.0
    wind_std_kw: float = 80.0
    tariff_valley: float = 0.05
    tariff_flat: float = 0.12
    tariff_peak: float = 0.20
    valley_hours: tuple = (23, 0, 1, 2, 3, 4, 5, 6)
    peak_hours: tuple = (17, 18, 19, 20, 21)


def synthetic_profiles(params: SyntheticProfileParams = SyntheticProfileParams(),
                       seed=0) -> GridProfiles:
    """Deterministic one-day profile set with the usual qualitative shape:
    evening baseload peak, midday PV bell, smoothed wind noise, 3-tier TOU.
    """
    rng = np.random.default_rng(seed)
    h = np.arange(24, dtype=float)
    shape = (0.5 + 0.5 * np.cos(2 * np.pi * (h - params.baseload_peak_hour) / 24.0))
    base = params.baseload_min_kw + params.baseload_amplitude_kw * shape ** params.baseload_sharpness
    pv = params.pv_peak_kw * np.exp(-(h - params.pv_center_hour) ** 2
                                    / (2 * params.pv_width_hours ** 2))
    pv[pv < 1.0] = 0.0
    noise = rng.standard_normal(24)
    smooth = np.convolve(np.concatenate([noise[-2:], noise, noise[:2]]),
                         np.ones(5) / 5.0, mode="valid")
    wind = np.clip(params.wind_mean_kw + params.wind_std_kw * smooth, 0.0, None)
    tariff = np.full(24, params.tariff_flat)
    tariff[list(params.valley_hours)] = params.tariff_valley
    tariff[list(params.peak_hours)] = params.tariff_peak
    return GridProfiles(baseload_kw=base, pv_kw=pv, wind_kw=wind, tariff=tariff)


@dataclass(frozen=True)
class EnvConfig:
    transformer_kva: float = 4000.0
    power_factor: float = 0.8
    tie_line_min_kw: float = -1.0e6
    slot_hours: float = 1.0
    start_hour: int = 15
    horizon_slots: int = 20
    accounting_window: int = 24

    @property
    def grid_cap_kw(self) -> float:
        return self.transformer_kva * self.power_factor

    def horizon(self) -> Horizon:
        return Horizon(start_hour=self.start_hour, n_slots=self.horizon_slots,
                       dt_h=self.slot_hours)


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 10.0
    beta: float = -5.0
    psi: float = 1.0
    chi: float = 10.0
    upsilon: float = 5.0
    rho: float = 1.0
    denom_floor: float = 1.0
    sign_mode: str = "corrected"   # or "paper_literal"

    def __post_init__(self):
        if self.denom_floor <= 0:
            raise EnvError("denom_floor must be positive")
        if self.sign_mode not in ("corrected", "paper_literal"):
            raise EnvError(f"unknown sign_mode {self.sign_mode!r}")


@dataclass
class EnvState:
    """The 28-dim observation: 24 load values, EVA energy, variance,
    tariff and the last energy change magnitude."""

    load_history: np.ndarray   # P^{k-23..k}, kW
    eva_energy: float          # kWh
    variance: float            # kW^2
    tariff: float              # $/kWh
    energy_delta: float        # |E^k - E^{k-1}|, kWh

    def to_vector(self) -> np.ndarray:
        v = np.empty(28)
        v[:24] = self.load_history
        v[24] = self.eva_energy
        v[25] = self.variance
        v[26] = self.tariff
        v[27] = self.energy_delta
        return v


@dataclass
class StepOutcome:
    next_state: EnvState
    reward: float
    f1: float
    f2: float
    f3: float
    applied_power: float    # grid-side kW, post-projection
    projected: bool
    done: bool


def rolling_stats(load_history, window: int = 24) -> tuple:
    """(P_max, P_min, sigma^2, P_ave) over the trailing `window` samples."""
    arr = np.asarray(load_history, dtype=float)
    if len(arr) < window:
        raise EnvError(f"need {window} samples, got {len(arr)}")
    w = arr[-window:]
    return float(w.max()), float(w.min()), float(w.var()), float(w.mean())


def reward_components(weights: RewardWeights, sigma2: float, p_max: float,
                      p_min: float, f1_mean: float, e_next: float,
                      e_lower: float, e_upper: float, slot_cost: float,
                      delta_e: float) -> tuple:
    """(F1, F2, F3) for one step; r = F1 + F2 + F3 by construction.

    In `corrected` mode the renewable term rewards driving the mean net
    load toward zero and the cost term penalizes spending / rewards
    revenue; `paper_literal` keeps the original sign conventions as
    published (cost term only active outside the energy bounds).
    """
    guard = weights.denom_floor
    if weights.sign_mode == "corrected":
        f1_term = weights.psi / max(abs(f1_mean), guard)
    else:
        denom = f1_mean if abs(f1_mean) >= guard else math.copysign(guard, f1_mean or 1.0)
        f1_term = weights.psi / denom
    F1 = weights.alpha / max(sigma2, guard) + weights.beta * (p_max - p_min) + f1_term

    boundary = 0.0
    if e_next > e_upper:
        boundary = weights.chi * (e_upper - e_next)
    elif e_next < e_lower:
        boundary = weights.chi * (e_next - e_lower)
    if weights.sign_mode == "corrected":
        F2 = boundary - weights.upsilon * slot_cost
    else:
        F2 = boundary + weights.upsilon * slot_cost if boundary != 0.0 else 0.0

    F3 = weights.rho / max(delta_e, guard)
    return F1, F2, F3


class MicrogridEnv:
    """One scheduling day; single-owner, stepped sequentially."""

    def __init__(self, profiles: GridProfiles, sessions,
                 config: EnvConfig = EnvConfig(),
                 weights: RewardWeights = RewardWeights()):
        self.profiles = profiles
        self.sessions = list(sessions)
        self.config = config
        self.weights = weights
        self.horizon = config.horizon()
        self.envelope = (aggregate_envelope(self.sessions, self.horizon)
                         if self.sessions else None)
        self._rate_eta = (_fleet_rate_eta(self.envelope)
                          if self.envelope is not None else 1.0)
        self.slot = 0
        self.energy = 0.0
        self._load_hist = None
        self._net_hist = None
        self._last_delta = 0.0
        self.energy_trajectory = []

    @property
    def fleet_capacity_kwh(self) -> float:
        return sum(s.spec.capacity_kwh for s in self.sessions)

    def reset(self) -> EnvState:
        self.slot = 0
        self.energy = sum(s.energy_initial for s in self.sessions)
        start = self.horizon.start_hour
        win = self.config.accounting_window
        hours = [(start - win + i) % 24 for i in range(win)]
        self._load_hist = [self.profiles.net_base_at(h) for h in hours]
        self._net_hist = [self.profiles.renewable_net_at(h) for h in hours]
        self._last_delta = 0.0
        self.energy_trajectory = [self.energy]
        return self._state()

    def _state(self) -> EnvState:
        win = self.config.accounting_window
        hist = np.asarray(self._load_hist[-win:], dtype=float)
        hour = self.horizon.slot_hour(min(self.slot, self.horizon.n_slots - 1))
        return EnvState(load_history=hist, eva_energy=self.energy,
                        variance=float(hist.var()),
                        tariff=self.profiles.at(hour)[3],
                        energy_delta=self._last_delta)

    def admissible_bounds(self) -> tuple:
        """(P_min, P_max) for the upcoming slot: envelope ∩ grid limits."""
        j = self.slot
        if j >= self.horizon.n_slots:
            raise EnvError("episode finished")
        if self.envelope is not None:
            env_lo, env_hi = eva_power_bounds(self.envelope, self.energy, j)
        else:
            env_lo = env_hi = 0.0
        net = self.profiles.net_base_at(self.horizon.slot_hour(j))
        grid_hi = self.config.grid_cap_kw - net
        grid_lo = self.config.tie_line_min_kw - net
        lo, hi = max(env_lo, grid_lo), min(env_hi, grid_hi)
        if lo > hi:
            # Grid limits are physical and win over envelope needs.
            lo = hi = min(max(env_lo, grid_lo), grid_hi)
        return lo, hi

    def project(self, action: float) -> tuple:
        """Clip an action into the admissible set; grid caps are absolute."""
        if not math.isfinite(action):
            raise EnvError("action must be finite")
        j = self.slot
        if self.envelope is not None:
            env_lo, env_hi = eva_power_bounds(self.envelope, self.energy, j)
            applied = min(max(action, env_lo), env_hi)
        else:
            applied = 0.0
        net = self.profiles.net_base_at(self.horizon.slot_hour(j))
        grid_hi = self.config.grid_cap_kw - net
        grid_lo = self.config.tie_line_min_kw - net
        applied = min(max(applied, grid_lo), grid_hi)
        return applied, abs(applied - action) > 1e-9

    def step(self, action: float) -> StepOutcome:
        j = self.slot
        if j >= self.horizon.n_slots:
            raise EnvError("episode finished")
        applied, projected = self.project(action)
        hour = self.horizon.slot_hour(j)
        dt = self.horizon.dt_h

        e_prev = self.energy
        self.energy = e_prev + self._rate_eta * applied * dt
        self._last_delta = abs(self.energy - e_prev)
        self.energy_trajectory.append(self.energy)

        p_total = self.profiles.net_base_at(hour) + applied
        p_net = self.profiles.renewable_net_at(hour) + applied
        self._load_hist.append(p_total)
        self._net_hist.append(p_net)

        win = self.config.accounting_window
        p_max, p_min, sigma2, _ = rolling_stats(self._load_hist, win)
        f1_mean = float(np.mean(self._net_hist[-win:]))
        tariff = self.profiles.at(hour)[3]
        slot_cost = tariff * applied * dt
        if self.envelope is not None:
            e_lo = float(self.envelope.E_lower[j + 1])
            e_hi = float(self.envelope.E_upper[j + 1])
        else:
            e_lo = e_hi = 0.0
        F1, F2, F3 = reward_components(self.weights, sigma2, p_max, p_min,
                                       f1_mean, self.energy, e_lo, e_hi,
                                       slot_cost, self._last_delta)
        self.slot = j + 1
        done = self.slot >= self.horizon.n_slots
        return StepOutcome(next_state=self._state(), reward=F1 + F2 + F3,
                           f1=F1, f2=F2, f3=F3, applied_power=applied,
                           projected=projected, done=done)

    def power_load(self, slot: int, p_eva: float) -> float:
        """P^k = base - pv - wind + P_EVA for the given horizon slot."""
        return self.profiles.net_base_at(self.horizon.slot_hour(slot)) + p_eva

    def net_load(self, slot: int, p_eva: float) -> float:
        """Net load -pv - wind + P_EVA (no baseload term)."""
        return self.profiles.renewable_net_at(self.horizon.slot_hour(slot)) + p_eva

    def observation_scale(self) -> np.ndarray:
        """Fixed positive divisors that bring the 28 features to O(1)."""
        cap = max(self.config.grid_cap_kw, 1.0)
        fleet = max(self.fleet_capacity_kwh, 1.0)
        tariff_scale = max(float(self.profiles.tariff.max()), 1e-6)
        v = np.empty(28)
        v[:24] = cap
        v[24] = fleet
        v[25] = cap * cap
        v[26] = tariff_scale
        v[27] = max(0.05 * fleet, 1.0)
        return v
