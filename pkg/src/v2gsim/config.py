"""Run configuration: TOML sections env/reward/fleet/battery/ppo/allocation
/profiles over published-constant defaults. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .allocation import AllocationParams
from .battery import (CellSpec, DegradationCostParams, PackTopology,
                      SohModelParams, DEFAULT_OCV_TABLE)
from .env import EnvConfig, RewardWeights, SyntheticProfileParams
from .fleet import EvSpec, FleetDistributions
from .ppo import PpoHyper

CONFIG_ENV_VAR = "V2G_SIM_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FleetSettings:
    n_evs: int = 509
    capacity_kwh: float = 24.0
    p_charge_max_kw: float = 6.0
    p_discharge_max_kw: float = -6.0
    efficiency: float = 0.95
    soc_floor: float = 0.2
    soc_ceiling: float = 0.9
    departure_band: tuple = (0.8, 0.9)
    arrival_mean: float = 18.0
    arrival_std: float = 1.0
    arrival_bounds: tuple = (15, 21)
    departure_mean: float = 8.0
    departure_std: float = 1.0
    departure_bounds: tuple = (6, 10)
    soc_mean: float = 0.5
    soc_std: float = 0.1
    soc_initial_bounds: tuple = (0.2, 0.8)

    def spec(self) -> EvSpec:
        return EvSpec(capacity_kwh=self.capacity_kwh,
                      p_charge_max_kw=self.p_charge_max_kw,
                      p_discharge_max_kw=self.p_discharge_max_kw,
                      efficiency=self.efficiency, soc_floor=self.soc_floor,
                      soc_ceiling=self.soc_ceiling,
                      departure_band=tuple(self.departure_band))

    def distributions(self, initial_soh: float, initial_efc: float) -> FleetDistributions:
        return FleetDistributions(
            arrival_mean=self.arrival_mean, arrival_std=self.arrival_std,
            arrival_bounds=tuple(self.arrival_bounds),
            departure_mean=self.departure_mean, departure_std=self.departure_std,
            departure_bounds=tuple(self.departure_bounds),
            soc_mean=self.soc_mean, soc_std=self.soc_std,
            soc_bounds=tuple(self.soc_initial_bounds),
            initial_soh=initial_soh, initial_efc=initial_efc)


@dataclass(frozen=True)
class BatterySettings:
    nominal_voltage: float = 3.3
    rated_capacity_ah: float = 2.3
    internal_resistance: float = 0.01
    terminal_voltage_min: float = 2.8
    terminal_voltage_max: float = 3.65
    design_current_charge: float = 2.3
    design_current_discharge: float = 4.6
    ocv_table: tuple = DEFAULT_OCV_TABLE
    cells_in_series: int = 39
    parallel_branches: int = 4
    cycle_constant: float = 3000.0
    dod_exponent: float = 0.5
    discharge_current_exponent: float = 0.2
    charge_current_exponent: float = 0.2
    efc_constant: float = 1500.0
    unit_battery_cost: float = 300.0
    labor_cost: float = 240.0
    soh_min: float = 0.8
    initial_soh: float = 97.46
    initial_efc: float = 50.0

    def cell(self) -> CellSpec:
        return CellSpec(nominal_voltage=self.nominal_voltage,
                        rated_capacity_ah=self.rated_capacity_ah,
                        internal_resistance=self.internal_resistance,
                        ocv_curve=tuple(tuple(knot) for knot in self.ocv_table),
                        terminal_voltage_min=self.terminal_voltage_min,
                        terminal_voltage_max=self.terminal_voltage_max,
                        design_current_charge=self.design_current_charge,
                        design_current_discharge=self.design_current_discharge)

    def topology(self) -> PackTopology:
        return PackTopology(cells_in_series=self.cells_in_series,
                            parallel_branches=self.parallel_branches)

    def soh_params(self) -> SohModelParams:
        return SohModelParams(cycle_constant=self.cycle_constant,
                              dod_exponent=self.dod_exponent,
                              discharge_current_exponent=self.discharge_current_exponent,
                              charge_current_exponent=self.charge_current_exponent,
                              efc_constant=self.efc_constant)

    def cost_params(self) -> DegradationCostParams:
        return DegradationCostParams(unit_battery_cost=self.unit_battery_cost,
                                     labor_cost=self.labor_cost,
                                     soh_min=self.soh_min)


@dataclass
class RunConfig:
    seed: int = 42
    workers: int = 1
    out: str = "run"
    profiles_csv: str = ""
    fleet_csv: str = ""
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    fleet: FleetSettings = field(default_factory=FleetSettings)
    battery: BatterySettings = field(default_factory=BatterySettings)
    ppo: PpoHyper = field(default_factory=PpoHyper)
    allocation: AllocationParams = field(default_factory=AllocationParams)
    profiles: SyntheticProfileParams = field(default_factory=SyntheticProfileParams)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write_snapshot(self, path) -> None:
        payload = self.as_dict()
        payload.pop("out", None)  # run-local path; not an input to any number
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=list)
            fh.write("\n")


_SECTION_TYPES = {
    "env": EnvConfig,
    "reward": RewardWeights,
    "fleet": FleetSettings,
    "battery": BatterySettings,
    "ppo": PpoHyper,
    "allocation": AllocationParams,
    "profiles": SyntheticProfileParams,
}
_TOP_LEVEL_KEYS = {"seed", "workers", "out", "profiles_csv", "fleet_csv"}


def _build_section(cls, data: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}]: {exc}") from exc


def load_config(path=None, overrides: dict = None) -> RunConfig:
    """Build a RunConfig from a TOML file (or pure defaults) plus CLI
    overrides of the form {"ppo.episodes": 10, "seed": 1}."""
    raw = {}
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"config parse error: {exc}") from exc

    unknown = set(raw) - _TOP_LEVEL_KEYS - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")

    sections = {}
    for name, cls in _SECTION_TYPES.items():
        data = raw.get(name, {})
        if not isinstance(data, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = dict(data)
    top = {k: raw[k] for k in _TOP_LEVEL_KEYS if k in raw}

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, field_name = key.split(".", 1)
            if section not in sections:
                raise ConfigError(f"unknown config section {section!r}")
            sections[section][field_name] = value
        elif key in _TOP_LEVEL_KEYS:
            top[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")

    built = {name: _build_section(cls, sections[name], name)
             for name, cls in _SECTION_TYPES.items()}
    try:
        return RunConfig(**top, **built)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def config_path_from_env(explicit=None):
    if explicit:
        return explicit
    return os.environ.get(CONFIG_ENV_VAR) or None
