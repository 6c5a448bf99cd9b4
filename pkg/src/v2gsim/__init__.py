"""Hierarchical V2G fleet coordination simulator.

An EVA-level dispatch agent (PPO) sets one aggregate power per hour, a
stake-weighted allocation layer splits it across plugged-in EVs, and
battery conditioning models (SOC/SOP/SOH) bound and score every decision
against four deterministic baselines.
"""

__version__ = "0.1.0"

from .battery import (BatteryPackState, CellSpec, CycleRecord,
                      DegradationCostParams, PackTopology, SohModelParams,
                      degradation_cost, max_cycle_number, peak_power,
                      segment_cycles, soc_limited_current, soh_capacity_fade,
                      update_cycle_count, voltage_limited_current)
from .fleet import (AggregateEnvelope, EvSession, EvSpec, FleetDistributions,
                    Horizon, aggregate_envelope, envelope_contains,
                    eva_power_bounds, per_ev_energy_bounds, sample_fleet)
from .env import (EnvConfig, EnvState, GridProfiles, MicrogridEnv,
                  RewardWeights, StepOutcome, rolling_stats,
                  synthetic_profiles)
from .ppo import (PpoAgent, PpoHyper, Trajectory, TrainingDiverged,
                  clipped_surrogate_update, compute_returns_and_advantages,
                  sample_action, train)
from .allocation import (AllocationParams, AllocationProposal, FleetDispatch,
                         StakeRecord, propose_powers, redistribute_residual,
                         safety_clamp, select_validator, settle_rewards,
                         validate_proposal)
from .baselines import (BaselinePolicy, baseline_schedule, bl1_uncontrolled,
                        bl2_optimal_charging, bl3_min_variance, bl4_min_cost)
from .metrics import (EvaluationIndices, emit_reports, evaluation_indices,
                      normalize_indices, run_day, simulate_year)
from .config import RunConfig, load_config
