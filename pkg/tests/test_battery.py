import numpy as np
import pytest

from v2gsim.battery import (BatteryModelError, BatteryPackState, CellSpec,
                            CycleRecord, DegradationCostParams, PackTopology,
                            SohModelParams, apply_daily_trace, degradation_cost,
                            limiting_currents, max_cycle_number, peak_power,
                            segment_cycles, soc_limited_current,
                            soh_capacity_fade, update_cycle_count,
                            voltage_limited_current)


class TestSohCapacityFade:
    def test_zero_cycles_is_pristine(self):
        for soc_ave, dsoc in [(0.0, 0.0), (0.5, 0.6), (1.0, 1.0), (0.3, 0.9)]:
            assert soh_capacity_fade(soc_ave, dsoc, 0.0) == 100.0

    def test_hand_evaluated_golden_value(self):
        # 100 - 1.625*(1 + 1.95 - 0.81)*1
        assert soh_capacity_fade(0.5, 0.6, 100.0) == pytest.approx(96.5225, abs=1e-10)

    def test_strictly_decreasing_in_efc(self):
        values = [soh_capacity_fade(0.5, 0.6, efc) for efc in (100, 200, 400, 800)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_domain_errors(self):
        with pytest.raises(BatteryModelError):
            soh_capacity_fade(1.5, 0.5, 10)
        with pytest.raises(BatteryModelError):
            soh_capacity_fade(0.5, -0.1, 10)
        with pytest.raises(BatteryModelError):
            soh_capacity_fade(0.5, 0.5, -1)


class TestMaxCycleNumber:
    def test_unit_factors(self):
        params = SohModelParams(cycle_constant=3000.0, dod_exponent=0.7,
                                discharge_current_exponent=0.3,
                                charge_current_exponent=0.4)
        assert max_cycle_number(100.0, 1.0, 1.0, params) == pytest.approx(3000.0)

    def test_half_dod_doubles_life(self):
        params = SohModelParams(cycle_constant=3000.0, dod_exponent=1.0,
                                discharge_current_exponent=0.0,
                                charge_current_exponent=0.0)
        assert max_cycle_number(50.0, 1.0, 1.0, params) == pytest.approx(6000.0)

    def test_matches_direct_arithmetic(self):
        params = SohModelParams()
        expected = (3000.0 * (25.0 / 100.0) ** -0.5
                    * 2.3 ** -0.2 * 2.3 ** -0.2)
        assert max_cycle_number(25.0, 2.3, 2.3, params) == pytest.approx(expected)

    def test_zero_dod_rejected(self):
        with pytest.raises(BatteryModelError):
            max_cycle_number(0.0, 1.0, 1.0, SohModelParams())


def _cycle(dod, i=1.0):
    return CycleRecord(soc_ave=0.5, delta_soc=dod / 100.0, dod=dod,
                       i_dis_ave=i, i_ch_ave=i)


class TestUpdateCycleCount:
    def test_first_cycles_hold_epsilon(self):
        params = SohModelParams()
        state = BatteryPackState(soc=0.5, efc=50.0)
        state = update_cycle_count(state, _cycle(40.0), params)
        eps_after_first = state.aging_factor
        m1 = max_cycle_number(40.0, 1.0, 1.0, params)
        assert eps_after_first == pytest.approx(1.0 / m1)
        assert state.efc == pytest.approx(50.0 + params.efc_constant / m1)
        state = update_cycle_count(state, _cycle(40.0), params)
        assert state.aging_factor == pytest.approx(eps_after_first)

    def test_equal_dod_leaves_epsilon_unchanged(self):
        params = SohModelParams()
        state = BatteryPackState(soc=0.5, efc=0.0)
        for _ in range(3):
            state = update_cycle_count(state, _cycle(40.0), params)
        m = max_cycle_number(40.0, 1.0, 1.0, params)
        # (2 - (40+40)/40) = 0 correction on the third cycle
        assert state.aging_factor == pytest.approx(1.0 / m)

    def test_three_point_correction_sign(self):
        params = SohModelParams()
        state = BatteryPackState(soc=0.5, efc=0.0)
        state = update_cycle_count(state, _cycle(40.0), params)
        state = update_cycle_count(state, _cycle(20.0), params)
        eps_before = state.aging_factor
        state = update_cycle_count(state, _cycle(40.0), params)
        m_mid = max_cycle_number(20.0, 1.0, 1.0, params)
        expected = max(eps_before + 0.5 / m_mid * (2.0 - 80.0 / 20.0), 0.0)
        assert state.aging_factor == pytest.approx(expected)
        # (2 - 4) < 0: the correction decreases epsilon
        assert state.aging_factor <= eps_before

    def test_efc_increases_while_aging_factor_positive(self):
        params = SohModelParams()
        state = BatteryPackState(soc=0.5, efc=50.0)
        rng = np.random.default_rng(3)
        for _ in range(10):
            prev_efc, prev_eps = state.efc, state.aging_factor
            state = update_cycle_count(state, _cycle(rng.uniform(10, 90)), params)
            assert state.efc >= prev_efc
            if prev_eps > 0 or len(state.cycle_log) == 1:
                assert state.efc > prev_efc

    def test_soh_never_recovers(self):
        params = SohModelParams()
        state = BatteryPackState(soc=0.5, soh=97.46, efc=50.0)
        rng = np.random.default_rng(4)
        sohs = [state.soh]
        for _ in range(20):
            state = update_cycle_count(state, _cycle(rng.uniform(5, 95)), params)
            sohs.append(state.soh)
        assert all(a >= b for a, b in zip(sohs, sohs[1:]))


class TestSocLimitedCurrent:
    def test_zero_at_floor(self):
        i_ch, i_dis = soc_limited_current(0.2, (0.2, 0.9), 2.3, 1.0)
        assert i_dis == 0.0
        assert i_ch > 0.0

    def test_hand_values(self):
        i_ch, i_dis = soc_limited_current(0.5, (0.2, 0.9), 2.3, 1.0)
        assert i_dis == pytest.approx(0.69)
        assert i_ch == pytest.approx(0.92)

    def test_bad_horizon(self):
        with pytest.raises(BatteryModelError):
            soc_limited_current(0.5, (0.2, 0.9), 2.3, 0.0)


class TestVoltageLimitedCurrent:
    def _spec(self):
        # Flat-ish two-knot curve with slope 0.5 V per unit SOC around 3.3 V
        curve = ((0.0, 3.05), (1.0, 3.55))
        return CellSpec(internal_resistance=0.01, ocv_curve=curve,
                        terminal_voltage_min=2.8, terminal_voltage_max=3.6)

    def test_hand_values(self):
        spec = self._spec()
        # U_oc(0.5) = 3.3, slope 0.5, Q=2.3 Ah, 1 h horizon
        i_ch, i_dis = voltage_limited_current(0.5, spec, 2.3, 1.0)
        assert i_dis == pytest.approx(0.5 / (0.01 + 0.5 / 2.3), rel=1e-9)
        assert i_ch == pytest.approx(0.3 / (0.01 + 0.5 / 2.3), rel=1e-9)

    def test_zero_at_terminal_floor(self):
        curve = ((0.0, 2.80), (1.0, 3.55))
        spec = CellSpec(internal_resistance=0.01, ocv_curve=curve,
                        terminal_voltage_min=2.8, terminal_voltage_max=3.6)
        _, i_dis = voltage_limited_current(0.0, spec, 2.3, 1.0)
        assert i_dis == 0.0


class TestPeakPower:
    def test_zero_charge_power_at_ceiling(self):
        spec = CellSpec()
        state = BatteryPackState(soc=0.9, soh=100.0)
        p_ch, p_dis = peak_power(0.9, spec, PackTopology(), state, 1.0,
                                 soc_bounds=(0.2, 0.9))
        assert p_ch == 0.0
        assert p_dis > 0.0

    def test_design_limit_binding(self):
        spec = CellSpec(design_current_charge=0.01, design_current_discharge=0.01)
        topo = PackTopology()
        state = BatteryPackState(soc=0.5, soh=100.0)
        p_ch, p_dis = peak_power(0.5, spec, topo, state, 1.0, soc_bounds=(0.2, 0.9))
        i_ch, i_dis = limiting_currents(0.5, spec, (0.2, 0.9),
                                        spec.rated_capacity_ah, 1.0)
        assert i_ch == 0.01 and i_dis == 0.01
        # P = U_T * I_design * series * parallel
        scale = topo.cells_in_series * topo.parallel_branches / 1000.0
        u = spec.ocv(0.5)
        assert p_ch == pytest.approx((u + 0.01 * spec.internal_resistance) * 0.01 * scale)
        assert p_dis == pytest.approx((u - 0.01 * spec.internal_resistance) * 0.01 * scale)

    def test_min_dominance_randomized(self):
        # The limiting current must equal the min of the three constraint
        # currents computed independently, on 1000 random states.
        rng = np.random.default_rng(99)
        spec = CellSpec()
        for _ in range(1000):
            soc = rng.uniform(0.2, 0.9)
            soh = rng.uniform(80.0, 100.0)
            horizon = rng.uniform(0.25, 4.0)
            q = spec.rated_capacity_ah * soh / 100.0
            i_ch, i_dis = limiting_currents(soc, spec, (0.2, 0.9), q, horizon)
            soc_ch, soc_dis = soc_limited_current(soc, (0.2, 0.9), q, horizon)
            v_ch, v_dis = voltage_limited_current(soc, spec, q, horizon)
            assert i_ch == min(soc_ch, v_ch, spec.design_current_charge)
            assert i_dis == min(soc_dis, v_dis, spec.design_current_discharge)

    def test_power_shrinks_with_headroom(self):
        spec = CellSpec()
        state = BatteryPackState(soc=0.5, soh=100.0)
        topo = PackTopology()
        p_ch_mid, _ = peak_power(0.5, spec, topo, state, 1.0, soc_bounds=(0.2, 0.9))
        p_ch_high, _ = peak_power(0.88, spec, topo, state, 1.0, soc_bounds=(0.2, 0.9))
        assert p_ch_high <= p_ch_mid


class TestDegradationCost:
    def test_zero_at_full_health(self):
        assert degradation_cost(1.0, 24.0, DegradationCostParams()) == 0.0

    def test_hand_value(self):
        # (300 + 240/0.2) * 0.01 * 24
        assert degradation_cost(0.99, 24.0, DegradationCostParams()) == \
            pytest.approx(360.0, abs=1e-9)

    def test_reported_year_end_value(self):
        assert degradation_cost(0.9713, 24.0, DegradationCostParams()) == \
            pytest.approx(1033.2, abs=1e-9)

    def test_fleet_additivity(self):
        params = DegradationCostParams()
        rng = np.random.default_rng(5)
        sohs = rng.uniform(0.85, 1.0, size=50)
        total = sum(degradation_cost(s, 24.0, params) for s in sohs)
        assert total >= 0.0
        assert total == pytest.approx(
            (300 + 240 / 0.2) * np.sum(1 - sohs) * 24.0)

    def test_scrap_threshold_one_rejected(self):
        with pytest.raises(BatteryModelError):
            DegradationCostParams(soh_min=1.0)


class TestSegmentCycles:
    def test_flat_trace_no_cycles(self):
        assert segment_cycles([0.5] * 10, 1.0, 2.3) == []

    def test_single_excursion(self):
        trace = [0.5, 0.6, 0.7, 0.6, 0.5]
        cycles = segment_cycles(trace, 1.0, 2.3)
        assert len(cycles) == 1
        c = cycles[0]
        assert c.delta_soc == pytest.approx(0.2)
        assert c.soc_ave == pytest.approx(0.6)
        assert c.dod == pytest.approx(20.0)
        assert c.i_ch_ave == pytest.approx(0.1 * 2.3)
        assert c.i_dis_ave == pytest.approx(0.1 * 2.3)

    def test_charge_only_half_cycle(self):
        cycles = segment_cycles([0.5, 0.6, 0.7], 1.0, 2.3)
        assert len(cycles) == 1
        assert cycles[0].dod == pytest.approx(20.0)
        assert cycles[0].i_dis_ave == cycles[0].i_ch_ave  # fallback

    def test_two_excursions(self):
        trace = [0.5, 0.7, 0.4, 0.6, 0.3]
        cycles = segment_cycles(trace, 1.0, 2.3)
        assert len(cycles) == 2

    def test_apply_daily_trace_updates_state(self):
        state = BatteryPackState(soc=0.5, soh=97.46, efc=50.0)
        after = apply_daily_trace(state, [0.5, 0.8, 0.5], 1.0, 2.3,
                                  SohModelParams())
        assert after.efc > 50.0
        assert after.soh <= 97.46
        assert after.soc == 0.5
