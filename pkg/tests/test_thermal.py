import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlrmarket.errors import DivisionGuard, InfeasibleRating, NonPhysicalInput, UnstableStep
from dlrmarket.thermal import (
    ConductorSpec,
    WeatherSample,
    bound_trajectory,
    check_theorem1_conditions,
    condition_sums,
    evolution_coefficients,
    heat_terms,
    integrate_transient,
    load_conductors,
    load_weather_csv,
    steady_state_current,
    steady_state_rating,
    steady_state_temperature,
    step_temperature,
    wind_angle_factor,
)

DRAKE = ConductorSpec.drake()
HOT_DAY = WeatherSample(wind_speed_m_s=0.61, ambient_temp_C=40.0, solar_radiation_W_m2=1000.0)

# Frozen from a stand-alone scalar script (/tmp/oracle_drake.py during the build):
# q_r from the fourth-power difference, q_c from the forced-convection
# correlations with air properties at 40 degC, ampacity from the balance at 100 degC.
ORACLE_QS = 22.512
ORACLE_QR = 39.13622625154987
ORACLE_QC = 84.99085112797867
ORACLE_AMPS = 1040.2427977731052


class TestHeatTerms:
    def test_drake_hot_day(self):
        h = heat_terms(DRAKE, HOT_DAY, 100.0, 0.0)
        assert h.q_s == pytest.approx(ORACLE_QS, rel=1e-12)
        assert h.q_r == pytest.approx(ORACLE_QR, rel=1e-12)
        assert h.q_c == pytest.approx(ORACLE_QC, rel=1e-12)
        assert h.q_J == 0.0

    def test_zero_rise_kills_everything(self):
        w = WeatherSample(2.0, 25.0)
        h = heat_terms(DRAKE, w, 25.0, 0.0)
        assert (h.q_s, h.q_J, h.q_r, h.q_c) == (0.0, 0.0, 0.0, 0.0)

    def test_zero_rise_joule_only(self):
        w = WeatherSample(2.0, 40.0)
        h = heat_terms(DRAKE, w, 40.0, 500.0)
        assert h.q_J == pytest.approx(19.26125, rel=1e-12)
        assert h.q_r == h.q_c == 0.0

    def test_radiation_is_fourth_power_difference(self):
        for T_c in (45.0, 80.0, 160.0):
            h = heat_terms(DRAKE, HOT_DAY, T_c, 0.0)
            direct = math.pi * DRAKE.diameter_m * DRAKE.emissivity * 5.670374419e-8 * (
                (T_c + 273) ** 4 - (40 + 273) ** 4)
            assert h.q_r == pytest.approx(direct, rel=1e-12)

    def test_coefficients_nonnegative(self):
        h = heat_terms(DRAKE, WeatherSample(0.0, -10.0), 50.0, 300.0)
        assert min(h.q_s, h.q_c, h.h_c, h.h_r0, h.k1) >= 0
        assert h.h_c > 0  # still air still cools

    def test_perpendicular_wind_factor(self):
        assert wind_angle_factor(90.0) == pytest.approx(1.0)
        assert wind_angle_factor(0.0) < 1.0

    @pytest.mark.parametrize("T_c,I", [(-20.0, 0.0), (60.0, -1.0)])
    def test_bad_inputs(self, T_c, I):
        with pytest.raises(NonPhysicalInput):
            heat_terms(DRAKE, WeatherSample(1.0, 40.0), T_c, I)

    @pytest.mark.parametrize("field,value", [
        ("wind_speed_m_s", -0.1), ("solar_radiation_W_m2", -1.0), ("air_density_kg_m3", 0.0)])
    def test_weather_invariants(self, field, value):
        kw = dict(wind_speed_m_s=1.0, ambient_temp_C=20.0)
        kw[field] = value
        with pytest.raises(NonPhysicalInput):
            WeatherSample(**kw)

    def test_spec_invariants(self):
        with pytest.raises(NonPhysicalInput):
            ConductorSpec.drake(emissivity=1.2)
        with pytest.raises(NonPhysicalInput):
            ConductorSpec.drake(diameter_m=0.0)


class TestRating:
    def test_drake_ampacity(self):
        assert steady_state_current(DRAKE, HOT_DAY) == pytest.approx(ORACLE_AMPS, rel=1e-10)
        assert steady_state_rating(DRAKE, HOT_DAY) == pytest.approx(ORACLE_AMPS * 0.23, rel=1e-10)

    def test_rating_is_the_steady_state(self):
        w = WeatherSample(1.5, 25.0, 600.0, 70.0)
        I = steady_state_current(DRAKE, w)
        assert steady_state_temperature(DRAKE, w, I) == pytest.approx(DRAKE.max_temp_C, abs=1e-6)
        assert heat_terms(DRAKE, w, DRAKE.max_temp_C, I).net_heating == pytest.approx(0.0, abs=1e-9)

    def test_doubling_wind(self):
        w = WeatherSample(1.0, 30.0, 500.0)
        assert steady_state_rating(DRAKE, w.perturbed("wind_speed_m_s", 1.0)) > steady_state_rating(DRAKE, w)

    def test_solar_overwhelms(self):
        with pytest.raises(InfeasibleRating):
            steady_state_rating(DRAKE, WeatherSample(0.0, 95.0, 5000.0))

    @settings(max_examples=60, deadline=None)
    @given(v=st.floats(0.0, 15.0), dv=st.floats(0.0, 5.0), Ta=st.floats(-20.0, 45.0), Qs=st.floats(0.0, 1100.0))
    def test_monotone_in_wind(self, v, dv, Ta, Qs):
        w = WeatherSample(v, Ta, Qs)
        assert steady_state_rating(DRAKE, w.perturbed("wind_speed_m_s", dv)) >= steady_state_rating(DRAKE, w) - 1e-9

    @settings(max_examples=60, deadline=None)
    @given(v=st.floats(0.0, 15.0), Ta=st.floats(-20.0, 40.0), dT=st.floats(0.0, 10.0), Qs=st.floats(0.0, 1100.0))
    def test_antitone_in_ambient(self, v, Ta, dT, Qs):
        w = WeatherSample(v, Ta, Qs)
        assert steady_state_rating(DRAKE, w.perturbed("ambient_temp_C", dT)) <= steady_state_rating(DRAKE, w) + 1e-9

    def test_vectorised(self):
        w = WeatherSample(np.array([0.5, 2.0, 5.0]), np.array([30.0, 30.0, 30.0]))
        r = steady_state_rating(DRAKE, w)
        assert r.shape == (3,) and np.all(np.diff(r) > 0)
        assert r[1] == pytest.approx(steady_state_rating(DRAKE, WeatherSample(2.0, 30.0)))


class TestEvolution:
    w = WeatherSample(2.0, 25.0, 500.0, 60.0)

    @settings(max_examples=40, deadline=None)
    @given(v=st.floats(0.0, 20.0), Ta=st.floats(-20.0, 45.0), dt=st.floats(1.0, 3600.0))
    def test_mu_b_cooling(self, v, Ta, dt):
        c = evolution_coefficients(DRAKE, WeatherSample(v, Ta), dt)
        assert 0 < c.mu_b < 1
        assert c.mu_c >= 0

    def test_zero_step_limit(self):
        c = evolution_coefficients(DRAKE, self.w, 1e-6)
        assert c.mu_b == pytest.approx(1.0, abs=1e-8)
        assert abs(c.mu_a) < 1e-6 and abs(c.mu_c) < 1e-9 and abs(c.mu_d) < 1e-12

    def test_euler_unstable(self):
        with pytest.raises(UnstableStep):
            evolution_coefficients(DRAKE, self.w, 900.0, scheme="euler")

    def test_euler_matches_exact_for_small_steps(self):
        e = evolution_coefficients(DRAKE, self.w, 5.0, scheme="euler")
        x = evolution_coefficients(DRAKE, self.w, 5.0)
        assert np.allclose(e.as_array(), x.as_array(), rtol=2e-2)

    def test_bad_step(self):
        with pytest.raises(NonPhysicalInput):
            evolution_coefficients(DRAKE, self.w, 0.0)
        with pytest.raises(ValueError):
            evolution_coefficients(DRAKE, self.w, 10.0, scheme="rk9")

    def test_semigroup(self):
        # two half steps of the exact map equal one full step at zero flow
        half = evolution_coefficients(DRAKE, self.w, 450.0)
        full = evolution_coefficients(DRAKE, self.w, 900.0)
        T = 70.0
        assert half.step(half.step(T, 0.0), 0.0) == pytest.approx(full.step(T, 0.0), rel=1e-12)

    def test_zero_flow_fixed_point(self):
        # without current the map settles where the linearised balance says
        c = evolution_coefficients(DRAKE, self.w, 900.0)
        T_star = c.mu_a / (1 - c.mu_b)
        assert c.step(T_star, 0.0) == pytest.approx(T_star)
        h = heat_terms(DRAKE, self.w, self.w.ambient_temp_C, 0.0)
        G = math.pi * DRAKE.diameter_m * (h.h_c + h.h_r0)
        assert T_star == pytest.approx(self.w.ambient_temp_C + h.q_s / G)

    def test_step_formula(self):
        c = evolution_coefficients(DRAKE, self.w, 900.0)
        f = np.array([-100.0, 0.0, 250.0])
        expect = c.mu_a + c.mu_b * 60 + c.mu_c * f**2 + c.mu_d * f**4
        assert np.allclose(step_temperature(c, 60.0, f), expect, rtol=1e-14)

    def test_conditions_recorded(self):
        assert evolution_coefficients(DRAKE, self.w, 900.0, check_conditions=True).conditions_checked
        assert not evolution_coefficients(DRAKE, self.w, 900.0).conditions_checked


class TestConditions:
    def test_zero_perturbation_sums_vanish(self):
        out = condition_sums(0.0, 0.0, 0.0, 0.0, R_max=8.7e-5, M_cr=4.0, T_x=0.0, I=800.0, k2=2e-5,
                             b1t=1.0, b2t=0.5, b1h=0.3, b2h=0.1)
        static_sum, transient_sum = out[6], out[7]
        assert static_sum == 0.0 and transient_sum == 0.0
        assert not static_sum < 0 and not transient_sum < 0

    def test_division_guard(self):
        with pytest.raises(DivisionGuard):
            check_theorem1_conditions(DRAKE, WeatherSample(1.0, 20.0), 50.0, 0.0)

    def test_large_rise_keeps_static(self):
        # -T_x * dr dominates the weighted sum once the rise is large
        w = WeatherSample(0.5, 20.0, 800.0)
        I = steady_state_current(DRAKE, w)
        r = check_theorem1_conditions(DRAKE, w, np.array([120.0, 220.0, 320.0]), 0.5 * I)
        assert np.all(r.condition_static_ok)
        assert np.all(np.diff(r.static_sum) < 0)

    def test_solar_breaks_static_at_small_rise(self):
        w = WeatherSample(0.5, 20.0, 800.0)
        I = steady_state_current(DRAKE, w)
        r = check_theorem1_conditions(DRAKE, w, 60.0, I)
        assert r.delta_s > 0 and r.static_sum > 0
        assert not r.condition_static_ok

    def test_flags_follow_sums(self):
        w = WeatherSample(0.8, 0.0, 300.0)
        I = steady_state_current(DRAKE, w)
        T = np.linspace(10.0, 99.0, 25)
        r = check_theorem1_conditions(DRAKE, w, T, 0.95 * I)
        assert np.array_equal(r.condition_static_ok, r.static_sum < 0)
        assert np.array_equal(r.condition_transient_ok, r.transient_sum < 0)

    def test_partials_by_differences(self):
        args = dict(R_max=8.7e-5, M_cr=4.1, T_x=55.0, I=900.0, k2=2.1e-5, b1t=0.3, b2t=0.2, b1h=0.4, b2h=0.05)
        base = np.array([1.5, 2e-5, 3.0, 40.0])
        F = lambda x, i: condition_sums(*x, **args)[i]
        analytic = condition_sums(*base, **args)[2:6]
        steps = [1e-6, 1e-7, 1e-6, 1e-5]
        pairs = [(0, 0), (0, 1), (1, 2), (1, 3)]
        for val, (fi, xi) in zip(analytic, pairs):
            up, dn = base.copy(), base.copy()
            up[xi] += steps[xi]
            dn[xi] -= steps[xi]
            fd = (F(up, fi) - F(dn, fi)) / (2 * steps[xi])
            assert val == pytest.approx(fd, rel=1e-5, abs=1e-9)


class TestIntegrator:
    def test_reaches_steady_state(self):
        w = WeatherSample(1.0, 20.0, 400.0)
        I = 700.0
        T_ss = steady_state_temperature(DRAKE, w, I)
        T = integrate_transient(DRAKE, [w] * 12, [I / DRAKE.amps_per_MW] * 12, 900.0, 20.0)
        assert T[-1] == pytest.approx(T_ss, abs=1e-3)

    def test_sub_step_convergence(self):
        w = WeatherSample(0.7, 30.0, 900.0)
        flows = [200.0, 260.0, 150.0]
        coarse = integrate_transient(DRAKE, [w] * 3, flows, 900.0, 45.0, fine_dt_s=60.0)
        fine = integrate_transient(DRAKE, [w] * 3, flows, 900.0, 45.0, fine_dt_s=15.0)
        assert np.max(np.abs(coarse - fine)) < 1e-4

    def test_scenario_axis(self):
        w = WeatherSample(1.2, 25.0, 300.0)
        flows = np.array([[100.0, 200.0], [150.0, 250.0]])
        both = integrate_transient(DRAKE, [w, w], flows, 900.0, 50.0)
        one = integrate_transient(DRAKE, [w, w], flows[:, 1], 900.0, 50.0)
        assert both.shape == (3, 2)
        assert np.allclose(both[:, 1], one)

    def test_fine_grid(self):
        w = WeatherSample(1.2, 25.0)
        T, fine = integrate_transient(DRAKE, [w], [100.0], 900.0, 25.0, fine_dt_s=30.0, return_fine=True)
        assert fine.shape == (31,) and fine[-1] == T[-1]

    def test_guards(self):
        w = WeatherSample(1.2, 25.0)
        with pytest.raises(ValueError):
            integrate_transient(DRAKE, [w], [100.0], 900.0, 25.0, fine_dt_s=120.0)
        with pytest.raises(ValueError):
            integrate_transient(DRAKE, [w, w], [100.0], 900.0, 25.0)

    def test_bound_trajectory_near_rating(self):
        # close to the rating with a cool start the map should sit above the oracle
        w = WeatherSample(1.5, 20.0, 0.0)
        f = 0.95 * steady_state_rating(DRAKE, w)
        T0 = steady_state_temperature(DRAKE, w, 0.9 * f * DRAKE.amps_per_MW)
        exact = integrate_transient(DRAKE, [w] * 4, [f] * 4, 900.0, T0)
        bound = bound_trajectory(DRAKE, [w] * 4, [f] * 4, 900.0, T0)
        assert np.all(bound[1:] >= exact[1:])


class TestIngestion:
    def test_weather_csv(self, tmp_path):
        p = tmp_path / "w.csv"
        p.write_text(
            "timestamp,site,wind_speed_m_s,wind_dir_deg,ambient_C,solar_W_m2,air_density\n"
            "0,a,2.0,90,25,100,1.2\n"
            "900,a,2.5,80,26,200,1.2\n"
            "0,b,1.0,45,20,0,1.1\n"
        )
        series = load_weather_csv(p)
        assert sorted(series) == ["a", "b"]
        assert series["a"][1].wind_speed_m_s == 2.5
        assert series["b"][0].wind_direction_deg == 45.0

    def test_weather_csv_missing_column(self, tmp_path):
        p = tmp_path / "w.csv"
        p.write_text("timestamp,wind_speed_m_s\n0,1\n")
        with pytest.raises(NonPhysicalInput, match="missing weather columns"):
            load_weather_csv(p)

    def test_conductor_roundtrip(self, tmp_path):
        import json

        p = tmp_path / "c.json"
        p.write_text(json.dumps({"L1": DRAKE.to_dict()}))
        assert load_conductors(p)["L1"] == DRAKE
