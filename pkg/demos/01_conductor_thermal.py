"""Conductor heat balance, dynamic ratings and the one-period temperature map.

Run with ``python3 demos/01_conductor_thermal.py``.
"""
import numpy as np

from dlrmarket.thermal import (
    ConductorSpec,
    WeatherSample,
    check_theorem1_conditions,
    evolution_coefficients,
    heat_terms,
    integrate_transient,
    steady_state_rating,
    step_temperature,
)

drake = ConductorSpec.drake()
hot_day = WeatherSample(wind_speed_m_s=0.61, ambient_temp_C=40.0, solar_radiation_W_m2=1000.0)

# heat flows at the conductor limit, W per metre of line
terms = heat_terms(drake, hot_day, 100.0, 900.0)
print("heat terms at 100 degC, 900 A:")
for name in ("q_s", "q_J", "q_r", "q_c"):
    print(f"  {name:4s} {getattr(terms, name):8.2f} W/m")
print(f"  net  {terms.net_heating:8.2f} W/m\n")

# wind matters far more than anything else
print("steady rating against wind speed (40 degC, full sun):")
for v in (0.0, 0.5, 1.0, 2.0, 4.0):
    w = WeatherSample(v, 40.0, 1000.0)
    print(f"  v = {v:3.1f} m/s -> {steady_state_rating(drake, w):6.1f} MW")

# one 15-minute step of the conservative map next to the RK4 oracle
dt = 900.0
mild = WeatherSample(2.0, 25.0, 600.0)
coeffs = evolution_coefficients(drake, mild, dt)
rating = steady_state_rating(drake, mild)
print(f"\nrating in mild weather {rating:.1f} MW; map coefficients " + ", ".join(f"{c:.3e}" for c in coeffs.as_array()) + "")
# the sufficient conditions only hold close to the rating on a hot conductor
for frac, T0 in ((0.8, 60.0), (0.95, 90.0), (1.0, 90.0), (1.0, 95.0)):
    f = frac * rating
    mapped = step_temperature(coeffs, T0, f)
    oracle = integrate_transient(drake, [mild], [f], dt, T0)[-1]
    rep = check_theorem1_conditions(drake, mild, T0, f * drake.amps_per_MW)
    print(f"  {frac:.2f} x rating from {T0:.0f} degC: map {mapped:6.2f}, RK4 {oracle:6.2f} degC; "
          f"static {bool(rep.condition_static_ok)}, transient {bool(rep.condition_transient_ok)}")

# a line can run above its steady rating while it warms up
f = 1.15 * rating
T = integrate_transient(drake, [mild] * 4, [f] * 4, dt, 45.0)
print(f"\n115 % of rating from 45 degC, hourly temperatures: {np.round(T, 1)}")
