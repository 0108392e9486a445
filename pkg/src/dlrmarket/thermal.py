"""Conductor heat balance, dynamic line ratings and temperature evolution.

All physics is per metre of conductor in SI units (W/m, degC, A).  Power
flows cross the module boundary in MW and are converted to current through
the conductor's equivalent voltage, ``I[A] = f[MW] * 1000 / V[kV]``.

The convective coefficient follows the IEEE-738 forced-convection pair with
the wind-angle factor and a natural-convection floor.  Air properties are
evaluated at ambient temperature, which keeps ``h_c`` independent of the
conductor temperature so that ``q_c = pi*D*h_c*(T_c - T_a)`` holds exactly.

Most functions accept numpy arrays wherever a scalar is documented; this is
what lets the Monte-Carlo validator push thousands of weather/flow samples
through :func:`integrate_transient` in one call.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DivisionGuard, InfeasibleRating, NonPhysicalInput, UnstableStep

STEFAN_BOLTZMANN = 5.670374419e-8
KELVIN_OFFSET = 273.0


@dataclass(frozen=True)
class ConductorSpec:
    diameter_m: float
    solar_absorptivity: float
    emissivity: float
    resistance_ref_ohm_per_m: float
    temperature_ref_C: float
    temp_coeff_resistance_per_C: float
    heat_capacity_J_per_m_C: float
    max_temp_C: float
    voltage_kV: float
    # None -> derived from the reference resistance at the ambient temperature
    resistance_ambient_ohm_per_m: float | None = None

    def __post_init__(self):
        positive = (
            "diameter_m",
            "solar_absorptivity",
            "emissivity",
            "resistance_ref_ohm_per_m",
            "temp_coeff_resistance_per_C",
            "heat_capacity_J_per_m_C",
            "max_temp_C",
            "voltage_kV",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise NonPhysicalInput(f"ConductorSpec.{name} must be > 0")
        for name in ("solar_absorptivity", "emissivity"):
            if getattr(self, name) > 1:
                raise NonPhysicalInput(f"ConductorSpec.{name} must lie in (0, 1]")
        r_a = self.resistance_ambient_ohm_per_m
        if r_a is not None and not r_a > 0:
            raise NonPhysicalInput("ConductorSpec.resistance_ambient_ohm_per_m must be > 0")

    @classmethod
    def drake(cls, voltage_kV=230.0, **overrides):
        """795 kcmil 26/7 ACSR 'Drake' with IEEE-738 resistance data."""
        r25, r75 = 7.283e-5, 8.688e-5
        params = dict(
            diameter_m=0.02814,
            solar_absorptivity=0.8,
            emissivity=0.8,
            resistance_ref_ohm_per_m=r25,
            temperature_ref_C=25.0,
            temp_coeff_resistance_per_C=(r75 / r25 - 1.0) / 50.0,
            heat_capacity_J_per_m_C=1310.0,
            max_temp_C=100.0,
            voltage_kV=voltage_kV,
        )
        params.update(overrides)
        return cls(**params)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def resistance_at(self, temp_C):
        return self.resistance_ref_ohm_per_m * (
            1.0 + self.temp_coeff_resistance_per_C * (np.asarray(temp_C) - self.temperature_ref_C)
        )

    def resistance_ambient(self, ambient_C):
        if self.resistance_ambient_ohm_per_m is not None:
            return self.resistance_ambient_ohm_per_m
        return self.resistance_at(ambient_C)

    @property
    def amps_per_MW(self):
        return 1000.0 / self.voltage_kV


@dataclass(frozen=True)
class WeatherSample:
    """Ambient conditions at a line or wind site for one period.

    Fields may be numpy arrays of a common shape (one entry per scenario).
    """

    wind_speed_m_s: float
    ambient_temp_C: float
    solar_radiation_W_m2: float = 0.0
    wind_direction_deg: float = 90.0
    air_density_kg_m3: float = 1.2

    def __post_init__(self):
        if np.any(np.asarray(self.wind_speed_m_s) < 0):
            raise NonPhysicalInput("wind speed must be >= 0")
        if np.any(np.asarray(self.solar_radiation_W_m2) < 0):
            raise NonPhysicalInput("solar radiation must be >= 0")
        if np.any(np.asarray(self.air_density_kg_m3) <= 0):
            raise NonPhysicalInput("air density must be > 0")

    # Order of the ambient variables that carry forecast errors.
    UNCERTAIN_FIELDS = ("wind_speed_m_s", "wind_direction_deg", "ambient_temp_C")

    def perturbed(self, field, delta):
        return replace(self, **{field: getattr(self, field) + delta})

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class HeatTerms:
    q_s: float
    q_J: float
    q_r: float
    q_c: float
    h_c: float
    h_r0: float
    k1: float

    @property
    def net_heating(self):
        return self.q_s + self.q_J - self.q_r - self.q_c


@dataclass(frozen=True)
class EvolutionCoefficients:
    """One-period map ``T' = mu_a + mu_b*T + mu_c*f**2 + mu_d*f**4`` (f in MW)."""

    mu_a: float
    mu_b: float
    mu_c: float
    mu_d: float
    dt_s: float
    scheme: str = "exact"
    conditions_checked: bool = False

    def step(self, T, f):
        return step_temperature(self, T, f)

    def as_array(self):
        return np.array([self.mu_a, self.mu_b, self.mu_c, self.mu_d])


@dataclass(frozen=True)
class ConditionReport:
    F1_value: float
    F2_value: float
    dF1_dr: float
    dF1_ds: float
    dF2_dT: float
    dF2_dI: float
    static_sum: float
    transient_sum: float
    condition_static_ok: bool
    condition_transient_ok: bool
    # derivation internals
    delta_r: float
    delta_s: float
    delta_T: float
    delta_I: float
    M_cr: float
    k2: float
    b1_tilde: float
    b2_tilde: float
    b1_hat: float
    b2_hat: float

    @property
    def ok(self):
        both = np.logical_and(self.condition_static_ok, self.condition_transient_ok)
        return bool(both) if np.ndim(both) == 0 else both


# --------------------------------------------------------------------------
# heat-balance terms


def _air_conductivity(temp_C):
    return 2.424e-2 + 7.477e-5 * temp_C - 4.407e-9 * temp_C**2


def _air_viscosity(temp_C):
    return 1.458e-6 * (temp_C + 273.0) ** 1.5 / (temp_C + 383.4)


def wind_angle_factor(direction_deg):
    """IEEE-738 K_angle; 1.0 for wind perpendicular to the conductor."""
    phi = np.radians(direction_deg)
    return 1.194 - np.cos(phi) + 0.194 * np.cos(2 * phi) + 0.368 * np.sin(2 * phi)


def convective_coefficient(spec: ConductorSpec, w: WeatherSample):
    """Convective cooling coefficient h_c [W/(m^2 degC)].

    Largest of the low- and high-Reynolds forced correlations and natural
    convection.  Natural convection is evaluated at the rise to the
    conductor's temperature limit, which gives a strictly positive floor in
    still air.
    """
    T_a = np.asarray(w.ambient_temp_C, dtype=float)
    rho = np.asarray(w.air_density_kg_m3, dtype=float)
    D = spec.diameter_m
    k_f = _air_conductivity(T_a)
    reynolds = D * rho * np.asarray(w.wind_speed_m_s, dtype=float) / _air_viscosity(T_a)
    k_angle = wind_angle_factor(w.wind_direction_deg)
    forced_low = k_angle * (1.01 + 1.35 * reynolds**0.52) * k_f
    forced_high = k_angle * 0.754 * reynolds**0.6 * k_f
    rise_ref = np.maximum(spec.max_temp_C - T_a, 1.0)
    natural = 3.645 * np.sqrt(rho) * D**0.75 * rise_ref**0.25
    per_degree = np.maximum(np.maximum(forced_low, forced_high), natural)
    return per_degree / (math.pi * D)


def radiation_coefficients(spec: ConductorSpec, ambient_C):
    """(h_r0, k1): constant and linear parts of the radiative coefficient."""
    T_A = np.asarray(ambient_C, dtype=float) + KELVIN_OFFSET
    es = spec.emissivity * STEFAN_BOLTZMANN
    return 4.0 * es * T_A**3, 6.0 * es * T_A**2


def _check_inputs(w, T_c, I):
    if np.any(np.asarray(T_c) < np.asarray(w.ambient_temp_C) - 50.0):
        raise NonPhysicalInput("conductor temperature more than 50 degC below ambient")
    if np.any(np.asarray(I) < 0):
        raise NonPhysicalInput("current must be >= 0")


def heat_terms(spec: ConductorSpec, w: WeatherSample, T_c, I) -> HeatTerms:
    """Solar, Joule, radiative and convective heat flows at (T_c, I)."""
    _check_inputs(w, T_c, I)
    T_c = np.asarray(T_c, dtype=float)
    I = np.asarray(I, dtype=float)
    T_a = np.asarray(w.ambient_temp_C, dtype=float)
    D = spec.diameter_m
    T_x = T_c - T_a
    T_A = T_a + KELVIN_OFFSET

    q_s = spec.solar_absorptivity * np.asarray(w.solar_radiation_W_m2, dtype=float) * D
    r_a = spec.resistance_ambient(T_a)
    q_J = r_a * I**2 + spec.temp_coeff_resistance_per_C * spec.resistance_ref_ohm_per_m * T_x * I**2
    h_r = spec.emissivity * STEFAN_BOLTZMANN * (
        4 * T_A**3 + 6 * T_x * T_A**2 + 4 * T_x**2 * T_A + T_x**3
    )
    q_r = math.pi * D * h_r * T_x
    h_c = convective_coefficient(spec, w)
    q_c = math.pi * D * h_c * T_x
    h_r0, k1 = radiation_coefficients(spec, T_a)
    out = [q_s, q_J, q_r, q_c, h_c, h_r0, k1]
    if all(np.ndim(x) == 0 for x in out):
        out = [float(x) for x in out]
    return HeatTerms(*out)


def steady_state_current(spec: ConductorSpec, w: WeatherSample, T_max=None):
    """Ampacity [A] at which the steady-state temperature equals T_max."""
    T_max = spec.max_temp_C if T_max is None else T_max
    h = heat_terms(spec, w, T_max, 0.0)
    r_max = spec.resistance_ambient(w.ambient_temp_C) + (
        spec.temp_coeff_resistance_per_C
        * spec.resistance_ref_ohm_per_m
        * (T_max - np.asarray(w.ambient_temp_C))
    )
    radicand = (h.q_c + h.q_r - h.q_s) / r_max
    if np.any(radicand < 0):
        raise InfeasibleRating(
            f"solar gain {np.max(h.q_s):.4g} W/m exceeds cooling at {T_max} degC"
        )
    return np.sqrt(radicand) if np.ndim(radicand) else math.sqrt(radicand)


def steady_state_rating(spec: ConductorSpec, w: WeatherSample, T_max=None):
    """Steady-state dynamic line rating [MW]."""
    return steady_state_current(spec, w, T_max) / spec.amps_per_MW


def steady_state_temperature(spec, w, I, tol=1e-9):
    """Conductor temperature solving the steady heat balance at current I (bisection)."""
    lo = float(w.ambient_temp_C) - 50.0
    hi = float(w.ambient_temp_C) + 1000.0

    def net(T):
        return heat_terms(spec, w, T, I).net_heating

    if net(hi) > 0:
        raise InfeasibleRating("no steady state below 1000 degC above ambient")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if net(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


# --------------------------------------------------------------------------
# conservative one-period temperature map


def _bound_parts(spec, w):
    """Quantities shared by the evolution coefficients and the condition check."""
    T_a = np.asarray(w.ambient_temp_C, dtype=float)
    D = spec.diameter_m
    h = heat_terms(spec, w, T_a, 0.0)
    rise_max = spec.max_temp_C - T_a
    M_cr = math.pi * D * (h.h_c + h.h_r0 + h.k1 * rise_max)
    R_max = spec.resistance_ambient(T_a) + (
        spec.temp_coeff_resistance_per_C * spec.resistance_ref_ohm_per_m * rise_max
    )
    k2 = R_max / M_cr
    quartic = (
        spec.temp_coeff_resistance_per_C * spec.resistance_ref_ohm_per_m * k2
        - math.pi * D * h.k1 * k2**2
    )
    return h, M_cr, R_max, k2, quartic


def evolution_coefficients(
    spec: ConductorSpec, w: WeatherSample, dt_s, scheme="exact", check_conditions=False
) -> EvolutionCoefficients:
    """Coefficients of the conservative temperature map over one period of dt_s.

    The map integrates the cooling-linearised balance
    ``C dT/dt = q_s + R_a I^2 + m I^4 - pi*D*(h_c + h_r0)*(T - T_a)`` with the
    forcing held over the period.  ``scheme='exact'`` integrates it in closed
    form (stable for any step); ``scheme='euler'`` takes one explicit step and
    raises :class:`UnstableStep` once ``mu_b <= 0``.
    """
    if not dt_s > 0:
        raise NonPhysicalInput("dt_s must be > 0")
    h, _, _, _, quartic = _bound_parts(spec, w)
    C = spec.heat_capacity_J_per_m_C
    G = math.pi * spec.diameter_m * (h.h_c + h.h_r0)
    if scheme == "euler":
        mu_b = 1.0 - G * dt_s / C
        if np.any(mu_b <= 0):
            raise UnstableStep(
                f"explicit step {dt_s} s exceeds the thermal time constant {C / np.min(G):.1f} s"
            )
        scale = dt_s / C
    elif scheme == "exact":
        mu_b = np.exp(-G * dt_s / C)
        scale = -np.expm1(-G * dt_s / C) / G
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    T_a = np.asarray(w.ambient_temp_C, dtype=float)
    k = spec.amps_per_MW
    mu_a = scale * (h.q_s + G * T_a)
    mu_c = scale * spec.resistance_ambient(T_a) * k**2
    mu_d = scale * quartic * k**4
    checked = False
    if check_conditions:
        # Worst case of the envelope is at the temperature limit and rating.
        I_max = steady_state_current(spec, w)
        check_theorem1_conditions(spec, w, spec.max_temp_C - 1e-6, 0.999 * I_max)
        checked = True
    vals = [mu_a, mu_b, mu_c, mu_d]
    if all(np.ndim(x) == 0 for x in vals):
        vals = [float(x) for x in vals]
    return EvolutionCoefficients(*vals, dt_s=float(dt_s), scheme=scheme, conditions_checked=checked)


def step_temperature(coeffs: EvolutionCoefficients, T_t, f_t):
    f2 = np.square(f_t)
    return coeffs.mu_a + coeffs.mu_b * T_t + coeffs.mu_c * f2 + coeffs.mu_d * f2 * f2


def condition_sums(dr, ds, dT, dI, *, R_max, M_cr, T_x, I, k2, b1t, b2t, b1h, b2h):
    """Evaluate the perturbation functions and their weighted derivative sums.

    Returns ``(F1, F2, dF1_dr, dF1_ds, dF2_dT, dF2_dI, static_sum, transient_sum)``.
    """
    Mr = M_cr + dr
    Rs = R_max + ds
    X = Rs / Mr
    F1 = b1t * X - b2t * X**2 - T_x * dr
    dF1_dr = -b1t * Rs / Mr**2 + 2 * b2t * Rs**2 / Mr**3 - T_x
    dF1_ds = b1t / Mr - 2 * b2t * Rs / Mr**2
    Imax = I + dI
    Z = k2 * Imax**2 - dT
    F2 = b1h * Z - b2h * Z**2
    dF2_dT = -b1h + 2 * b2h * Z
    dF2_dI = 2 * k2 * Imax * (b1h - 2 * b2h * Z)
    return F1, F2, dF1_dr, dF1_ds, dF2_dT, dF2_dI, dr * dF1_dr + ds * dF1_ds, dT * dF2_dT + dI * dF2_dI


def check_theorem1_conditions(spec: ConductorSpec, w: WeatherSample, T_c, I) -> ConditionReport:
    """Sufficient conditions under which the temperature map is an upper bound.

    The static condition weighs the neglected higher-order radiation and
    solar terms; the transient one weighs the distance to the thermal limit.
    Each flag is true iff its weighted derivative sum is strictly negative.
    """
    _check_inputs(w, T_c, I)
    T_c = np.asarray(T_c, dtype=float)
    I = np.asarray(I, dtype=float)
    if np.any(I == 0):
        raise DivisionGuard("solar perturbation q_s/I^2 undefined at zero current")
    h, M_cr, R_max, k2, _ = _bound_parts(spec, w)
    T_a = np.asarray(w.ambient_temp_C, dtype=float)
    D = spec.diameter_m
    T_x = T_c - T_a
    T_A = T_a + KELVIN_OFFSET
    es = spec.emissivity * STEFAN_BOLTZMANN
    dr = math.pi * D * es * (4 * T_x**2 * T_A + T_x**3)
    ds = h.q_s / I**2
    dT = spec.max_temp_C - T_c
    dI = steady_state_current(spec, w) - I
    aR = spec.temp_coeff_resistance_per_C * spec.resistance_ref_ohm_per_m
    b1t, b2t = aR * I**4, math.pi * D * h.k1 * I**4
    b1h, b2h = aR * I**2, math.pi * D * h.k1
    F1, F2, d1r, d1s, d2T, d2I, s1, s2 = condition_sums(
        dr, ds, dT, dI, R_max=R_max, M_cr=M_cr, T_x=T_x, I=I, k2=k2,
        b1t=b1t, b2t=b2t, b1h=b1h, b2h=b2h,
    )
    vals = [F1, F2, d1r, d1s, d2T, d2I, s1, s2, s1 < 0, s2 < 0,
            dr, ds, dT, dI, M_cr, k2, b1t, b2t, b1h, b2h]
    if all(np.ndim(x) == 0 for x in vals):
        vals = [bool(x) if isinstance(x, np.bool_) else float(x) for x in vals]
    return ConditionReport(*vals)


# --------------------------------------------------------------------------
# fine-step oracle


def _rate(spec, w, T, I):
    return heat_terms(spec, w, T, I).net_heating / spec.heat_capacity_J_per_m_C


def integrate_transient(
    spec: ConductorSpec,
    weather_series,
    flow_series_MW,
    dt_s,
    T0,
    fine_dt_s=60.0,
    return_fine=False,
):
    """Integrate the full transient heat balance with classical RK4 sub-steps.

    Weather and flow are held constant within each period of ``dt_s``.
    Returns the temperatures at the period boundaries (length ``n + 1``),
    or additionally the fine-grid trajectory when ``return_fine`` is set.
    A trailing axis on ``flow_series_MW``/``T0``/weather fields is treated as
    independent scenarios.
    """
    if fine_dt_s > 60:
        raise ValueError("fine_dt_s must be <= 60 s")
    flows = np.asarray(flow_series_MW, dtype=float)
    if len(weather_series) != len(flows):
        raise ValueError("weather and flow series lengths differ")
    n_sub = max(1, int(math.ceil(dt_s / fine_dt_s - 1e-9)))
    h = dt_s / n_sub
    T = np.asarray(T0, dtype=float) * np.ones(np.shape(flows[0]) if flows.ndim > 1 else ())
    boundary = [T.copy()]
    fine = [T.copy()]
    for w, f in zip(weather_series, flows):
        I = np.abs(f) * spec.amps_per_MW
        for _ in range(n_sub):
            k1 = _rate(spec, w, T, I)
            k2 = _rate(spec, w, T + 0.5 * h * k1, I)
            k3 = _rate(spec, w, T + 0.5 * h * k2, I)
            k4 = _rate(spec, w, T + h * k3, I)
            dT = h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
            if np.any(np.abs(dT) > 50.0) or not np.all(np.isfinite(dT)):
                raise UnstableStep("fine step changed temperature by more than 50 degC")
            T = T + dT
            if return_fine:
                fine.append(T.copy())
        boundary.append(T.copy())
    boundary = np.array(boundary)
    if return_fine:
        return boundary, np.array(fine)
    return boundary


def bound_trajectory(spec, weather_series, flow_series_MW, dt_s, T0, scheme="exact"):
    """Roll the conservative map over a series; same layout as integrate_transient."""
    T = np.asarray(T0, dtype=float)
    out = [T]
    for w, f in zip(weather_series, flow_series_MW):
        T = step_temperature(evolution_coefficients(spec, w, dt_s, scheme=scheme), T, f)
        out.append(T)
    return np.array(out)


# --------------------------------------------------------------------------
# ingestion

_CSV_FIELDS = {
    "wind_speed_m_s": "wind_speed_m_s",
    "wind_dir_deg": "wind_direction_deg",
    "ambient_C": "ambient_temp_C",
    "solar_W_m2": "solar_radiation_W_m2",
    "air_density": "air_density_kg_m3",
}


def load_weather_csv(path):
    """Read a weather CSV into ``{site: [WeatherSample, ...]}``.

    Required header: timestamp, wind_speed_m_s, wind_dir_deg, ambient_C,
    solar_W_m2, air_density.  An optional ``site`` column splits rows by
    site; without it every row belongs to site ``"default"``.
    """
    path = Path(path)
    series: dict[str, list[WeatherSample]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"timestamp", *_CSV_FIELDS} - set(reader.fieldnames or ())
        if missing:
            raise NonPhysicalInput(f"{path}: missing weather columns {sorted(missing)}")
        for row in reader:
            site = row.get("site") or "default"
            kwargs = {dst: float(row[src]) for src, dst in _CSV_FIELDS.items()}
            series.setdefault(site, []).append(WeatherSample(**kwargs))
    return series


def load_conductors(path):
    """Conductor specs from a JSON document keyed by line id."""
    with open(path) as fh:
        raw = json.load(fh)
    return {line: ConductorSpec.from_dict(d) for line, d in raw.items()}
