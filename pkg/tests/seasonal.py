"""Synthetic seasonal days and random flow walks for the temperature-map check."""
import numpy as np

from dlrmarket.thermal import (
    WeatherSample,
    check_theorem1_conditions,
    integrate_transient,
    steady_state_rating,
    steady_state_temperature,
)

STEPS = 96
DT = 900.0
_GRID = np.linspace(0.80, 1.0, 81)


def season_profile(season):
    hours = np.arange(STEPS) / 4
    sun = np.clip(np.sin(np.pi * (hours - 6) / 12), 0, None)
    day = np.sin(np.pi * (hours - 9) / 12)
    if season == "winter":
        Ta, v, S, ang = -2 + 4 * day, 2.5 + 0.8 * np.cos(hours / 3), 300 * sun, 60 + 20 * np.sin(hours / 5)
    elif season == "spring":
        Ta, v, S, ang = 14 + 5 * day, 3 + np.cos(hours / 4), 700 * sun, 50 + 30 * np.sin(hours / 6)
    elif season == "summer":
        # a calm spell in the morning sun is the hard case
        v = 2.2 + 0.8 * np.cos(hours / 4) - np.exp(-((hours - 9) / 1.0) ** 2)
        Ta, S, ang = 30 + 6 * day, 1000 * sun, 45 + 30 * np.sin(hours / 7)
    else:
        raise ValueError(season)
    return [WeatherSample(float(a), float(b), float(c), float(d), 1.15) for a, b, c, d in zip(v, Ta, S, ang)]


def sample_walks(spec, weather, n, rng, centre=0.92):
    """Flow walks near the rating that keep both sufficient conditions true.

    At each step every walk picks, from a grid of fractions of the current
    rating, the admissible value closest to its AR(1) target; a walk with no
    admissible value left is marked invalid.  Returns flows (T, n), oracle
    temperatures (T+1, n) and the validity mask.
    """
    rating = np.array([steady_state_rating(spec, w) for w in weather])
    flows = np.zeros((STEPS, n))
    temps = np.zeros((STEPS + 1, n))
    valid = np.ones(n, bool)
    temps[0] = steady_state_temperature(spec, weather[0], centre * rating[0] * spec.amps_per_MW)
    target = np.full(n, centre)
    for t in range(STEPS):
        target = centre + 0.7 * (target - centre) + rng.normal(0, 0.02, n)
        cand = _GRID[None, :] * rating[t]
        rep = check_theorem1_conditions(spec, weather[t], np.repeat(temps[t][:, None], _GRID.size, 1),
                                        cand * np.ones((n, 1)) * spec.amps_per_MW)
        dist = np.where(rep.ok, np.abs(_GRID[None, :] - target[:, None]), np.inf)
        j = np.argmin(dist, axis=1)
        valid &= np.isfinite(dist[np.arange(n), j])
        flows[t] = _GRID[j] * rating[t]
        target = _GRID[j]
        temps[t + 1] = integrate_transient(spec, [weather[t]], flows[t][None], DT, temps[t])[-1]
    return flows, temps, valid
