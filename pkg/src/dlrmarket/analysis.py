"""Equilibrium checks, marginal emissions and Monte-Carlo validation.

Generators are price takers paid π per MWh of energy and ρ per unit of
participation factor.  ρ is the per-α price left after the flow-side
delivery cost is netted out of the α-balance multiplier; at the clearing
point it equals the reserve price times √Σ_Ω·δ plus the quadratic
reserve-cost term, so paying for α and paying for reserve capacity give the
same profit maximiser.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .errors import NoMarginalUnit, NumericalFailure
from .grid import Generator, SystemCase
from .market_multi import MultiResult, solve_fixed
from .market_single import SingleResult, solve_single
from .socp import Affine, ConicProgram, ZERO_DUAL, solve
from .thermal import WeatherSample, integrate_transient, steady_state_rating
from .uncertainty import AMBIENT_VARS, JointCovariance, psd_factor

log = logging.getLogger(__name__)

GAP_TOL = 1e-4
BR_TOL = 1e-10  # the one-unit problems stall on degenerate vertices at tighter settings
MIN_SAMPLES = 10_000


# --------------------------------------------------------------------------
# best responses


@dataclass
class BestResponse:
    profit: float
    p: np.ndarray
    alpha: np.ndarray
    r_up: np.ndarray
    r_dn: np.ndarray
    kkt_residual: float
    binding: list


def _profit(gen: Generator, pi, rho, sigma_Omega, p, alpha):
    pi, rho, p, alpha = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (pi, rho, p, alpha))
    so = np.atleast_1d(np.asarray(sigma_Omega, dtype=float))
    cost = gen.c1 * p + gen.c2 * (p**2 + so * alpha**2)
    return float(np.sum(pi * p + rho * alpha - cost))


def best_response_multi(gen: Generator, pi, rho, sigma_Omega, delta) -> BestResponse:
    """Profit-maximising (p, α, R) trajectory for one generator at fixed prices.

    Reserves must cover the recourse, R ≥ √Σ_Ω·δ·α, and share capacity and
    ramp headroom with energy.  All arrays are per period.
    """
    pi = np.atleast_1d(np.asarray(pi, dtype=float))
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    so = np.atleast_1d(np.asarray(sigma_Omega, dtype=float))
    if not (np.all(np.isfinite(pi)) and np.all(np.isfinite(rho))):
        raise ValueError("prices must be finite")
    H = len(pi)
    sd = np.sqrt(np.clip(so, 0.0, None)) * delta
    prog = ConicProgram()
    p = prog.add_var("p", (H,))
    a = prog.add_var("alpha", (H,), lb=0.0)
    ru = prog.add_var("r_up", (H,))
    rd = prog.add_var("r_dn", (H,))
    for t in range(H):
        P, A, U, D = (Affine.var(v[t]) for v in (p, a, ru, rd))
        prog.add_objective((gen.c1 - pi[t]) * P - rho[t] * A)
        prog.add_quadratic(("cost", t), gen.c2, [P, np.sqrt(max(so[t], 0.0)) * A])
        prog.add_ineq(("p_max", t), P + U, gen.p_max)
        prog.add_ineq(("p_min", t), gen.p_min - P + D)
        prog.add_ineq(("re_up", t), sd[t] * A - U)
        prog.add_ineq(("re_dn", t), sd[t] * A - D)
    for t in range(H - 1):
        P0, P1 = Affine.var(p[t]), Affine.var(p[t + 1])
        prog.add_ineq(("rr_up", t), P1 - P0 + Affine.var(ru[t + 1]) + Affine.var(rd[t]), gen.ramp_up)
        prog.add_ineq(("rr_dn", t), P0 - P1 + Affine.var(rd[t + 1]) + Affine.var(ru[t]), gen.ramp_dn)
    try:
        sol = solve(prog, tol=BR_TOL)
    except NumericalFailure:
        sol = solve(prog, tol=1e-8)
    binding = [tag for tag, _ in prog.ineqs if sol.dual(tag) > ZERO_DUAL]
    pv, av = sol.x[p], np.clip(sol.x[a], 0.0, None)
    return BestResponse(
        profit=_profit(gen, pi, rho, so, pv, av), p=pv, alpha=av,
        r_up=sd * av, r_dn=sd * av, kkt_residual=sol.residuals["dual"], binding=binding,
    )


def best_response_single(gen: Generator, pi, rho, sigma_Omega, delta) -> BestResponse:
    """One-period best response; scalar prices."""
    return best_response_multi(gen, [pi], [rho], [sigma_Omega], delta)


@dataclass
class GeneratorCheck:
    gen_id: str
    dispatched_profit: float
    best_profit: float
    rel_gap: float
    binding: list


@dataclass
class EquilibriumReport:
    rows: list
    balance_residual: np.ndarray  # per period, MW
    alpha_residual: np.ndarray  # per period
    reserve_reconciliation: np.ndarray  # (n_g, T) ρα − c2-term − capacity-priced reserve

    @property
    def max_gap(self):
        return max((r.rel_gap for r in self.rows), default=0.0)

    @property
    def ok(self):
        return (self.max_gap <= GAP_TOL and min(r.rel_gap for r in self.rows) >= -1e-9
                and np.max(np.abs(self.balance_residual)) <= 1e-6
                and np.max(np.abs(self.alpha_residual)) <= 1e-9)

    def to_dict(self):
        return {
            "generators": [vars(r) | {"binding": [list(map(str, b)) for b in r.binding]} for r in self.rows],
            "balance_residual_MW": self.balance_residual.tolist(),
            "alpha_residual": self.alpha_residual.tolist(),
            "max_rel_gap": self.max_gap,
        }


def _as_periods(result):
    """(p, alpha, r_up, r_dn, lmp, alpha_price, lmrp, sigma_Omega) with a period axis."""
    if isinstance(result, MultiResult):
        m = result.model
        return (result.p, result.alpha, result.r_up, result.r_dn, result.lmp, result.alpha_price,
                result.lmrp, m.sigma_Omega, m.cfg.delta, m.case, [d for d in range(m.case.horizon)])
    m = result.model
    col = lambda v: np.asarray(v, dtype=float)[:, None]  # noqa: E731
    return (col(result.p), col(result.alpha), col(result.r_up), col(result.r_dn), col(result.lmp),
            col(result.alpha_price), col(result.lmrp), np.array([m.sigma_Omega]), m.cfg.delta, m.case,
            [m.cfg.period])


def equilibrium_check(result) -> EquilibriumReport:
    """Compare every generator's dispatched profit with its best response."""
    p, alpha, r_up, r_dn, lmp, rho, lmrp, so, delta, case, periods = _as_periods(result)
    rows = []
    recon = np.zeros_like(p)
    for k, g in enumerate(case.generators):
        i = case.node_index(g.node)
        br = best_response_multi(g, lmp[i], rho[k], so, delta)
        here = _profit(g, lmp[i], rho[k], so, p[k], alpha[k])
        gap = (br.profit - here) / max(1.0, abs(br.profit))
        rows.append(GeneratorCheck(g.id, here, br.profit, gap, br.binding))
        recon[k] = rho[k] * alpha[k] - 2 * g.c2 * so * alpha[k] ** 2 - lmrp[k] * r_up[k]
    d = case.loads()[periods].sum(axis=1)
    w = case.wind_forecast()[periods].sum(axis=1)
    return EquilibriumReport(rows, p.sum(axis=0) + w - d, alpha.sum(axis=0) - 1.0, recon)


# --------------------------------------------------------------------------
# marginal emissions


@dataclass
class LmeReport:
    lme: np.ndarray  # (n_nodes, T) kg/kWh
    marginal: list  # per period: generator ids strictly inside their limits
    weights: dict  # (node, t) -> {gen id: dispatch response}
    no_marginal: list  # periods without any marginal unit
    method: str

    def to_dict(self):
        return {"lme_kg_per_kWh": self.lme.tolist(), "marginal": self.marginal,
                "no_marginal_periods": self.no_marginal, "method": self.method}


def marginal_units(result, tol_frac=1e-4):
    """Per period, indices of generators strictly inside [p_min + R_dn, p_max − R_up]."""
    p, _, r_up, r_dn, *_, case, _ = _as_periods(result)
    out = []
    for t in range(p.shape[1]):
        inside = []
        for k, g in enumerate(case.generators):
            tol = tol_frac * g.p_max
            if g.p_min + r_dn[k, t] + tol < p[k, t] < g.p_max - r_up[k, t] - tol:
                inside.append(k)
        out.append(inside)
    return out


def _active_set_response(result: SingleResult, node: int, units):
    """Dispatch response of ``units`` to +1 MW at ``node`` with binding flows held."""
    m = result.model
    S = m.ptdf.S
    binding = [e for e in range(len(m.case.edges))
               if max(result.duals["F_up"][e], result.duals["F_dn"][e]) > ZERO_DUAL]
    A = np.vstack([np.ones(len(units))] + [m.s_g[e, units] for e in binding])
    b = np.array([1.0] + [S[e, node] for e in binding])
    dp, *_ = np.linalg.lstsq(A, b, rcond=None)
    if np.max(np.abs(A @ dp - b), initial=0.0) > 1e-8:
        return None
    return dp


def _perturbed_dispatch(result, node, t, jc):
    case = result.model.case
    bumped = case.with_load_delta(case.node_ids[node], t, 1.0)
    if isinstance(result, MultiResult):
        m = result.model
        return solve_fixed(bumped, jc, m.kappas, m.cfg, m.ptdf, m.mode).p
    return solve_single(bumped, jc, result.model.cfg, result.model.ptdf).p[:, None]


def lme(result, jc=None, method=None, strict=False) -> LmeReport:
    """Locational marginal emissions.

    ``method='active_set'`` (single period) moves only marginal units,
    holding binding line limits; ``'perturbation'`` re-solves with +1 MW at
    each (node, t) and needs ``jc``.  Units outside their limits never set
    the price; with no marginal unit the node reports 0 and is flagged.
    """
    p, *_, case, periods = _as_periods(result)
    method = method or ("perturbation" if isinstance(result, MultiResult) else "active_set")
    rates = np.array([g.emission_rate for g in case.generators])
    ids = [g.id for g in case.generators]
    marg = marginal_units(result)
    n_t = p.shape[1]
    out = np.zeros((case.n_nodes, n_t))
    weights = {}
    flagged = [t for t in range(n_t) if not marg[t]]
    for t in flagged:
        msg = f"no marginal generator in period {t}"
        if strict:
            raise NoMarginalUnit(msg)
        log.warning(msg)
    for t in range(n_t):
        if not marg[t]:
            continue
        for i in range(case.n_nodes):
            dp = None
            if method == "active_set" and isinstance(result, SingleResult):
                resp = _active_set_response(result, i, marg[t])
                if resp is not None:
                    dp = np.zeros(len(ids))
                    dp[marg[t]] = resp
                    dp = dp[:, None]
            if dp is None:
                if jc is None:
                    raise ValueError("perturbation LME needs the joint covariance")
                dp = _perturbed_dispatch(result, i, periods[t] if n_t == 1 else t, jc) - p
            out[i, t] = float(rates @ dp.sum(axis=1))
            weights[(i, t)] = {ids[k]: float(dp[k].sum()) for k in range(len(ids)) if abs(dp[k].sum()) > 1e-9}
    return LmeReport(out, [[ids[k] for k in m] for m in marg], weights, flagged, method)


def emissions(result):
    """(n_g, T) emissions in kg for each generator and period."""
    p, *_, case, _ = _as_periods(result)
    rates = np.array([g.emission_rate for g in case.generators])[:, None]
    return rates * p * 1000.0 * case.period_s / 3600.0


# --------------------------------------------------------------------------
# Monte-Carlo validation


@dataclass
class ViolationRow:
    constraint: str
    index: tuple
    violations: int
    rate: float
    ci_low: float
    ci_high: float
    chance_constrained: bool


@dataclass
class ValidationReport:
    rows: list
    n_samples: int
    seed: int
    epsilon: float
    notes: list = field(default_factory=list)

    def cc_rows(self):
        return [r for r in self.rows if r.chance_constrained]

    @property
    def max_rate(self):
        return max((r.rate for r in self.cc_rows()), default=0.0)

    def ok(self, slack=0.01):
        return self.max_rate <= self.epsilon + slack

    def rate(self, constraint, index):
        for r in self.rows:
            if r.constraint == constraint and r.index == tuple(index):
                return r.rate
        raise KeyError((constraint, index))

    def to_dict(self):
        return {
            "n_samples": self.n_samples, "seed": self.seed, "epsilon": self.epsilon,
            "max_cc_rate": self.max_rate, "notes": self.notes,
            "rows": [vars(r) | {"index": list(r.index)} for r in self.rows],
        }


def wilson_interval(k, n):
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=0.95, method="wilson")
    return float(ci.low), float(ci.high)


def _row(name, index, mask, cc):
    n = mask.size
    k = int(np.count_nonzero(mask))
    lo, hi = wilson_interval(k, n)
    return ViolationRow(name, tuple(int(i) for i in index), k, k / n, lo, hi, cc)


def _exceeds(value, limit):
    return value > limit + 1e-7 * (1.0 + np.abs(limit))


def _perturbed_weather(w: WeatherSample, dz):
    """Weather with the ambient errors ``dz`` (N, 3) applied (wind speed ≥ 0)."""
    vals = {name: getattr(w, name) + dz[:, j] for j, name in enumerate(AMBIENT_VARS)}
    vals["wind_speed_m_s"] = np.clip(vals["wind_speed_m_s"], 0.0, None)
    return WeatherSample(
        wind_speed_m_s=vals["wind_speed_m_s"], ambient_temp_C=vals["ambient_temp_C"],
        solar_radiation_W_m2=w.solar_radiation_W_m2, wind_direction_deg=vals["wind_direction_deg"],
        air_density_kg_m3=w.air_density_kg_m3,
    )


def monte_carlo_validate(result, jc: JointCovariance, n_samples=20_000, seed=0) -> ValidationReport:
    """Empirical violation frequencies of every chance constraint.

    Rows marked ``chance_constrained=False`` are informational: limits the
    mode treats deterministically, or physical re-simulation of the
    linearised rating model.
    """
    if n_samples < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {n_samples}")
    rng = np.random.default_rng(seed)
    if isinstance(result, MultiResult):
        return _validate_multi(result, jc, n_samples, seed, rng)
    return _validate_single(result, jc, n_samples, seed, rng)


def _reserve_rows(rows, alpha, r_up, r_dn, Omega, t):
    for k in range(len(alpha)):
        rows.append(_row("reserve_up", (k, t), _exceeds(-alpha[k] * Omega, r_up[k]), True))
        rows.append(_row("reserve_dn", (k, t), _exceeds(alpha[k] * Omega, r_dn[k]), True))


def _validate_single(result: SingleResult, jc, N, seed, rng):
    m = result.model
    case, t = m.case, m.cfg.period
    n_w, n_e = jc.n_wind, len(case.edges)
    L = psd_factor(jc.sigma_omega_xi[t])
    z = rng.standard_normal((N, L.shape[1])) @ L.T
    omega, xi = z[:, :n_w], z[:, n_w:]
    Omega = omega.sum(axis=1)
    rows, notes = [], []
    _reserve_rows(rows, result.alpha, result.r_up, result.r_dn, Omega, t)
    cc = m.cfg.rating_mode == "CC_DLR"
    for e in range(n_e):
        a = m.s_w[e] - float(m.s_g[e] @ result.alpha)
        flow = result.flows[e] + omega @ a
        limit = m.ratings[e] + (xi[:, e] if cc else 0.0)
        rows.append(_row("flow_up", (e, t), _exceeds(flow, limit), cc))
        rows.append(_row("flow_dn", (e, t), _exceeds(-flow, limit), cc))
    if not cc:
        notes.append(f"{m.cfg.rating_mode}: line limits are deterministic, flow rows are informational")
    elif not np.any(jc.rating_std_overridden) and jc.sens is not None:
        # physical check: ratings recomputed from perturbed weather
        zs = rng.standard_normal((N, jc.sigma_varsigma.shape[0])) @ psd_factor(jc.sigma_varsigma).T
        om = zs @ jc.sens.gamma_w[t].T
        for e, edge in enumerate(case.edges):
            blk = case.ambient.block(edge.site)
            rating = steady_state_rating(edge.conductor, _perturbed_weather(case.edge_weather(e, t), zs[:, blk]))
            flow = result.flows[e] + om @ (m.s_w[e] - float(m.s_g[e] @ result.alpha))
            rows.append(_row("flow_physical", (e, t), _exceeds(np.abs(flow), rating), False))
    return ValidationReport(rows, N, seed, m.cfg.epsilon, notes)


def _validate_multi(result: MultiResult, jc, N, seed, rng):
    m = result.model
    case, H = m.case, m.case.horizon
    n_e = len(case.edges)
    Lz = psd_factor(jc.sigma_varsigma)
    zs = rng.standard_normal((H, N, Lz.shape[1])) @ Lz.T  # independent per period
    gw = jc.sens.gamma_w  # (H, n_w, n_var)
    rows, notes = [], []
    flows = np.zeros((H, n_e, N))
    for t in range(H):
        omega = zs[t] @ gw[t].T
        _reserve_rows(rows, result.alpha[:, t], result.r_up[:, t], result.r_dn[:, t], omega.sum(axis=1), t)
        for e in range(n_e):
            a = m.s_w[e] - float(m.s_g[e] @ result.alpha[:, t])
            flows[t, e] = result.flows[e, t] + omega @ a
    if m.mode == "CC_DLR":
        kp = m.kappas
        for e in range(n_e):
            for t in range(H):
                u = kp.kappa_c[e, t] * (kp.gamma_w[t].T @ kp.kappa_dot(e, result.alpha[:, t])) + kp.kappa_dot_d[e, t]
                head = result.rth[e, t + 1] - kp.kappa_b[e, t] * result.rth[e, t]
                rows.append(_row("thermal_reserve", (e, t), _exceeds(zs[t] @ u, head), True))
    if m.mode in ("DLR", "CC_DLR"):
        for e, edge in enumerate(case.edges):
            blk = case.ambient.block(edge.site)
            weather = [_perturbed_weather(case.edge_weather(e, t), zs[t][:, blk]) for t in range(H)]
            T = integrate_transient(edge.conductor, weather, flows[:, e, :], case.period_s, m.T_init[e])
            for t in range(H):
                rows.append(_row("temperature", (e, t + 1), _exceeds(T[t + 1], m.T_max[e]), m.mode == "CC_DLR"))
    else:
        for e in range(n_e):
            for t in range(H):
                lim = m.flow_limits[e, t]
                rows.append(_row("flow_up", (e, t), _exceeds(flows[t, e], lim), False))
        notes.append(f"{m.mode}: line limits are deterministic, flow rows are informational")
    if m.mode == "DLR":
        notes.append("DLR: temperatures are deterministic in the model, temperature rows are informational")
    return ValidationReport(rows, N, seed, m.cfg.epsilon, notes)
