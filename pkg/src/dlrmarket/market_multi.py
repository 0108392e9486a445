"""Multi-period chance-constrained DC-OPF with conductor thermal dynamics.

Temperatures follow the conservative one-period map

    T_{t+1} = μa + μb T_t + μc f_t² + μd f_t⁴

linearised at a reference trajectory (T̆, f̆, μ̆).  The Jacobian of the
implicit form wrt T_{t+1} is −1, so the expansion coefficients are the
plain partial derivatives: κb = μb, κc = 2μc f̆ + 4μd f̆³ and
κ^μ = (1, T̆_t, f̆², f̆⁴).

Uncertainty is carried in the ambient-error space ς (one independent draw
per period).  Wind errors are ω_t = Γ_w,t ς_t and coefficient errors are
Γ_μ,t ς_t, so the one-step temperature deviation is uᵀς with

    u_{e,t}(α) = κc Γ_wᵀ a_e(α) + Γ_μᵀ κ^μ ,   a_e(α) = s_w,e − (s_g,eᵀα) 1

and the thermal-reserve chance constraint becomes the cone
δ‖Lᵀu‖ ≤ R^th_{t+1} − κb R^th_t with Σ_ς = L Lᵀ.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import DegenerateDuals, NoConvergence, SingularJacobian
from .grid import PtdfMatrix, SystemCase, ptdf
from .market_single import (
    ROUTE_TOL,
    TIE_BREAK,
    injection_maps,
    line_ratings,
    minimal_reserve,
    normalise_mode,
)
from .socp import Affine, ConicProgram, ConicSolution, constant_sensitivity, solve
from .thermal import evolution_coefficients
from .uncertainty import JointCovariance, psd_factor, validate_dominance

log = logging.getLogger(__name__)

MULTI_MODES = ("SLR", "DLR", "CC_DLR")
_STEADY = "STEADY"  # reference problem: |f| ≤ steady-state rating
POINT_TOL = 1e-8


@dataclass(frozen=True)
class MultiPeriodConfig:
    epsilon: float = 0.05
    rating_mode: str = "CC_DLR"
    max_iters: int = 10
    tol_C: float = 0.1
    tie_break: float = TIE_BREAK

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")
        object.__setattr__(self, "rating_mode", normalise_mode(self.rating_mode))
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @property
    def delta(self) -> float:
        return float(norm.ppf(1.0 - self.epsilon))

    @property
    def thermal(self) -> bool:
        return self.rating_mode in ("DLR", "CC_DLR")


# --------------------------------------------------------------------------
# linearisation


def coefficient_table(case: SystemCase) -> np.ndarray:
    """(n_e, T, 4) evolution coefficients at the forecast weather."""
    out = np.zeros((len(case.edges), case.horizon, 4))
    for e, edge in enumerate(case.edges):
        for t in range(case.horizon):
            out[e, t] = evolution_coefficients(edge.conductor, case.edge_weather(e, t), case.period_s).as_array()
    return out


def simulate_map(mu, T0, flows):
    """Roll the nonlinear one-period map: returns (n_e, T+1) temperatures."""
    n_e, H, _ = mu.shape
    T = np.zeros((n_e, H + 1))
    T[:, 0] = T0
    for t in range(H):
        f2 = np.square(flows[:, t])
        T[:, t + 1] = mu[:, t, 0] + mu[:, t, 1] * T[:, t] + mu[:, t, 2] * f2 + mu[:, t, 3] * f2 * f2
    return T


@dataclass(frozen=True)
class LinearizationPoint:
    T: np.ndarray   # (n_e, H+1)
    f: np.ndarray   # (n_e, H)
    mu: np.ndarray  # (n_e, H, 4)

    @classmethod
    def from_flows(cls, mu, T0, flows):
        flows = np.asarray(flows, dtype=float)
        return cls(simulate_map(mu, T0, flows), flows, np.asarray(mu, dtype=float))

    def residual(self):
        """max |T_{t+1} − map(T_t, f_t)| over the trajectory."""
        sim = simulate_map(self.mu, self.T[:, 0], self.f)
        return float(np.max(np.abs(sim - self.T), initial=0.0))


@dataclass(frozen=True)
class KappaSet:
    """First-order expansion of the temperature map at a reference point.

    ``kappa_a`` is the constant of the expansion in the full variable vector
    U = (T_t, f_t, μa, μb, μc, μd); ``const`` folds in κ^μ·μ̆ so that, at the
    forecast coefficients, T_{t+1} = const + κb T_t + κc f_t.
    """

    kappa_a: np.ndarray   # (n_e, H)
    kappa_b: np.ndarray   # (n_e, H)
    kappa_c: np.ndarray   # (n_e, H)
    kappa_mu: np.ndarray  # (n_e, H, 4)
    const: np.ndarray     # (n_e, H)
    kappa_dot_d: np.ndarray  # (n_e, H, n_var)  Γ_μᵀ κ^μ
    gamma_w: np.ndarray   # (H, n_w, n_var)
    s_g: np.ndarray       # (n_e, n_g)
    s_w: np.ndarray       # (n_e, n_w)
    point: LinearizationPoint = field(repr=False, default=None)

    def kappa_dot(self, e, alpha):
        """κ́_e α: flow deviation per unit wind error, a_e(α) (n_w,)."""
        return self.s_w[e] - float(self.s_g[e] @ alpha)

    def kappa_dot_c(self, e, t, alpha):
        """κ̇^c = κc κ́_e α, mapped into ς-space through Γ_w."""
        return self.kappa_c[e, t] * (self.gamma_w[t].T @ self.kappa_dot(e, alpha))

    def predict(self, e, t, T, f, mu=None):
        """Linearised T_{t+1}; ``mu`` defaults to the reference coefficients."""
        mu = self.point.mu[e, t] if mu is None else np.asarray(mu)
        return self.kappa_a[e, t] + self.kappa_b[e, t] * T + self.kappa_c[e, t] * f + self.kappa_mu[e, t] @ mu


def linearize_evolution(mu, point: LinearizationPoint, gamma_mu=None, gamma_w=None, s_g=None, s_w=None) -> KappaSet:
    """Expansion coefficients of the map at ``point`` for every (line, period).

    ``gamma_mu`` is (H, n_e, 4, n_var) as produced by ``sensitivities``.
    """
    mu = np.asarray(mu, dtype=float)
    n_e, H, _ = mu.shape
    res = point.residual()
    if res > POINT_TOL * max(1.0, float(np.max(np.abs(point.T)))):
        raise ValueError(f"linearization point violates the map by {res:.3g} degC")
    jac_next = -1.0  # ∂(map − T_{t+1})/∂T_{t+1}
    if jac_next == 0.0:
        raise SingularJacobian("temperature map does not depend on T_{t+1}")
    f = point.f
    T_prev = point.T[:, :-1]
    T_next = point.T[:, 1:]
    kb = mu[:, :, 1].copy()
    kc = 2 * mu[:, :, 2] * f + 4 * mu[:, :, 3] * f**3
    kmu = np.stack([np.ones_like(f), T_prev, f**2, f**4], axis=-1)
    ka = T_next - kb * T_prev - kc * f - np.einsum("etk,etk->et", kmu, mu)
    const = ka + np.einsum("etk,etk->et", kmu, mu)
    if gamma_mu is None:
        kdd = np.zeros((n_e, H, 0))
    else:
        kdd = np.einsum("tekv,etk->etv", np.asarray(gamma_mu), kmu)
    gw = np.zeros((H, 0, kdd.shape[-1])) if gamma_w is None else np.asarray(gamma_w)
    s_g = np.zeros((n_e, 0)) if s_g is None else s_g
    s_w = np.zeros((n_e, gw.shape[1])) if s_w is None else s_w
    return KappaSet(ka, kb, kc, kmu, const, kdd, gw, s_g, s_w, point)


def flow_guard(mu, T_low, T_max):
    """Largest |f| for which one step from T_low stays below T_max.

    Any flow above it overheats the line in one period under the nonlinear
    map, so the bound is implied by the thermal model and only keeps the
    linearisation from being extrapolated.
    """
    head = T_max - mu[..., 0] - mu[..., 1] * T_low
    c, d = mu[..., 2], mu[..., 3]
    head = np.maximum(head, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(d > 0, (-c + np.sqrt(c * c + 4 * d * head)) / (2 * np.where(d > 0, d, 1.0)),
                     head / np.maximum(c, 1e-300))
    return np.sqrt(np.maximum(y, 0.0))


# --------------------------------------------------------------------------
# program


@dataclass
class MultiModel:
    case: SystemCase
    cfg: MultiPeriodConfig
    mode: str
    program: ConicProgram
    ptdf: PtdfMatrix
    idx: dict
    kappas: KappaSet | None
    s_g: np.ndarray
    s_w: np.ndarray
    sigma_Omega: np.ndarray  # (H,)
    flow_limits: np.ndarray | None  # (n_e, H) for SLR / reference mode
    guard: np.ndarray | None
    sigma_factor: np.ndarray | None  # L with Σ_ς = L Lᵀ
    T_init: np.ndarray
    T_max: np.ndarray


def build_multi(case: SystemCase, jc: JointCovariance, kappas: KappaSet | None, cfg: MultiPeriodConfig,
                S=None, mode=None) -> MultiModel:
    """Assemble the multi-period program.  ``mode`` overrides cfg.rating_mode."""
    mode = cfg.rating_mode if mode is None else mode
    S = ptdf(case) if S is None else S
    H = case.horizon
    gens, edges = case.generators, case.edges
    n_g, n_e = len(gens), len(edges)
    d = case.loads()
    w = case.wind_forecast()
    s_g, s_w = injection_maps(case, S.S)
    sig_O = np.asarray(jc.sigma_Omega, dtype=float)
    sd = np.sqrt(np.clip(sig_O, 0.0, None)) * cfg.delta
    thermal = mode in ("DLR", "CC_DLR")
    if thermal and kappas is None:
        raise ValueError(f"mode {mode} needs a KappaSet")
    T_init = case.initial_temperatures()
    T_max = np.array([e.conductor.max_temp_C for e in edges])

    prog = ConicProgram()
    p = prog.add_var("p", (n_g, H))
    alpha = prog.add_var("alpha", (n_g, H), lb=0.0)
    r_up = prog.add_var("r_up", (n_g, H))
    r_dn = prog.add_var("r_dn", (n_g, H))
    f = prog.add_var("f", (n_e, H))
    idx = {"p": p, "alpha": alpha, "r_up": r_up, "r_dn": r_dn, "f": f}

    for k, g in enumerate(gens):
        for t in range(H):
            prog.add_objective(g.c1 * Affine.var(p[k, t]))
            prog.add_quadratic(("cost", k, t), g.c2,
                               [Affine.var(p[k, t]), np.sqrt(max(sig_O[t], 0.0)) * Affine.var(alpha[k, t])])
            prog.add_objective(cfg.tie_break * (Affine.var(r_up[k, t]) + Affine.var(r_dn[k, t])))

    for t in range(H):
        prog.add_eq(("bal", t), Affine.lin(p[:, t], np.ones(n_g)), float(d[t].sum() - w[t].sum()))
        prog.add_eq(("alpha", t), Affine.lin(alpha[:, t], np.ones(n_g)), 1.0)
        for k, g in enumerate(gens):
            P, Ru, Rd = Affine.var(p[k, t]), Affine.var(r_up[k, t]), Affine.var(r_dn[k, t])
            prog.add_ineq(("p_max", k, t), P + Ru, g.p_max)
            prog.add_ineq(("p_min", k, t), g.p_min - P + Rd)
            prog.add_ineq(("re_up", k, t), sd[t] * Affine.var(alpha[k, t]) - Ru)
            prog.add_ineq(("re_dn", k, t), sd[t] * Affine.var(alpha[k, t]) - Rd)
        for e in range(n_e):
            inj = Affine.lin(p[:, t], s_g[e], float(s_w[e] @ w[t] - S.S[e] @ d[t]))
            prog.add_eq(("f", e, t), Affine.var(f[e, t]) - inj)
    for k, g in enumerate(gens):
        for t in range(H - 1):
            P0, P1 = Affine.var(p[k, t]), Affine.var(p[k, t + 1])
            prog.add_ineq(("rr_up", k, t), P1 - P0 + Affine.var(r_up[k, t + 1]) + Affine.var(r_dn[k, t]), g.ramp_up)
            prog.add_ineq(("rr_dn", k, t), P0 - P1 + Affine.var(r_dn[k, t + 1]) + Affine.var(r_up[k, t]), g.ramp_dn)

    limits = guard = factor = None
    if not thermal:
        if mode == "SLR":
            limits = np.repeat(line_ratings(case, "SLR", 0)[:, None], H, axis=1)
        else:
            limits = np.stack([line_ratings(case, "DLR", t) for t in range(H)], axis=1)
        for e in range(n_e):
            for t in range(H):
                prog.add_ineq(("F_up", e, t), Affine.var(f[e, t]), limits[e, t])
                prog.add_ineq(("F_dn", e, t), -Affine.var(f[e, t]), limits[e, t])
    else:
        T = prog.add_var("T", (n_e, H + 1))
        idx["T"] = T
        T_amb = np.array([[case.edge_weather(e, t).ambient_temp_C for t in range(H)] for e in range(n_e)])
        T_low = np.minimum(T_amb, T_init[:, None])
        guard = flow_guard(kappas.point.mu, T_low, T_max[:, None])
        cc = mode == "CC_DLR"
        if cc:
            rth = prog.add_var("rth", (n_e, H + 1))
            idx["rth"] = rth
            kdd = np.transpose(kappas.kappa_dot_d, (1, 0, 2))
            validate_dominance(jc, kappa_dot_d=kdd, raise_on_violation=True)
            factor = psd_factor(jc.sigma_varsigma)
            for e in range(n_e):
                for t in range(1, H + 1):
                    prog.add_objective(cfg.tie_break * Affine.var(rth[e, t]))
        for e in range(n_e):
            prog.add_eq(("T0", e), Affine.var(T[e, 0]), float(T_init[e]))
            if cc:
                prog.add_eq(("Rth0", e), Affine.var(rth[e, 0]))
            for t in range(H):
                rhs = (kappas.const[e, t] + kappas.kappa_b[e, t] * Affine.var(T[e, t])
                       + kappas.kappa_c[e, t] * Affine.var(f[e, t]))
                prog.add_eq(("T", e, t), Affine.var(T[e, t + 1]) - rhs)
                prog.add_ineq(("G_up", e, t), Affine.var(f[e, t]), float(guard[e, t]))
                prog.add_ineq(("G_dn", e, t), -Affine.var(f[e, t]), float(guard[e, t]))
            for t in range(1, H + 1):
                lhs = Affine.var(T[e, t]) + (Affine.var(rth[e, t]) if cc else 0.0)
                prog.add_ineq(("T_max", e, t), lhs, float(T_max[e]))
            if not cc:
                continue
            for t in range(H):
                share = Affine.lin(alpha[:, t], s_g[e])
                a = [float(sw) - share for sw in s_w[e]]
                gw = kappas.gamma_w[t]
                u = []
                for v in range(factor.shape[0]):
                    expr = Affine(const=float(kappas.kappa_dot_d[e, t, v]))
                    for j in range(len(a)):
                        if gw[j, v] != 0.0:
                            expr = expr + (kappas.kappa_c[e, t] * gw[j, v]) * a[j]
                    u.append(expr)
                cone = [cfg.delta * sum((factor[v, j] * u[v] for v in range(len(u)) if factor[v, j] != 0.0), Affine())
                        for j in range(factor.shape[1])]
                prog.add_soc(("th", e, t), cone,
                             Affine.var(rth[e, t + 1]) - kappas.kappa_b[e, t] * Affine.var(rth[e, t]))
    return MultiModel(case, cfg, mode, prog, S, idx, kappas, s_g, s_w, sig_O, limits, guard, factor, T_init, T_max)


# --------------------------------------------------------------------------
# duals, prices, stationarity


def _collect_duals(model: MultiModel, sol: ConicSolution):
    case = model.case
    H, n_g, n_e = case.horizon, len(case.generators), len(case.edges)
    g = sol.dual
    dd = {
        "bal": np.array([g(("bal", t)) for t in range(H)]),
        "alpha": np.array([g(("alpha", t)) for t in range(H)]),
        "f": np.array([[g(("f", e, t)) for t in range(H)] for e in range(n_e)]).reshape(n_e, H),
    }
    for name in ("p_max", "p_min", "re_up", "re_dn"):
        dd[name] = np.array([[g((name, k, t)) for t in range(H)] for k in range(n_g)]).reshape(n_g, H)
    for name in ("rr_up", "rr_dn"):
        dd[name] = np.array([[g((name, k, t)) for t in range(H - 1)] for k in range(n_g)]).reshape(n_g, H - 1)
    dd["alpha_lb"] = np.array([[g(("lb", "alpha", k * H + t)) for t in range(H)] for k in range(n_g)]).reshape(n_g, H)
    for name in ("F_up", "F_dn", "T", "G_up", "G_dn", "th"):
        dd[name] = np.array([[g((name, e, t)) for t in range(H)] for e in range(n_e)]).reshape(n_e, H)
    dd["T_max"] = np.array([[0.0] + [g(("T_max", e, t)) for t in range(1, H + 1)] for e in range(n_e)]).reshape(n_e, H + 1)
    return dd


def thermal_delivery(model: MultiModel, alpha, duals):
    """Σ_e λ^th_{e,t} δ ∂‖Lᵀu_{e,t}‖/∂α_{i,t}  -> (n_g, H).  Q^m = gradient / δ."""
    H = model.case.horizon
    out = np.zeros((len(model.case.generators), H))
    if model.mode != "CC_DLR":
        return out
    kp, L = model.kappas, model.sigma_factor
    sig = L @ L.T
    for e in range(len(model.case.edges)):
        for t in range(H):
            lam = duals["th"][e, t]
            if lam == 0.0:
                continue
            a = kp.kappa_dot(e, alpha[:, t])
            u = kp.kappa_c[e, t] * (kp.gamma_w[t].T @ a) + kp.kappa_dot_d[e, t]
            nrm = float(np.sqrt(max(u @ sig @ u, 0.0)))
            if nrm <= 1e-12:
                continue
            du_dshare = -kp.kappa_c[e, t] * kp.gamma_w[t].sum(axis=0)  # ∂u/∂(s_gᵀα)
            out[:, t] += lam * model.cfg.delta * float(sig @ u @ du_dshare) / nrm * kp.s_g[e]
    return out


def prices_multi(model: MultiModel, sol: ConicSolution, duals=None):
    """Nodal prices per period and both reserve-price routes per generator."""
    duals = _collect_duals(model, sol) if duals is None else duals
    case, cfg = model.case, model.cfg
    S = model.ptdf.S
    H = case.horizon
    lmp = duals["bal"][None, :] - S.T @ duals["f"]
    lmrp = duals["re_up"] + duals["re_dn"]
    alpha = sol.x[model.idx["alpha"]]
    c2 = np.array([g.c2 for g in case.generators])[:, None]
    deliv = thermal_delivery(model, alpha, duals)
    sd = np.sqrt(np.clip(model.sigma_Omega, 0.0, None)) * cfg.delta
    with np.errstate(divide="ignore", invalid="ignore"):
        lmrp_alpha = (duals["alpha"][None, :] + duals["alpha_lb"] - 2 * c2 * model.sigma_Omega[None, :] * alpha
                      - deliv) / sd[None, :]
    lmrp_alpha[:, sd < 1e-9] = np.nan

    # temporal form: λ^f = κc λ^T + guard terms, and λ^T carries the future caps
    if model.mode in ("DLR", "CC_DLR"):
        kp = model.kappas
        lamT, capT = duals["T"], duals["T_max"]
        carried = capT[:, 1:].copy()
        carried[:, :-1] += kp.kappa_b[:, 1:] * lamT[:, 1:]
        flow_price = kp.kappa_c * carried + duals["G_up"] - duals["G_dn"]
        lmp_temporal = duals["bal"][None, :] - S.T @ flow_price
        # the expanded form as printed (diagnostic only)
        nxt = np.zeros_like(lamT)
        nxt[:, :-1] = kp.kappa_b[:, 1:] * lamT[:, 1:]
        prev = np.zeros_like(lamT)
        prev[:, 1:] = lamT[:, :-1]
        printed = nxt - capT[:, 1:] + (prev + capT[:, :-1]) / kp.kappa_b
        lmp_printed = duals["bal"][None, :] - 0.5 * S.T @ printed
    else:
        lmp_temporal = duals["bal"][None, :] - S.T @ (duals["F_up"] - duals["F_dn"])
        lmp_printed = lmp_temporal.copy()
    return {
        "lmp": lmp, "lmp_temporal": lmp_temporal, "lmp_printed": lmp_printed,
        "lmrp": lmrp, "lmrp_alpha": lmrp_alpha, "delivery": deliv,
        "alpha_price": duals["alpha"][None, :] - deliv,
    }


def kkt_residuals_multi(model: MultiModel, x, duals):
    """Scaled stationarity residuals for every variable block."""
    case, cfg = model.case, model.cfg
    H = case.horizon
    c1 = np.array([g.c1 for g in case.generators])[:, None] * np.ones((1, H))
    c2 = np.array([g.c2 for g in case.generators])[:, None] * np.ones((1, H))
    p = x[model.idx["p"]]
    alpha = x[model.idx["alpha"]]
    sd = np.sqrt(np.clip(model.sigma_Omega, 0.0, None)) * cfg.delta
    z = np.zeros_like(p)

    def shift_prev(a):  # a[:, t-1] aligned to t, zero at t = 0
        out = np.zeros((a.shape[0], H))
        out[:, 1:] = a
        return out

    def shift_same(a):  # a[:, t] for t < H-1, zero at the last period
        out = np.zeros((a.shape[0], H))
        out[:, :-1] = a
        return out

    rr_u, rr_d = duals["rr_up"], duals["rr_dn"]
    terms_p = [c1, 2 * c2 * p, -duals["bal"][None, :] + z, duals["p_max"], -duals["p_min"],
               -shift_same(rr_u), shift_prev(rr_u), shift_same(rr_d), -shift_prev(rr_d),
               model.s_g.T @ duals["f"]]
    terms_a = [2 * c2 * model.sigma_Omega[None, :] * alpha, -duals["alpha"][None, :] + z,
               (duals["re_up"] + duals["re_dn"]) * sd[None, :], thermal_delivery(model, alpha, duals),
               -duals["alpha_lb"]]
    tb = cfg.tie_break + z
    terms_up = [tb, duals["p_max"], -duals["re_up"], shift_prev(rr_u), shift_same(rr_d)]
    terms_dn = [tb, duals["p_min"], -duals["re_dn"], shift_same(rr_u), shift_prev(rr_d)]

    def scaled(terms):
        arr = np.array(terms)
        return np.abs(arr.sum(axis=0)) / (1.0 + np.max(np.abs(arr), axis=0))

    out = {"p": scaled(terms_p), "alpha": scaled(terms_a), "r_up": scaled(terms_up), "r_dn": scaled(terms_dn)}
    if model.mode in ("DLR", "CC_DLR"):
        kp = model.kappas
        lamT, cap = duals["T"], duals["T_max"]
        out["f"] = scaled([-duals["f"], kp.kappa_c * lamT, duals["G_up"], -duals["G_dn"]])
        # T_{e,s} for s = 1..H
        nxt = np.zeros_like(lamT)
        nxt[:, :-1] = kp.kappa_b[:, 1:] * lamT[:, 1:]
        out["T"] = scaled([-lamT, nxt, cap[:, 1:]])
        if model.mode == "CC_DLR":
            th = duals["th"]
            nxt_th = np.zeros_like(th)
            nxt_th[:, :-1] = kp.kappa_b[:, 1:] * th[:, 1:]
            out["rth"] = scaled([cfg.tie_break + 0 * th, -th, nxt_th, cap[:, 1:]])
    else:
        out["f"] = scaled([-duals["f"], duals["F_up"], -duals["F_dn"]])
    return out


# --------------------------------------------------------------------------
# driver


@dataclass
class MultiResult:
    mode: str
    p: np.ndarray
    alpha: np.ndarray
    r_up: np.ndarray
    r_dn: np.ndarray
    flows: np.ndarray
    temps: np.ndarray
    rth: np.ndarray
    sim_temps: np.ndarray
    objective: float
    duals: dict
    lmp: np.ndarray
    lmp_temporal: np.ndarray
    lmp_printed: np.ndarray
    lmrp: np.ndarray
    lmrp_alpha: np.ndarray
    thermal_delivery: np.ndarray
    alpha_price: np.ndarray
    kkt: dict
    iterations: list
    converged: bool
    degenerate: bool = False
    warnings: list = field(default_factory=list)
    model: MultiModel = field(default=None, repr=False)
    solution: ConicSolution = field(default=None, repr=False)

    @property
    def kappas(self):
        return self.model.kappas


def minimal_thermal_reserve(model: MultiModel, x):
    """Smallest feasible R^th: the cone recursion held with equality.

    R^th carries no cost, so on lines whose limit is slack any larger value
    is optimal too.  The recursion from R^th_0 = 0 picks the one reserve that
    is implied by the uncertainty, and it never exceeds the solved value.
    """
    case = model.case
    H, n_e = case.horizon, len(case.edges)
    cones = {c.tag: c for c in model.program.cones}
    out = np.zeros((n_e, H + 1))
    kb = model.kappas.kappa_b
    for e in range(n_e):
        for t in range(H):
            spread = float(np.linalg.norm([u.value(x) for u in cones[("th", e, t)].u]))
            out[e, t + 1] = kb[e, t] * out[e, t] + spread
    return out


def result_from_solution(model: MultiModel, sol: ConicSolution, iterations=None, converged=True,
                         strict=False, log_level=logging.WARNING) -> MultiResult:
    case = model.case
    x = sol.x
    duals = _collect_duals(model, sol)
    pr = prices_multi(model, sol, duals)
    H, n_e = case.horizon, len(case.edges)
    flows = x[model.idx["f"]]
    alpha = x[model.idx["alpha"]]
    temps = x[model.idx["T"]] if "T" in model.idx else np.full((n_e, H + 1), np.nan)
    rth = minimal_thermal_reserve(model, x) if "rth" in model.idx else np.zeros((n_e, H + 1))
    mu = coefficient_table(case) if model.kappas is None else model.kappas.point.mu
    sim = simulate_map(mu, model.T_init, flows)
    res = np.sqrt(np.clip(model.sigma_Omega, 0.0, None))[None, :] * model.cfg.delta
    warnings = []
    finite = np.isfinite(pr["lmrp_alpha"])
    gap = float(np.max(np.abs(pr["lmrp"] - pr["lmrp_alpha"])[finite], initial=0.0))
    if gap > ROUTE_TOL:
        warnings.append(f"LMRP routes disagree by {gap:.3g}")
        log.log(log_level, warnings[-1])
        if strict:
            raise DegenerateDuals(warnings[-1])
    return MultiResult(
        mode=model.mode, p=x[model.idx["p"]], alpha=alpha,
        r_up=res * np.clip(alpha, 0.0, None), r_dn=res * np.clip(alpha, 0.0, None),
        flows=flows, temps=temps, rth=rth, sim_temps=sim, objective=sol.objective, duals=duals,
        lmp=pr["lmp"], lmp_temporal=pr["lmp_temporal"], lmp_printed=pr["lmp_printed"],
        lmrp=pr["lmrp"], lmrp_alpha=pr["lmrp_alpha"], thermal_delivery=pr["delivery"],
        alpha_price=pr["alpha_price"], kkt=kkt_residuals_multi(model, x, duals),
        iterations=iterations or [], converged=converged, degenerate=bool(warnings),
        warnings=warnings, model=model, solution=sol,
    )


def solve_fixed(case, jc, kappas, cfg, S=None, mode=None, strict=False, log_level=logging.WARNING) -> MultiResult:
    """Solve once at a given linearisation (no re-expansion)."""
    model = build_multi(case, jc, kappas, cfg, S, mode)
    return result_from_solution(model, solve(model.program), strict=strict, log_level=log_level)


def reference_flows(case, jc, cfg, S=None):
    """Deterministic dispatch under steady-state ratings (the starting point)."""
    ref_cfg = MultiPeriodConfig(cfg.epsilon, "DLR", cfg.max_iters, cfg.tol_C, cfg.tie_break)
    model = build_multi(case, jc, None, ref_cfg, S, mode=_STEADY)
    sol = solve(model.program)
    return sol.x[model.idx["f"]]


def kappas_at(case, jc, point: LinearizationPoint, S=None) -> KappaSet:
    S = ptdf(case) if S is None else S
    s_g, s_w = injection_maps(case, S.S)
    sens = jc.sens
    return linearize_evolution(point.mu, point, sens.gamma_mu, sens.gamma_w, s_g, s_w)


def successive_linearization(case: SystemCase, jc: JointCovariance, cfg: MultiPeriodConfig, S=None,
                             reference=None, strict=False) -> MultiResult:
    """Solve, re-expand at the new trajectory, repeat until temperatures settle.

    The stopping test compares the linearised temperatures of the latest
    solution with the nonlinear map rolled over the same flows.  ``reference``
    may supply starting flows (n_e, H).
    """
    S = ptdf(case) if S is None else S
    if not cfg.thermal:
        res = solve_fixed(case, jc, None, cfg, S, strict=strict)
        res.iterations = [{"iteration": 1, "max_dT": 0.0, "objective": res.objective}]
        return res
    mu = coefficient_table(case)
    T0 = case.initial_temperatures()
    flows = reference_flows(case, jc, cfg, S) if reference is None else np.asarray(reference, dtype=float)
    log_rows = []
    result = None
    for it in range(1, cfg.max_iters + 1):
        point = LinearizationPoint.from_flows(mu, T0, flows)
        kappas = kappas_at(case, jc, point, S)
        # iterates are provisional; only the final answer's warnings are raised
        result = solve_fixed(case, jc, kappas, cfg, S, log_level=logging.DEBUG)
        gap = float(np.max(np.abs(result.temps - result.sim_temps)))
        log_rows.append({"iteration": it, "max_dT": gap, "objective": result.objective})
        log.info("linearisation %d: max |T_lin - T_map| = %.4g degC, objective %.6g", it, gap, result.objective)
        if gap <= cfg.tol_C:
            result.iterations = log_rows
            result.converged = True
            for w in result.warnings:
                log.warning(w)
            if strict and result.warnings:
                raise DegenerateDuals(result.warnings[0])
            return result
        flows = result.flows
    result.iterations = log_rows
    result.converged = False
    msg = f"successive linearisation did not settle within {cfg.max_iters} iterations"
    result.warnings.append(msg)
    log.warning(msg)
    if strict:
        raise NoConvergence(msg)
    return result


def lmp_from_lagrangian(result: MultiResult, node: int, t: int, jc):
    """∂L/∂d_{node,t} from raw multipliers, at the result's linearisation."""
    model = result.model
    case = model.case
    bumped = build_multi(case.with_load_delta(case.node_ids[node], t, 1.0), jc, model.kappas, model.cfg,
                         model.ptdf, model.mode).program
    return constant_sensitivity(model.program, bumped, result.solution)
