"""Single-period chance-constrained DC-OPF in conic form, with nodal prices.

Sign conventions
----------------
Wind output is ``w + ω`` with ω ~ N(0, Σ_ω), and generators follow the
affine recourse ``g_i = p_i − α_i Ω`` with Ω = Σω.  The flow deviation on
line e is then ``a_e(α)ᵀ ω`` with

    a_e(α) = s_w,e − (s_g,eᵀ α) 1

where s_g,e / s_w,e are the PTDF row restricted to generator / wind-farm
nodes.  The rating error ξ_e enters as ``f ≤ f_max + ξ``.  With C_e the
joint covariance of (ω, ξ_e) and C_e = L Lᵀ, the two flow chance
constraints become

    f + δ‖Lᵀ[a; −1]‖ ≤ f_max        (upper)
   −f + δ‖Lᵀ[a; +1]‖ ≤ f_max        (lower)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import DegenerateDuals
from .grid import PtdfMatrix, SystemCase, ptdf
from .socp import ZERO_DUAL, Affine, ConicProgram, ConicSolution, solve
from .thermal import steady_state_rating
from .uncertainty import JointCovariance, psd_factor, validate_dominance

log = logging.getLogger(__name__)

RATING_MODES = ("SLR", "DLR", "CC_DLR")
TIE_BREAK = 0.0  # optional $/MW on reserves
ROUTE_TOL = 1e-5


def normalise_mode(mode: str) -> str:
    m = mode.upper().replace("-", "_")
    if m not in RATING_MODES:
        raise ValueError(f"rating_mode must be one of {RATING_MODES}, got {mode!r}")
    return m


@dataclass(frozen=True)
class SinglePeriodConfig:
    epsilon: float = 0.05
    rating_mode: str = "CC_DLR"
    period: int = 0
    tie_break: float = TIE_BREAK

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")
        object.__setattr__(self, "rating_mode", normalise_mode(self.rating_mode))

    @property
    def delta(self) -> float:
        return float(norm.ppf(1.0 - self.epsilon))


# --------------------------------------------------------------------------
# helpers shared with the multi-period model


def injection_maps(case: SystemCase, S: np.ndarray):
    """PTDF rows restricted to generators and wind farms: (n_e, n_g), (n_e, n_w)."""
    return S @ case.gen_incidence(), S @ case.wind_incidence()


def deviation_vector(s_g_row, s_w_row, alpha_idx):
    """Affine a(α) = s_w − (s_gᵀα)·1 as a list of Affine (one per wind farm)."""
    share = Affine.lin(alpha_idx, s_g_row)
    return [float(sw) - share for sw in s_w_row]


def line_ratings(case: SystemCase, mode: str, t: int) -> np.ndarray:
    mode = normalise_mode(mode)
    if mode == "SLR":
        return np.array([e.static_rating for e in case.edges], dtype=float)
    return np.array(
        [steady_state_rating(e.conductor, case.edge_weather(k, t)) for k, e in enumerate(case.edges)]
    )


def schur_form_norm(a, sigma_omega, b, sigma_le):
    """‖[Σ^{1/2}(a − Σ⁻¹b); √(σ² − bᵀΣ⁻¹b)]‖, the Schur-complement form of
    ‖Lᵀ[a; −1]‖ for the joint covariance [[Σ, b], [bᵀ, σ²]]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    sig = np.asarray(sigma_omega, dtype=float)
    if a.size == 0:
        return abs(float(sigma_le))
    y = np.linalg.solve(sig, b) if np.any(b) else np.zeros_like(b)
    r = a - y
    tail = float(sigma_le) ** 2 - float(b @ y)
    return float(np.sqrt(max(r @ sig @ r, 0.0) + max(tail, 0.0)))


# --------------------------------------------------------------------------


@dataclass
class SingleModel:
    """A built program plus what is needed to interpret its solution."""

    case: SystemCase
    cfg: SinglePeriodConfig
    program: ConicProgram
    ptdf: PtdfMatrix
    idx: dict
    ratings: np.ndarray
    s_g: np.ndarray
    s_w: np.ndarray
    sigma_Omega: float
    cone_factors: list  # per edge: L with C_e = L Lᵀ (CC_DLR only)
    base_flow: np.ndarray  # flow component that does not depend on p


def build_single(case: SystemCase, jc: JointCovariance, cfg: SinglePeriodConfig, S=None) -> SingleModel:
    """Assemble the conic single-period market-clearing program."""
    t = cfg.period
    S = ptdf(case) if S is None else S
    mode = cfg.rating_mode
    if mode == "CC_DLR":
        validate_dominance(jc, raise_on_violation=True, periods=[t])
    gens = case.generators
    n_g, n_e = len(gens), len(case.edges)
    d = case.loads()[t]
    w = case.wind_forecast()[t]
    s_g, s_w = injection_maps(case, S.S)
    base_flow = s_w @ w - S.S @ d
    ratings = line_ratings(case, mode, t)
    sig_O = float(jc.sigma_Omega[t])
    sd = np.sqrt(max(sig_O, 0.0)) * cfg.delta

    prog = ConicProgram()
    p = prog.add_var("p", (n_g,))
    alpha = prog.add_var("alpha", (n_g,), lb=0.0)
    r_up = prog.add_var("r_up", (n_g,))
    r_dn = prog.add_var("r_dn", (n_g,))

    for k, g in enumerate(gens):
        prog.add_objective(g.c1 * Affine.var(p[k]))
        prog.add_quadratic(("cost", k), g.c2, [Affine.var(p[k]), np.sqrt(sig_O) * Affine.var(alpha[k])])
        prog.add_objective(cfg.tie_break * (Affine.var(r_up[k]) + Affine.var(r_dn[k])))

    prog.add_eq("bal", Affine.lin(p, np.ones(n_g)), float(d.sum() - w.sum()))
    prog.add_eq("alpha", Affine.lin(alpha, np.ones(n_g)), 1.0)
    for k, g in enumerate(gens):
        prog.add_ineq(("p_max", k), Affine.var(p[k]) + Affine.var(r_up[k]), g.p_max)
        prog.add_ineq(("p_min", k), g.p_min - Affine.var(p[k]) + Affine.var(r_dn[k]))
        prog.add_ineq(("re_up", k), sd * Affine.var(alpha[k]) - Affine.var(r_up[k]))
        prog.add_ineq(("re_dn", k), sd * Affine.var(alpha[k]) - Affine.var(r_dn[k]))

    factors = []
    for e in range(n_e):
        flow = Affine.lin(p, s_g[e], base_flow[e])
        if mode != "CC_DLR":
            prog.add_ineq(("F_up", e), flow, ratings[e])
            prog.add_ineq(("F_dn", e), -flow, ratings[e])
            continue
        L = psd_factor(jc.omega_xi_cov(t, e))
        factors.append(L)
        a = deviation_vector(s_g[e], s_w[e], alpha)
        for tag, tail, rhs in ((("F_up", e), -1.0, ratings[e] - flow), (("F_dn", e), 1.0, ratings[e] + flow)):
            v = a + [Affine(const=tail)]
            u = [cfg.delta * sum((L[k, j] * v[k] for k in range(len(v)) if L[k, j] != 0.0), Affine())
                 for j in range(L.shape[1])]
            prog.add_soc(tag, u, rhs)

    idx = {"p": p, "alpha": alpha, "r_up": r_up, "r_dn": r_dn}
    return SingleModel(case, cfg, prog, S, idx, ratings, s_g, s_w, sig_O, factors, base_flow)


# --------------------------------------------------------------------------
# results and prices


@dataclass
class SingleResult:
    mode: str
    p: np.ndarray
    alpha: np.ndarray
    r_up: np.ndarray
    r_dn: np.ndarray
    flows: np.ndarray
    ratings: np.ndarray
    objective: float
    duals: dict
    lmp: np.ndarray
    lmrp: np.ndarray  # λ^re̅ + λ^re̲ per generator
    lmrp_alpha: np.ndarray  # reserve-balance route per generator
    reserve_delivery: np.ndarray  # Σ_e λ_e δ ∂‖·‖/∂α_i
    alpha_price: np.ndarray  # per-unit-α payment rate used in the equilibrium check
    kkt: dict
    degenerate: bool
    warnings: list = field(default_factory=list)
    model: SingleModel = field(default=None, repr=False)
    solution: ConicSolution = field(default=None, repr=False)

    @property
    def lmrp_node(self):
        """LMRP per node: the largest among the node's generators (NaN if none)."""
        case = self.model.case
        out = np.full(case.n_nodes, np.nan)
        for k, g in enumerate(case.generators):
            i = case.node_index(g.node)
            out[i] = self.lmrp[k] if np.isnan(out[i]) else max(out[i], self.lmrp[k])
        return out


def _collect_duals(model: SingleModel, sol: ConicSolution):
    n_g, n_e = len(model.case.generators), len(model.case.edges)
    dd = {"bal": sol.dual("bal"), "alpha": sol.dual("alpha")}
    for name in ("p_max", "p_min", "re_up", "re_dn"):
        dd[name] = np.array([sol.dual((name, k)) for k in range(n_g)])
    for name in ("F_up", "F_dn"):
        dd[name] = np.array([sol.dual((name, e)) for e in range(n_e)])
    dd["alpha_lb"] = np.array([sol.dual(("lb", "alpha", k)) for k in range(n_g)])
    return dd


def cone_norm_gradient(L, s_g_row, s_w_row, alpha, tail):
    """(‖Lᵀv‖, ∂‖Lᵀv‖/∂α) for v = [a(α); tail]."""
    a = s_w_row - float(s_g_row @ alpha)
    v = np.append(a, tail)
    y = L.T @ v
    nrm = float(np.linalg.norm(y))
    if nrm <= 1e-12:
        return nrm, np.zeros_like(alpha)
    cv = L @ y  # C v
    # ∂v/∂α_i = −s_g,i on the wind block
    return nrm, -s_g_row * float(cv[:-1].sum()) / nrm


def reserve_delivery(model: SingleModel, alpha, duals):
    """Σ_e δ (λ^F̅_e ∂‖·‖⁺/∂α + λ^F̲_e ∂‖·‖⁻/∂α) per generator."""
    out = np.zeros(len(alpha))
    if model.cfg.rating_mode != "CC_DLR":
        return out
    for e, L in enumerate(model.cone_factors):
        for name, tail in (("F_up", -1.0), ("F_dn", 1.0)):
            lam = duals[name][e]
            if lam == 0.0:
                continue
            _, g = cone_norm_gradient(L, model.s_g[e], model.s_w[e], alpha, tail)
            out += lam * model.cfg.delta * g
    return out


def kkt_residuals_single(model: SingleModel, x, duals):
    """Scaled stationarity residuals for p, α, R^up, R^dn, evaluated from scratch."""
    case, cfg = model.case, model.cfg
    c1 = np.array([g.c1 for g in case.generators])
    c2 = np.array([g.c2 for g in case.generators])
    p = x[model.idx["p"]]
    alpha = x[model.idx["alpha"]]
    cong = (duals["F_up"] - duals["F_dn"]) @ model.s_g
    sd = np.sqrt(model.sigma_Omega) * cfg.delta
    terms_p = [c1, 2 * c2 * p, duals["p_max"], -duals["p_min"], -duals["bal"] * np.ones_like(p), cong]
    deliv = reserve_delivery(model, alpha, duals)
    terms_a = [2 * c2 * model.sigma_Omega * alpha, -duals["alpha"] * np.ones_like(p),
               (duals["re_up"] + duals["re_dn"]) * sd, deliv, -duals["alpha_lb"]]
    tb = cfg.tie_break * np.ones_like(p)
    terms_up = [tb, duals["p_max"], -duals["re_up"]]
    terms_dn = [tb, duals["p_min"], -duals["re_dn"]]

    def scaled(terms):
        num = np.abs(np.sum(terms, axis=0))
        den = 1.0 + np.max(np.abs(np.array(terms)), axis=0)
        return num / den

    return {"p": scaled(terms_p), "alpha": scaled(terms_a), "r_up": scaled(terms_up), "r_dn": scaled(terms_dn)}


def prices_single(model: SingleModel, sol: ConicSolution, duals=None):
    """LMP per node and both LMRP routes per generator."""
    duals = _collect_duals(model, sol) if duals is None else duals
    case, cfg = model.case, model.cfg
    S = model.ptdf.S
    lmp = duals["bal"] - (duals["F_up"] - duals["F_dn"]) @ S
    lmrp = duals["re_up"] + duals["re_dn"]
    alpha = sol.x[model.idx["alpha"]]
    c2 = np.array([g.c2 for g in case.generators])
    deliv = reserve_delivery(model, alpha, duals)
    sd = np.sqrt(model.sigma_Omega) * cfg.delta
    if sd < 1e-9:
        lmrp_alpha = np.full_like(lmrp, np.nan)
    else:
        lmrp_alpha = (duals["alpha"] + duals["alpha_lb"] - 2 * c2 * model.sigma_Omega * alpha - deliv) / sd
    return lmp, lmrp, lmrp_alpha, deliv


def lmp_from_lagrangian(case, jc, cfg, sol, node, S=None):
    """∂L/∂d_node from the raw multipliers and a rebuilt program (second route)."""
    from .socp import constant_sensitivity

    base = build_single(case, jc, cfg, S).program
    bumped = build_single(case.with_load_delta(case.node_ids[node], cfg.period, 1.0), jc, cfg, S).program
    return constant_sensitivity(base, bumped, sol)


def minimal_reserve(sigma_Omega, delta, alpha):
    """Smallest optimal reserve, √Σ_Ω·δ·α.

    Reserves only appear in constraints that favour smaller values, so the
    optimal face always contains this point; picking it exactly replaces a
    secondary objective that would sit below the solver's resolution.
    """
    return np.sqrt(max(sigma_Omega, 0.0)) * delta * np.clip(alpha, 0.0, None)


def _weakly_active(model, sol, duals):
    """Constraints at their bound with a (near-)zero multiplier."""
    out = []
    for tag, e in model.program.ineqs:
        if abs(e.value(sol.x)) < 1e-7 and abs(sol.dual(tag)) < ZERO_DUAL and tag[0] not in ("lb", "re_up", "re_dn"):
            out.append(tag)
    return out


def solve_single(case: SystemCase, jc: JointCovariance, cfg: SinglePeriodConfig, S=None, strict=False) -> SingleResult:
    """Build, solve and price one period.

    ``strict`` raises :class:`DegenerateDuals` when the two reserve-price
    routes disagree; otherwise the condition is flagged on the result.
    """
    model = build_single(case, jc, cfg, S)
    sol = solve(model.program)
    x = sol.x
    duals = _collect_duals(model, sol)
    lmp, lmrp, lmrp_alpha, deliv = prices_single(model, sol, duals)
    p = x[model.idx["p"]]
    alpha = x[model.idx["alpha"]]
    flows = model.base_flow + model.s_g @ p
    warnings = []
    gap = np.nanmax(np.abs(lmrp - lmrp_alpha)) if np.any(np.isfinite(lmrp_alpha)) else 0.0
    degenerate = bool(gap > ROUTE_TOL)
    weak = _weakly_active(model, sol, duals)
    if weak:
        warnings.append(f"weakly active constraints (duals may be non-unique): {weak}")
    if degenerate:
        msg = f"LMRP routes disagree by {gap:.3g}"
        warnings.append(msg)
        if strict:
            raise DegenerateDuals(msg)
    for w_ in warnings:
        log.warning(w_)
    return SingleResult(
        mode=cfg.rating_mode,
        p=p,
        alpha=alpha,
        r_up=minimal_reserve(model.sigma_Omega, cfg.delta, alpha),
        r_dn=minimal_reserve(model.sigma_Omega, cfg.delta, alpha),
        flows=flows,
        ratings=model.ratings,
        objective=sol.objective,
        duals=duals,
        lmp=lmp,
        lmrp=lmrp,
        lmrp_alpha=lmrp_alpha,
        reserve_delivery=deliv,
        alpha_price=duals["alpha"] - deliv,
        kkt=kkt_residuals_single(model, x, duals),
        degenerate=degenerate or bool(weak),
        warnings=warnings,
        model=model,
        solution=sol,
    )
