"""Correlated wind-power / line-rating forecast-error model.

Every weather site carries three ambient forecast-error variables, in the
order of :data:`AMBIENT_VARS`.  Wind output, steady ratings and the
temperature-map coefficients are linearised in those variables, so all
their errors are jointly Gaussian with covariances ``Γᵀ Σ_ς Γ``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DominanceViolated, IndexMismatch, NonPhysicalInput
from .thermal import WeatherSample, evolution_coefficients, steady_state_rating

log = logging.getLogger(__name__)

AMBIENT_VARS = ("wind_speed_m_s", "wind_direction_deg", "ambient_temp_C")
N_AMBIENT = len(AMBIENT_VARS)
RIDGE = 1e-10


def wind_power(rho, area, v, capacity_MW=None):
    """Kinetic power ½ρAv³ through the rotor disc, in MW."""
    rho = np.asarray(rho, dtype=float)
    area = np.asarray(area, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(rho <= 0) or np.any(area <= 0) or np.any(v < 0):
        raise NonPhysicalInput("wind_power needs rho > 0, area > 0, v >= 0")
    p = 0.5 * rho * area * v**3 / 1e6
    if capacity_MW is not None:
        p = np.minimum(p, capacity_MW)
    return float(p) if p.ndim == 0 else p


def _is_psd(m, tol=1e-9):
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    return bool(np.all(np.linalg.eigvalsh(m) >= -tol * scale))


def psd_factor(m):
    """Return L with L @ L.T == m for a symmetric PSD matrix (eigenvalue clip)."""
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class AmbientErrorModel:
    """Covariance Σ_ς of the stacked per-site ambient forecast errors."""

    sigma_varsigma: np.ndarray
    sites: tuple

    def __post_init__(self):
        s = np.asarray(self.sigma_varsigma, dtype=float)
        n = N_AMBIENT * len(self.sites)
        if s.shape != (n, n):
            raise IndexMismatch(f"sigma_varsigma is {s.shape}, expected {(n, n)} for {len(self.sites)} sites")
        if not np.allclose(s, s.T, atol=1e-12):
            raise NonPhysicalInput("sigma_varsigma is not symmetric")
        if not _is_psd(s):
            raise NonPhysicalInput("sigma_varsigma is not positive semidefinite")
        object.__setattr__(self, "sigma_varsigma", 0.5 * (s + s.T))
        object.__setattr__(self, "sites", tuple(self.sites))

    @property
    def size(self):
        return N_AMBIENT * len(self.sites)

    def block(self, site):
        try:
            k = self.sites.index(site)
        except ValueError:
            raise IndexMismatch(f"unknown weather site {site!r}") from None
        return slice(N_AMBIENT * k, N_AMBIENT * (k + 1))

    @classmethod
    def from_site_stats(cls, sites, std, corr=None, cross_site_corr=0.0):
        """Build Σ_ς from per-site standard deviations.

        ``std`` maps site -> 3 standard deviations, ``corr`` is the 3x3
        within-site correlation (identity by default), and the cross block
        between sites s, k is ``r L_s L_kᵀ`` with L the within-site factor.
        ``cross_site_corr`` is a scalar r or a site-by-site matrix.
        """
        sites = tuple(sites)
        n = len(sites)
        corr = np.eye(N_AMBIENT) if corr is None else np.asarray(corr, dtype=float)
        chol = np.linalg.cholesky(corr + 1e-15 * np.eye(N_AMBIENT))
        factors = [np.diag(np.asarray(std[s], dtype=float)) @ chol for s in sites]
        r = np.asarray(cross_site_corr, dtype=float)
        R = r if r.ndim == 2 else np.full((n, n), float(r))
        np.fill_diagonal(R, 1.0)
        if not _is_psd(R):
            raise NonPhysicalInput("cross-site correlation matrix is not PSD")
        sig = np.zeros((N_AMBIENT * n, N_AMBIENT * n))
        for a in range(n):
            for b in range(n):
                sig[N_AMBIENT * a:N_AMBIENT * (a + 1), N_AMBIENT * b:N_AMBIENT * (b + 1)] = (
                    R[a, b] * factors[a] @ factors[b].T
                )
        return cls(sig, sites)

    def scaled(self, factor):
        return AmbientErrorModel(self.sigma_varsigma * factor, self.sites)


@dataclass(frozen=True)
class SensitivitySet:
    """Gradients wrt the stacked ambient vector, one row per period.

    gamma_w:  (T, n_wind, n_var)   wind output [MW per unit]
    gamma_f:  (T, n_edge, n_var)   steady rating [MW per unit]
    gamma_mu: (T, n_edge, 4, n_var) temperature-map coefficients mu_a..mu_d
    """

    gamma_w: np.ndarray
    gamma_f: np.ndarray
    gamma_mu: np.ndarray
    wind_ids: tuple = ()
    edge_ids: tuple = ()


def _fd_step(x):
    return max(1e-4, 1e-4 * abs(x))


def _central(fn, w: WeatherSample, name):
    x = float(getattr(w, name))
    h = _fd_step(x)
    lo = x - h
    if name == "wind_speed_m_s" and lo < 0:
        # one-sided at the boundary of the domain
        return (np.asarray(fn(w.perturbed(name, h))) - np.asarray(fn(w))) / h
    return (np.asarray(fn(w.perturbed(name, h))) - np.asarray(fn(w.perturbed(name, -h)))) / (2 * h)


def site_gradient(fn, w: WeatherSample):
    """Central-difference gradient of ``fn(weather)`` wrt the ambient variables.

    Returns an array with the ambient axis last.
    """
    cols = [_central(fn, w, name) for name in AMBIENT_VARS]
    return np.stack(cols, axis=-1)


def sensitivities(case, weather=None, dt_s=None) -> SensitivitySet:
    """Finite-difference sensitivities for every wind farm and line of ``case``.

    ``weather`` defaults to ``case.weather`` ({site: [WeatherSample]*T}).
    Wind gradients are taken on the unclipped power curve.
    """
    weather = case.weather if weather is None else weather
    dt_s = case.period_s if dt_s is None else dt_s
    model = case.ambient
    T = case.horizon
    n_var = model.size
    gw = np.zeros((T, len(case.wind_farms), n_var))
    gf = np.zeros((T, len(case.edges), n_var))
    gmu = np.zeros((T, len(case.edges), 4, n_var))
    for t in range(T):
        for k, farm in enumerate(case.wind_farms):
            w = weather[farm.site][t]
            rho = farm.rho

            def power(ws, rho=rho, area=farm.area):
                r = ws.air_density_kg_m3 if rho is None else rho
                return wind_power(r, area, ws.wind_speed_m_s)

            gw[t, k, model.block(farm.site)] = site_gradient(power, w)
        for k, edge in enumerate(case.edges):
            w = weather[edge.site][t]
            blk = model.block(edge.site)
            spec = edge.conductor
            gf[t, k, blk] = site_gradient(lambda ws, s=spec: steady_state_rating(s, ws), w)
            gmu[t, k, :, blk] = site_gradient(
                lambda ws, s=spec: evolution_coefficients(s, ws, dt_s).as_array(), w
            )
    return SensitivitySet(
        gw, gf, gmu,
        wind_ids=tuple(f.id for f in case.wind_farms),
        edge_ids=tuple(e.id for e in case.edges),
    )


@dataclass(frozen=True)
class JointCovariance:
    """Per-period joint covariances of wind and rating/coefficient errors.

    Leading axis is the period.  ``sigma_omega_xi`` stacks (ω, ξ) and
    ``sigma_omega_varsigma`` stacks (ω, ς).
    """

    sigma_omega: np.ndarray          # (T, n_w, n_w)
    sigma_Omega: np.ndarray          # (T,)
    b_omega_e: np.ndarray            # (T, n_e, n_w)   Cov(ω, ξ_e)
    sigma_le: np.ndarray             # (T, n_e)        std of ξ_e
    sigma_omega_xi: np.ndarray       # (T, n_w+n_e, n_w+n_e)
    sigma_omega_varsigma: np.ndarray # (T, n_w+n_var, n_w+n_var)
    sigma_varsigma: np.ndarray       # (n_var, n_var)
    sens: SensitivitySet = field(repr=False, default=None)
    rating_std_overridden: np.ndarray = None  # (n_e,) bool

    @property
    def horizon(self):
        return self.sigma_omega.shape[0]

    @property
    def n_wind(self):
        return self.sigma_omega.shape[1]

    def omega_xi_cov(self, t, e):
        """2x2-block covariance of (ω, ξ_e) at period t."""
        n = self.n_wind
        c = np.zeros((n + 1, n + 1))
        c[:n, :n] = self.sigma_omega[t]
        c[:n, n] = c[n, :n] = self.b_omega_e[t, e]
        c[n, n] = self.sigma_le[t, e] ** 2
        return c


def assemble_covariance(model: AmbientErrorModel, sens: SensitivitySet, rating_std_override=None) -> JointCovariance:
    """Σ_ωξ = Γᵀ Σ_ς Γ with Γ = [γ_w columns | γ_f columns], per period.

    ``rating_std_override`` maps edge index -> σ_le replacing γ_fᵀΣ_ςγ_f.
    """
    S = model.sigma_varsigma
    n_var = S.shape[0]
    if sens.gamma_w.shape[-1] != n_var or sens.gamma_f.shape[-1] != n_var:
        raise IndexMismatch(
            f"sensitivity width {sens.gamma_w.shape[-1]}/{sens.gamma_f.shape[-1]} != Σ_ς size {n_var}"
        )
    T, n_w, _ = sens.gamma_w.shape
    n_e = sens.gamma_f.shape[1]
    so = np.zeros((T, n_w, n_w))
    sox = np.zeros((T, n_w + n_e, n_w + n_e))
    sos = np.zeros((T, n_w + n_var, n_w + n_var))
    b = np.zeros((T, n_e, n_w))
    sle = np.zeros((T, n_e))
    over = np.zeros(n_e, dtype=bool)
    rating_std_override = rating_std_override or {}
    for t in range(T):
        G = np.concatenate([sens.gamma_w[t], sens.gamma_f[t]], axis=0).T  # n_var x (n_w+n_e)
        joint = G.T @ S @ G
        joint = 0.5 * (joint + joint.T)
        for e, std in rating_std_override.items():
            joint[n_w + e, n_w + e] = float(std) ** 2
            over[e] = True
        sox[t] = joint
        so[t] = joint[:n_w, :n_w]
        b[t] = joint[n_w:, :n_w]
        sle[t] = np.sqrt(np.clip(np.diag(joint)[n_w:], 0.0, None))
        Gs = np.concatenate([sens.gamma_w[t].T, np.eye(n_var)], axis=1)
        m = Gs.T @ S @ Gs
        sos[t] = 0.5 * (m + m.T)
    sigma_Omega = so.sum(axis=(1, 2))
    return JointCovariance(so, sigma_Omega, b, sle, sox, sos, S, sens, over)


@dataclass(frozen=True)
class DominanceReport:
    edge: int
    period: int
    lhs: float
    rhs: float

    @property
    def ok(self):
        return self.lhs <= self.rhs * (1 + 1e-9) + 1e-12


def _inv_quad(sig, b):
    """bᵀ Σ⁻¹ b with a ridge when Σ is singular."""
    if not np.any(b):
        return 0.0
    n = sig.shape[0]
    try:
        np.linalg.cholesky(sig)
        reg = sig
    except np.linalg.LinAlgError:
        log.info("Σ_ω singular; adding ridge %g", RIDGE)
        reg = sig + RIDGE * np.eye(n)
    return float(b @ np.linalg.solve(reg, b))


def validate_dominance(jc: JointCovariance, kappa_dot_d=None, raise_on_violation=False, periods=None):
    """Check the square-root radicands of the flow / thermal-reserve cones.

    Single-period form: b_ωeᵀ Σ_ω⁻¹ b_ωe ≤ σ_le².  When ``kappa_dot_d``
    (T, n_e, n_var) is given, the multi-period form is checked instead:
    (C κ̇)ᵀ Σ_ω⁻¹ (C κ̇) ≤ κ̇ᵀ Σ_ς κ̇ with C = Cov(ω, ς).  ``periods``
    restricts the check to a subset of periods.
    """
    reports = []
    T, n_e = jc.sigma_le.shape
    n_w = jc.n_wind
    for t in range(T) if periods is None else periods:
        for e in range(n_e):
            if kappa_dot_d is None:
                lhs = _inv_quad(jc.sigma_omega[t], jc.b_omega_e[t, e])
                rhs = float(jc.sigma_le[t, e] ** 2)
            else:
                kd = np.asarray(kappa_dot_d[t][e], dtype=float)
                cross = jc.sigma_omega_varsigma[t][:n_w, n_w:] @ kd
                lhs = _inv_quad(jc.sigma_omega[t], cross)
                rhs = float(kd @ jc.sigma_varsigma @ kd)
            r = DominanceReport(e, t, lhs, rhs)
            if raise_on_violation and not r.ok:
                ids = jc.sens.edge_ids if jc.sens is not None and jc.sens.edge_ids else None
                raise DominanceViolated(ids[e] if ids else e, lhs, rhs)
            reports.append(r)
    return reports
