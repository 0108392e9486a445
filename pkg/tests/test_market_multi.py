import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlrmarket.errors import NoConvergence
from dlrmarket.grid import ptdf
from dlrmarket.market_multi import (
    MULTI_MODES,
    LinearizationPoint,
    MultiPeriodConfig,
    coefficient_table,
    flow_guard,
    kappas_at,
    linearize_evolution,
    lmp_from_lagrangian,
    reference_flows,
    simulate_map,
    solve_fixed,
    successive_linearization,
)
from dlrmarket.market_single import SinglePeriodConfig, solve_single
from dlrmarket.thermal import integrate_transient

MU = np.array([[[20.0, 0.4, 2e-4, 1e-10], [22.0, 0.35, 2.2e-4, 1.2e-10]]])  # one line, two periods


class TestLinearisation:
    def test_zero_flow_has_no_flow_slope(self):
        point = LinearizationPoint.from_flows(MU, [40.0], np.zeros((1, 2)))
        k = linearize_evolution(MU, point)
        assert np.all(k.kappa_c == 0.0)
        assert np.allclose(k.kappa_b, MU[..., 1])

    @settings(max_examples=40, deadline=None)
    @given(f0=st.floats(-400, 400), f1=st.floats(-400, 400), T0=st.floats(10, 90))
    def test_exact_at_point(self, f0, f1, T0):
        flows = np.array([[f0, f1]])
        point = LinearizationPoint.from_flows(MU, [T0], flows)
        k = linearize_evolution(MU, point)
        for t in range(2):
            pred = k.predict(0, t, point.T[0, t], flows[0, t])
            assert pred == pytest.approx(point.T[0, t + 1], abs=1e-9)
            assert k.const[0, t] + k.kappa_b[0, t] * point.T[0, t] + k.kappa_c[0, t] * flows[0, t] == \
                pytest.approx(point.T[0, t + 1], abs=1e-9)

    def test_first_order_in_flow(self):
        flows = np.array([[250.0, 300.0]])
        point = LinearizationPoint.from_flows(MU, [50.0], flows)
        k = linearize_evolution(MU, point)
        h = 1e-3
        step = lambda T, f: MU[0, 0, 0] + MU[0, 0, 1] * T + MU[0, 0, 2] * f**2 + MU[0, 0, 3] * f**4
        fd = (step(50.0, 250.0 + h) - step(50.0, 250.0 - h)) / (2 * h)
        assert k.kappa_c[0, 0] == pytest.approx(fd, rel=1e-8)
        # the neglected curvature is second order
        err = abs(step(50.0, 260.0) - k.predict(0, 0, 50.0, 260.0))
        assert err == pytest.approx((MU[0, 0, 2] + 6 * MU[0, 0, 3] * 250.0**2) * 100, rel=0.05)

    def test_mu_slopes(self):
        point = LinearizationPoint.from_flows(MU, [50.0], np.array([[100.0, 120.0]]))
        k = linearize_evolution(MU, point)
        assert np.allclose(k.kappa_mu[0, 0], [1.0, 50.0, 100.0**2, 100.0**4])

    def test_rejects_inconsistent_point(self):
        point = LinearizationPoint.from_flows(MU, [40.0], np.zeros((1, 2)))
        bad = LinearizationPoint(point.T + 1.0, point.f, point.mu)
        with pytest.raises(ValueError, match="violates"):
            linearize_evolution(MU, bad)

    def test_flow_guard(self):
        T_low, T_max = 30.0, 100.0
        g = flow_guard(MU, T_low, T_max)
        nxt = MU[..., 0] + MU[..., 1] * T_low + MU[..., 2] * g**2 + MU[..., 3] * g**4
        assert np.allclose(nxt, T_max)
        hot = flow_guard(MU, 500.0, T_max)
        assert np.all(hot == 0.0)

    def test_kappa_uncertainty_shapes(self, transient):
        case, jc = transient
        mu = coefficient_table(case)
        point = LinearizationPoint.from_flows(mu, case.initial_temperatures(), np.full((3, 4), 100.0))
        k = kappas_at(case, jc, point)
        assert k.kappa_dot_d.shape == (3, 4, case.ambient.size)
        a = k.kappa_dot(0, np.array([0.5, 0.5]))
        assert a.shape == (len(case.wind_farms),)


class TestSolutions:
    def test_single_period_reduction(self, congested):
        case, jc = congested
        multi = successive_linearization(case, jc, MultiPeriodConfig(0.05, "SLR"))
        single = solve_single(case, jc, SinglePeriodConfig(0.05, "SLR"))
        assert multi.objective == pytest.approx(single.objective, rel=1e-8)
        assert np.allclose(multi.lmp[:, 0], single.lmp, atol=1e-6)
        assert np.allclose(multi.p[:, 0], single.p, atol=1e-5)

    @pytest.mark.parametrize("mode", MULTI_MODES)
    def test_kkt(self, multi_results, mode):
        r = multi_results[mode]
        assert max(float(np.max(v)) for v in r.kkt.values()) <= 1e-6

    @pytest.mark.parametrize("mode", MULTI_MODES)
    def test_lmp_routes(self, multi_results, transient, mode):
        case, jc = transient
        r = multi_results[mode]
        for i, t in itertools.product(range(case.n_nodes), range(case.horizon)):
            assert lmp_from_lagrangian(r, i, t, jc) == pytest.approx(r.lmp[i, t], abs=1e-6)
        assert np.allclose(r.lmp_temporal, r.lmp, atol=1e-6)

    @pytest.mark.parametrize("mode", MULTI_MODES)
    def test_lmrp_routes(self, multi_results, mode):
        r = multi_results[mode]
        ok = np.isfinite(r.lmrp_alpha)
        assert np.allclose(r.lmrp[ok], r.lmrp_alpha[ok], atol=1e-5)

    def test_balances_and_bounds(self, multi_results, transient):
        case, _ = transient
        d = case.loads().sum(axis=1)
        w = case.wind_forecast().sum(axis=1)
        for r in multi_results.values():
            assert np.allclose(r.p.sum(axis=0), d - w, atol=1e-6)
            assert np.allclose(r.alpha.sum(axis=0), 1.0, atol=1e-8)
            for k, g in enumerate(case.generators):
                assert np.all(r.p[k] + r.r_up[k] <= g.p_max + 1e-6)
                assert np.all(r.p[k] - r.r_dn[k] >= g.p_min - 1e-6)
                step = np.diff(r.p[k])
                assert np.all(step + r.r_up[k, 1:] + r.r_dn[k, :-1] <= g.ramp_up + 1e-6)

    def test_temperatures_within_limit(self, multi_results):
        for mode in ("DLR", "CC_DLR"):
            r = multi_results[mode]
            assert np.all(r.temps <= r.model.T_max[:, None] + 1e-6)
            assert np.max(np.abs(r.temps - r.sim_temps)) <= 0.1

    def test_cost_ordering(self, multi_results):
        c = {m: r.objective for m, r in multi_results.items()}
        assert c["DLR"] <= c["CC_DLR"] <= c["SLR"]

    def test_transient_overload(self, multi_results, transient):
        # the bottleneck runs above its steady rating while it heats up
        case, _ = transient
        from dlrmarket.market_single import line_ratings

        r = multi_results["DLR"]
        e = case.edge_index("L13")
        steady = np.array([line_ratings(case, "DLR", t)[e] for t in range(case.horizon)])
        assert np.any(np.abs(r.flows[e]) > steady + 1.0)

    def test_zero_uncertainty_has_no_thermal_reserve(self, zero_unc):
        case, jc = zero_unc
        cc = successive_linearization(case, jc, MultiPeriodConfig(0.05, "CC_DLR"))
        dlr = successive_linearization(case, jc, MultiPeriodConfig(0.05, "DLR"))
        assert np.allclose(cc.rth, 0.0, atol=1e-7)
        assert cc.objective == pytest.approx(dlr.objective, rel=1e-7)


class TestConvergence:
    def test_iteration_log(self, multi_results):
        for mode in ("DLR", "CC_DLR"):
            r = multi_results[mode]
            assert r.converged and len(r.iterations) <= 5
            assert r.iterations[-1]["max_dT"] <= 0.1

    def test_warm_start_settles_immediately(self, multi_results, transient):
        case, jc = transient
        r0 = multi_results["DLR"]
        r = successive_linearization(case, jc, MultiPeriodConfig(0.05, "DLR"), reference=r0.flows)
        assert len(r.iterations) == 1
        assert r.objective == pytest.approx(r0.objective, rel=1e-4)

    def test_strict_no_convergence(self, transient):
        case, jc = transient
        cfg = MultiPeriodConfig(0.05, "DLR", max_iters=1)
        loose = successive_linearization(case, jc, cfg)
        assert not loose.converged and loose.warnings
        with pytest.raises(NoConvergence):
            successive_linearization(case, jc, cfg, strict=True)

    def test_config(self):
        with pytest.raises(ValueError):
            MultiPeriodConfig(0.05, "DLR", max_iters=0)
        assert not MultiPeriodConfig(0.05, "SLR").thermal

    def test_reference_respects_steady_ratings(self, transient):
        case, jc = transient
        f = reference_flows(case, jc, MultiPeriodConfig(0.05, "DLR"))
        from dlrmarket.market_single import line_ratings

        lim = np.array([line_ratings(case, "DLR", t) for t in range(case.horizon)]).T
        assert np.all(np.abs(f) <= lim + 1e-6)


def test_local_brute_force_dlr(multi_results, transient):
    """No nearby dispatch on a grid beats the linearised optimum by more than 0.5 %."""
    case, _ = transient
    r = multi_results["DLR"]
    gens = case.generators
    S = ptdf(case).S
    Cg, Cw = case.gen_incidence(), case.wind_incidence()
    d, w = case.loads(), case.wind_forecast()
    mu = coefficient_table(case)
    T0 = case.initial_temperatures()
    c1 = np.array([g.c1 for g in gens])
    c2 = np.array([g.c2 for g in gens])
    sig = r.model.sigma_Omega
    H = case.horizon
    offsets = np.arange(-16.0, 16.1, 4.0)
    best = np.inf
    for combo in itertools.product(offsets, repeat=H):
        p1 = r.p[0] + np.array(combo)
        p = np.vstack([p1, (d.sum(1) - w.sum(1)) - p1])
        if np.any(p - r.r_dn < [[g.p_min] for g in gens]) or np.any(p + r.r_up > [[g.p_max] for g in gens]):
            continue
        step = np.diff(p, axis=1)
        ramp = np.array([[g.ramp_up] for g in gens])
        if np.any(step + r.r_up[:, 1:] + r.r_dn[:, :-1] > ramp) or np.any(-step + r.r_dn[:, 1:] + r.r_up[:, :-1] > ramp):
            continue
        flows = S @ (Cg @ p + Cw @ w.T - d.T)
        T = simulate_map(mu, T0, flows)
        if np.any(T > 100.0 + 0.02):
            continue
        cost = float(np.sum(c1[:, None] * p + c2[:, None] * (p**2 + sig[None, :] * r.alpha**2)))
        best = min(best, cost)
    assert np.isfinite(best)
    assert best >= r.objective * (1 - 0.005)


def test_rk4_resimulation_stays_near_limit(multi_results, transient):
    case, _ = transient
    r = multi_results["DLR"]
    for e, edge in enumerate(case.edges):
        ws = [case.edge_weather(e, t) for t in range(case.horizon)]
        T = integrate_transient(edge.conductor, ws, np.abs(r.flows[e]), case.period_s, case.initial_temperatures()[e])
        assert np.max(T) <= edge.conductor.max_temp_C + 0.5


def test_reported_thermal_reserve_is_minimal(multi_results):
    r = multi_results["CC_DLR"]
    solved = r.solution.x[r.model.idx["rth"]]
    assert np.all(r.rth <= solved + 1e-7)
    assert np.all(r.temps[:, 1:] + r.rth[:, 1:] <= r.model.T_max[:, None] + 1e-6)
    assert np.all(r.rth[:, 1:] > 0)
