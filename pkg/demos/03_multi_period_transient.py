"""Four periods on the transient case: heat as a stock rather than a flow cap."""
import numpy as np

from dlrmarket import covariance_for, load_case
from dlrmarket.data import fixture_path
from dlrmarket.market_multi import MULTI_MODES, MultiPeriodConfig, successive_linearization
from dlrmarket.market_single import line_ratings
from dlrmarket.thermal import integrate_transient

case = load_case(fixture_path("case3_transient"))
jc = covariance_for(case)
e = case.edge_index("L13")

runs = {m: successive_linearization(case, jc, MultiPeriodConfig(0.05, m)) for m in MULTI_MODES}
for mode, r in runs.items():
    print(f"{mode:7s} cost {r.objective:10.2f}, linearisations {len(r.iterations)}")

r = runs["DLR"]
steady = [line_ratings(case, "DLR", t)[e] for t in range(case.horizon)]
print("\nL13 under DLR, period by period:")
for t in range(case.horizon):
    print(f"  t={t}: flow {r.flows[e, t]:7.1f} MW, steady rating {steady[t]:7.1f} MW, "
          f"end temperature {r.temps[e, t + 1]:6.2f} degC")

edge = case.edges[e]
ws = [case.edge_weather(e, t) for t in range(case.horizon)]
T = integrate_transient(edge.conductor, ws, np.abs(r.flows[e]), case.period_s, case.initial_temperatures()[e])
print(f"RK4 re-simulation: {np.round(T, 2)} degC (limit {edge.conductor.max_temp_C})")

cc = runs["CC_DLR"]
print(f"\nthermal reserve on L13 under CC_DLR: {np.round(cc.rth[e], 3)} degC")
print("iteration log:", [(row["iteration"], round(row["max_dT"], 4)) for row in cc.iterations])
