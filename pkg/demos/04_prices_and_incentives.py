"""Do the posted prices support the dispatch?  Best responses and emissions."""
import numpy as np

from dlrmarket import covariance_for, load_case
from dlrmarket.analysis import emissions, equilibrium_check, lme
from dlrmarket.data import fixture_path
from dlrmarket.market_single import SinglePeriodConfig, solve_single

case = load_case(fixture_path("case3_congested"))
jc = covariance_for(case)
r = solve_single(case, jc, SinglePeriodConfig(0.05, "CC_DLR"))

rep = equilibrium_check(r)
print(f"equilibrium holds: {rep.ok} (largest relative profit gap {rep.max_gap:.2e})")
for g in rep.rows:
    print(f"  {g.gen_id}: dispatched profit {g.dispatched_profit:10.2f}, best response {g.best_profit:10.2f}")

marginal = lme(r)
print(f"\nmarginal units {marginal.marginal[0]}, method {marginal.method}")
for i, node in enumerate(case.node_ids):
    print(f"  {node}: LME {marginal.lme[i, 0]:.3f} kg/kWh")
print(f"emissions this hour: {np.round(emissions(r)[:, 0], 1)} kg by generator")
