"""Sampling the forecast errors to see how often each chance constraint breaks."""
from dlrmarket import covariance_for, load_case
from dlrmarket.analysis import monte_carlo_validate
from dlrmarket.data import fixture_path
from dlrmarket.market_multi import MultiPeriodConfig, successive_linearization
from dlrmarket.market_single import SinglePeriodConfig, solve_single

case = load_case(fixture_path("case3_transient"))
jc = covariance_for(case)

for eps in (0.01, 0.05, 0.10):
    single = monte_carlo_validate(solve_single(case, jc, SinglePeriodConfig(eps, "CC_DLR")), jc, seed=1)
    multi = monte_carlo_validate(successive_linearization(case, jc, MultiPeriodConfig(eps, "CC_DLR")), jc, seed=1)
    temp = max(row.rate for row in multi.rows if row.constraint == "temperature")
    print(f"eps {eps:.2f}: worst single-period rate {single.max_rate:.4f}, "
          f"worst multi-period rate {multi.max_rate:.4f}, worst temperature rate {temp:.4f}")

rep = monte_carlo_validate(solve_single(case, jc, SinglePeriodConfig(0.05, "CC_DLR")), jc, seed=1)
print("\nrows at eps = 0.05 (rate and 95 % Wilson interval):")
for row in rep.rows:
    tag = "" if row.chance_constrained else "  (informational)"
    print(f"  {row.constraint:13s} {row.index}: {row.rate:.4f} [{row.ci_low:.4f}, {row.ci_high:.4f}]{tag}")
