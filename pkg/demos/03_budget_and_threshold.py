"""Turning a budget into a cloud share, and the share into a threshold."""

import numpy as np

from prsroute.strategy import Budget, budget_to_rate, calibrate_threshold, destination

# a cloud call costs 2.0 and we can afford 0.95 per request on average
fee_only = Budget(cloud_cost=2.0, fee_budget=0.95)
print("fee bound ->", budget_to_rate(fee_only))

# add a 5 s latency budget: cloud 10 s, edge 2 s, router 0.5 s
both = Budget(cloud_cost=2.0, fee_budget=0.95, time_budget=5.0,
              cloud_latency=10.0, edge_latency=2.0, router_latency=0.5)
rho = budget_to_rate(both)
print("fee + latency bound ->", rho)

# predicted scores on a calibration set; cloud gets the lowest ones
preds = np.random.default_rng(2).beta(4, 4, size=1000)
alpha = calibrate_threshold(preds, rho)
share = np.mean(preds < alpha)
print(f"alpha = {alpha:.4f}, calibration cloud share = {share:.3f} <= {rho}")

# alpha never exceeds 1/2: a prompt the edge already wins on stays on the edge
print("alpha at rho = 0.9:", calibrate_threshold(preds, 0.9))
print(destination(0.31, alpha), destination(0.62, alpha))
