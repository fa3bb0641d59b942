"""Coin-flip model: estimate log Z and the posterior mean of p1.

Two coins are tossed together 100000 times; 50000 tosses show two heads,
so the likelihood depends on p1 * p2 only and the posterior is a ridge.
"""

import sys

from roost import Path, RunConfig, coinflip_target, print_report, run

path = Path(*coinflip_target(100000, 50000))
config = RunConfig(n_chains=10, n_rounds=10, seed=1, record={"traces", "online", "round_trip"})
result = run(config, path)
print_report(result.reports, file=sys.stdout)

final = result.reports[-1]
print(f"log Z estimate: {final.log_z_ratio:.4f}  (quadrature: -11.8794)")
print(f"communication barrier: {final.lambda_:.3f}, suggesting about {2 * final.lambda_:.0f} chains")
print(f"posterior mean of (p1, p2): {result.online.mean[0]:.3f}, {result.online.mean[1]:.3f}")
print(f"restarts: {result.restarts}, round trips: {result.round_trips}")
