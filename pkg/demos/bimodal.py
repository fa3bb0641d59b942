"""Two well-separated modes: a lone random-walk chain stays where it starts,
while parallel tempering visits both modes in equal proportion."""

from roost import ExplorerConfig, Path, RunConfig, bimodal_target, explore, new_rng, run

path = Path(*bimodal_target(2.0, 0.5))
logp = path.interpolate(1.0)

rng = new_rng(1)
x = [2.0, 2.0]
upper = 0
for _ in range(4096):
    x = explore(x, logp, rng, ExplorerConfig(kind="rwm"))
    upper += x[0] > 0 and x[1] > 0
print(f"single chain: {upper / 4096:.3f} of samples in the starting mode")

res = run(RunConfig(n_chains=10, n_rounds=12, seed=1, record={"traces"}), path)
states = [s for _, s in res.trace]
frac = sum(1 for s in states if s[0] > 0 and s[1] > 0) / len(states)
print(f"parallel tempering: {frac:.3f} of target-chain samples in the upper mode")
