"""The same seed gives the same samples whatever the number of threads or processes.

The sockets backend spawns worker processes that re-import this script, so
the work sits under a main guard.
"""

from roost import Path, RunConfig, coinflip_target, run


def main():
    path = Path(*coinflip_target(100000, 50000))
    config = RunConfig(n_chains=10, n_rounds=7, seed=1, record={"traces"})
    setups = [("sequential", 1, 1), ("threads", 1, 4), ("threads", 5, 1), ("sockets", 4, 1)]
    traces = {}
    for backend, workers, threads in setups:
        res = run(config, path, backend=backend, n_workers=workers, n_threads=threads)
        traces[(backend, workers, threads)] = res.trace
        print(f"{backend:10s} workers={workers} threads={threads}: "
              f"log Z {res.reports[-1].log_z_ratio!r}, last state {res.trace[-1][1]}")
    print("identical traces:", len({tuple(t) for t in traces.values()}) == 1)


if __name__ == "__main__":
    main()
