"""Command line interface: ``roost {run,worker,resume,summarize}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import logging
import os
import shlex
import sys

import numpy as np

from roost import checkpoint as ckpt
from roost import engine
from roost.explore import ExplorerConfig
from roost.model import Path, bimodal_target, coinflip_target, mvn_target

log = logging.getLogger("roost")

TARGETS = ("coinflip", "bimodal", "mvn", "bridge")
HIST_BINS = 50


class UsageError(Exception):
    pass


def _add_run_flags(p):
    g = p.add_argument_group("target")
    g.add_argument("--target", choices=TARGETS, required=True)
    g.add_argument("--n", type=int, default=100000, help="coinflip: number of tosses")
    g.add_argument("--y", type=int, default=50000, help="coinflip: number of heads")
    g.add_argument("--sep", type=float, default=2.0, help="bimodal: mode offset c")
    g.add_argument("--sd", type=float, default=0.5, help="bimodal: component sd")
    g.add_argument("--dim", type=int, default=None, help="mvn/bridge: dimension")
    g.add_argument("--ref-sd", type=float, default=2.0, help="mvn: reference sd")
    g.add_argument("--cmd", default=None, help="bridge: command line of the density process")
    r = p.add_argument_group("run")
    r.add_argument("--chains", type=int, default=10)
    r.add_argument("--rounds", type=int, default=10)
    r.add_argument("--seed", type=int, default=1)
    r.add_argument("--record", default="online,round_trip",
                   help="comma list of traces, online, round_trip, disk")
    r.add_argument("--explorer", choices=("slice", "rwm"), default="slice")
    r.add_argument("--output", default=".", help="directory receiving results/")
    r.add_argument("--checkpoint", action="store_true")
    t = p.add_argument_group("topology")
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--backend", choices=("auto",) + engine.BACKENDS, default="auto")


def build_parser():
    parser = argparse.ArgumentParser(prog="roost", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run parallel tempering")
    _add_run_flags(p_run)

    p_worker = sub.add_parser("worker", help="join a socket topology as one rank")
    _add_run_flags(p_worker)
    p_worker.add_argument("--rank", type=int, required=True)
    p_worker.add_argument("--from", dest="source", default=None,
                          help="checkpoint to resume from (all ranks must agree)")
    p_worker.add_argument("--rendezvous-timeout", type=float, default=30.0)

    p_resume = sub.add_parser("resume", help="continue from a checkpoint")
    p_resume.add_argument("--from", dest="source", default=os.path.join("results", "latest"))
    p_resume.add_argument("--workers", type=int, default=1)
    p_resume.add_argument("--threads", type=int, default=1)
    p_resume.add_argument("--backend", choices=("auto",) + engine.BACKENDS, default="auto")

    p_sum = sub.add_parser("summarize", help="marginal summaries and gnuplot data from traces")
    p_sum.add_argument("--input", required=True, help="run directory or output directory")
    p_sum.add_argument("--output", default=None, help="defaults to the run directory")
    return parser


def target_spec(args):
    """Validated, JSON-able description of the target flags."""
    if args.target == "coinflip":
        if args.n < 0 or args.y < 0 or args.y > args.n:
            raise UsageError(f"coinflip needs 0 <= y <= n (got n={args.n}, y={args.y})")
        return {"target": "coinflip", "n": args.n, "y": args.y}
    if args.target == "bimodal":
        if args.sep <= 0 or args.sd <= 0:
            raise UsageError("--sep and --sd must be positive")
        return {"target": "bimodal", "sep": args.sep, "sd": args.sd}
    if args.target == "mvn":
        dim = 2 if args.dim is None else args.dim
        if dim < 1 or args.ref_sd <= 0:
            raise UsageError("--dim must be >= 1 and --ref-sd positive")
        return {"target": "mvn", "dim": dim, "ref_sd": args.ref_sd}
    if not args.cmd:
        raise UsageError("--target bridge needs --cmd")
    if args.dim is None or args.dim < 1:
        raise UsageError("--target bridge needs --dim >= 1")
    return {"target": "bridge", "cmd": shlex.split(args.cmd), "dim": args.dim}


def build_path(spec):
    kind = spec["target"]
    if kind == "coinflip":
        return Path(*coinflip_target(spec["n"], spec["y"]))
    if kind == "bimodal":
        return Path(*bimodal_target(spec["sep"], spec["sd"]))
    if kind == "mvn":
        return Path(*mvn_target(spec["dim"], spec["ref_sd"]))
    if kind == "bridge":
        from roost.bridge import BridgeTarget
        from roost.model import UniformBox
        return Path(BridgeTarget(spec["cmd"], spec["dim"]), UniformBox(spec["dim"]))
    raise UsageError(f"unknown target {kind!r}")


def build_config(args):
    record = frozenset(s.strip() for s in args.record.split(",") if s.strip())
    unknown = record - engine.RECORDERS
    if unknown:
        raise UsageError(f"unknown recorder(s): {', '.join(sorted(unknown))}")
    if args.chains < 2:
        raise UsageError("--chains must be >= 2")
    if args.rounds < 1:
        raise UsageError("--rounds must be >= 1")
    if not 0 <= args.seed < 2**64:
        raise UsageError("--seed must fit in 64 unsigned bits")
    _check_topology(args, args.chains)
    return engine.RunConfig(n_chains=args.chains, n_rounds=args.rounds, seed=args.seed,
                            record=record, checkpoint=args.checkpoint,
                            explorer=ExplorerConfig(kind=args.explorer),
                            output_dir=args.output)


def _check_topology(args, n_chains):
    if args.workers < 1 or args.threads < 1:
        raise UsageError("--workers and --threads must be >= 1")
    if args.workers > n_chains:
        raise UsageError(f"--workers ({args.workers}) cannot exceed the number of chains ({n_chains})")
    if args.backend == "sequential" and (args.workers > 1 or args.threads > 1):
        raise UsageError("the sequential backend takes one worker and one thread")


def _backend(args):
    if args.backend != "auto":
        return args.backend
    if args.workers > 1:
        return "sockets"
    return "threads" if args.threads > 1 else "sequential"


def _multi_host(args):
    return args.workers > 1 and bool(os.environ.get("ROOST_HOSTFILE")) and _backend(args) == "sockets"


def _run_as_rank(rank, n_workers, job, connect_timeout=30.0):
    from roost.transport import SocketTransport, peer_addresses
    with SocketTransport(rank, peer_addresses(n_workers), connect_timeout=connect_timeout) as t:
        return job(t)


def cmd_run(args):
    spec = target_spec(args)
    config = build_config(args)
    path = build_path(spec)
    if _multi_host(args):
        state = engine.initial_state(config, path, {"target": spec})
        run_dir = engine.new_run_dir(config.output_dir)
        job = engine._Job(state, path, args.threads, run_dir, progress=sys.stdout)
        result = _run_as_rank(1, args.workers, job)
    else:
        result = engine.run(config, path, backend=_backend(args), n_workers=args.workers,
                            n_threads=args.threads, progress=sys.stdout, meta={"target": spec})
    print(f"results: {result.run_dir}")
    return 0


def cmd_worker(args):
    if args.rank < 2 or args.rank > args.workers:
        raise UsageError(f"--rank must be in 2..{args.workers} (rank 1 is the run command)")
    if args.source:
        file, _ = ckpt.locate(args.source)
        state = ckpt.load(file)
        path = build_path(state.meta["target"])
    else:
        spec = target_spec(args)
        config = build_config(args)
        path = build_path(spec)
        state = engine.initial_state(config, path, {"target": spec})
    job = engine._Job(state, path, args.threads, None)
    _run_as_rank(args.rank, args.workers, job, args.rendezvous_timeout)
    return 0


def cmd_resume(args):
    file, run_dir = ckpt.locate(args.source)
    state = ckpt.load(file)
    if state.round >= state.config.n_rounds:
        print(f"run in {run_dir} already completed {state.round} of {state.config.n_rounds} rounds; nothing to do")
        return 0
    if "target" not in state.meta:
        raise ckpt.CheckpointError("checkpoint does not record its target; resume it through the Python API")
    _check_topology(args, state.config.n_chains)
    path = build_path(state.meta["target"])
    result = engine.execute(state, path, backend=_backend(args), n_workers=args.workers,
                            n_threads=args.threads, run_dir=run_dir, progress=sys.stdout)
    print(f"results: {result.run_dir}")
    return 0


def _find_run_dir(path):
    latest = os.path.join(path, "results", "latest")
    if os.path.isfile(latest):
        with open(latest) as f:
            return f.read().strip()
    return path


def summarize_trace(rows, bins=HIST_BINS):
    """Per-marginal summaries of ``(scan, state)`` rows."""
    x = np.array([r[1] for r in rows], dtype=float)
    out = []
    for k in range(x.shape[1]):
        col = x[:, k]
        counts, edges = np.histogram(col, bins=bins)
        out.append({
            "name": f"x{k + 1}",
            "mean": float(col.mean()),
            "variance": float(col.var(ddof=1)) if len(col) > 1 else 0.0,
            "min": float(col.min()),
            "max": float(col.max()),
            "histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
        })
    return out


def _read_rows(run_dir):
    trace = os.path.join(run_dir, "trace.csv")
    if os.path.isfile(trace):
        return engine.read_trace_csv(trace)[1]
    sample_dir = os.path.join(run_dir, "samples")
    rows = []
    if os.path.isdir(sample_dir):
        names = sorted(os.listdir(sample_dir), key=lambda s: int(s.split("_")[1].split(".")[0]))
        if names:
            rows = engine.read_trace_csv(os.path.join(sample_dir, names[-1]))[1]
    return rows


GNUPLOT_SCRIPT = """\
set terminal pngcairo size 1000,{height}
set output 'summary.png'
set multiplot layout {dim},2
{panels}unset multiplot
"""


def cmd_summarize(args):
    run_dir = _find_run_dir(args.input)
    if not os.path.isdir(run_dir):
        print(f"roost summarize: no such directory {run_dir}", file=sys.stderr)
        return 1
    rows = _read_rows(run_dir)
    if not rows:
        print(f"roost summarize: no traces found in {run_dir} (run with --record traces or disk)",
              file=sys.stderr)
        return 1
    out_dir = args.output or run_dir
    os.makedirs(out_dir, exist_ok=True)
    marginals = summarize_trace(rows)
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump({"samples": len(rows), "marginals": marginals}, f, indent=1)
        f.write("\n")
    with open(os.path.join(out_dir, "trace.dat"), "w") as f:
        f.write("# scan " + " ".join(m["name"] for m in marginals) + "\n")
        for scan, x in rows:
            f.write(f"{scan} " + " ".join(repr(float(v)) for v in x) + "\n")
    panels = []
    for k, m in enumerate(marginals, start=1):
        edges = m["histogram"]["edges"]
        with open(os.path.join(out_dir, f"hist_x{k}.dat"), "w") as f:
            f.write("# bin_center count\n")
            for lo, hi, c in zip(edges, edges[1:], m["histogram"]["counts"]):
                f.write(f"{repr(0.5 * (lo + hi))} {c}\n")
        panels.append(f"set title 'trace x{k}'\nplot 'trace.dat' using 1:{k + 1} with lines notitle\n")
        panels.append(f"set title 'density x{k}'\nplot 'hist_x{k}.dat' using 1:2 with boxes notitle\n")
    with open(os.path.join(out_dir, "summary.gnuplot"), "w") as f:
        f.write(GNUPLOT_SCRIPT.format(height=300 * len(marginals), dim=len(marginals),
                                      panels="".join(panels)))
    for m in marginals:
        print(f"{m['name']}: mean {m['mean']:.6g}  var {m['variance']:.6g}  "
              f"min {m['min']:.6g}  max {m['max']:.6g}")
    print(f"summary: {os.path.join(out_dir, 'summary.json')}")
    return 0


COMMANDS = {"run": cmd_run, "worker": cmd_worker, "resume": cmd_resume, "summarize": cmd_summarize}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"roost: error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"roost: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
