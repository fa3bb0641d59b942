"""Round-based non-reversible parallel tempering driver.

Round ``r`` runs ``2**r`` scans of exploration followed by communication.
Between rounds the per-replica statistics are pooled with the fixed-shape
tree reduction, the schedule is re-fitted, and rank 1 reports and writes
artifacts.  Every recorded quantity is a function of the configuration and
the path only, whatever the number of workers or threads.
"""

import json
import math
import os
import pickle
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

from roost import checkpoint as ckpt
from roost.explore import ExplorerConfig, explore
from roost.model import NEG_INF, Schedule, tempered
from roost.reduce import WorkerAssignment, broadcast, distributed_reduce, gather
from roost.rng import SplittableRng, new_rng
from roost.swap import PermutedDistributedArray, communicate
from roost.transport import LocalHub, launch_local, run_threads

RECORDERS = frozenset({"traces", "online", "round_trip", "disk"})
DEFAULT_RECORD = frozenset({"online", "round_trip"})

UNTOUCHED, HIT_REFERENCE, HIT_TARGET = 0, 1, 2


@dataclass(frozen=True)
class RunConfig:
    n_chains: int = 10
    n_rounds: int = 10
    seed: int = 1
    record: frozenset = DEFAULT_RECORD
    checkpoint: bool = False
    explorer: ExplorerConfig = ExplorerConfig()
    output_dir: str = None

    def __post_init__(self):
        object.__setattr__(self, "record", frozenset(self.record))
        unknown = self.record - RECORDERS
        if unknown:
            raise ValueError(f"unknown recorders: {', '.join(sorted(unknown))}")
        if self.n_chains < 2:
            raise ValueError("n_chains must be >= 2")
        if self.n_chains >= 4096:
            raise ValueError("n_chains must be below 4096")
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if (self.checkpoint or "disk" in self.record) and self.output_dir is None:
            raise ValueError("checkpoint and disk recording need an output_dir")

    def to_json(self):
        d = asdict(self)
        d["record"] = sorted(self.record)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["record"] = frozenset(d["record"])
        d["explorer"] = ExplorerConfig(**d["explorer"])
        return cls(**d)


@dataclass
class RoundReport:
    round: int
    scans: int
    restarts: int
    lambda_: float
    time_s: float
    log_z_ratio: float
    min_alpha: float
    mean_alpha: float

    def to_json(self):
        d = {f.name.rstrip("_"): getattr(self, f.name) for f in fields(self)}
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**{("lambda_" if k == "lambda" else k): v for k, v in d.items()})


class OnlineStats:
    """Welford accumulator for the marginals of a vector-valued state."""

    __slots__ = ("count", "mean", "m2", "min", "max")

    def __init__(self, dimension):
        self.count = 0
        self.mean = [0.0] * dimension
        self.m2 = [0.0] * dimension
        self.min = [math.inf] * dimension
        self.max = [-math.inf] * dimension

    def update(self, x):
        self.count += 1
        n = self.count
        for k, v in enumerate(x):
            delta = v - self.mean[k]
            self.mean[k] += delta / n
            self.m2[k] += delta * (v - self.mean[k])
            if v < self.min[k]:
                self.min[k] = v
            if v > self.max[k]:
                self.max[k] = v

    @property
    def variance(self):
        if self.count < 2:
            return [math.nan] * len(self.mean)
        return [m / (self.count - 1) for m in self.m2]

    @staticmethod
    def combine(a, b):
        """Pooled accumulator (Chan et al.); ``a`` and ``b`` are left untouched."""
        if b.count == 0:
            return a
        if a.count == 0:
            return b
        out = OnlineStats(len(a.mean))
        n = a.count + b.count
        out.count = n
        for k in range(len(a.mean)):
            delta = b.mean[k] - a.mean[k]
            out.mean[k] = a.mean[k] + delta * (b.count / n)
            out.m2[k] = a.m2[k] + b.m2[k] + delta * delta * (a.count * b.count / n)
            out.min[k] = min(a.min[k], b.min[k])
            out.max[k] = max(a.max[k], b.max[k])
        return out

    def to_json(self):
        return {"count": self.count, "mean": self.mean, "variance": self.variance,
                "min": self.min, "max": self.max}


class LogSumExp:
    """Running ``log(sum(exp(v)))`` with a term count."""

    __slots__ = ("max", "scaled", "count")

    def __init__(self, max_=NEG_INF, scaled=0.0, count=0):
        self.max = max_
        self.scaled = scaled
        self.count = count

    def add(self, v):
        self.count += 1
        if v == NEG_INF:
            return
        if v > self.max:
            self.scaled = self.scaled * math.exp(self.max - v) + 1.0 if self.scaled else 1.0
            self.max = v
        else:
            self.scaled += math.exp(v - self.max)

    @staticmethod
    def combine(a, b):
        m = max(a.max, b.max)
        if m == NEG_INF:
            return LogSumExp(NEG_INF, 0.0, a.count + b.count)
        s = 0.0
        if a.max != NEG_INF:
            s += a.scaled * math.exp(a.max - m)
        if b.max != NEG_INF:
            s += b.scaled * math.exp(b.max - m)
        return LogSumExp(m, s, a.count + b.count)

    def log_mean(self):
        if self.count == 0:
            raise ValueError("no samples")
        if self.max == NEG_INF:
            return NEG_INF
        return self.max + math.log(self.scaled) - math.log(self.count)

    def __getstate__(self):
        return (self.max, self.scaled, self.count)

    def __setstate__(self, s):
        self.max, self.scaled, self.count = s


class RoundStats:
    """Per-replica statistics for one round; the leaf type of the reductions."""

    def __init__(self, n_chains, dimension, online):
        pairs = n_chains - 1
        self.alpha_sum = [0.0] * pairs
        self.alpha_count = [0] * pairs
        self.increments = [LogSumExp() for _ in range(pairs)]
        self.online = OnlineStats(dimension) if online else None
        self.restarts = 0
        self.round_trips = 0

    @staticmethod
    def combine(a, b):
        out = RoundStats.__new__(RoundStats)
        out.alpha_sum = [x + y for x, y in zip(a.alpha_sum, b.alpha_sum)]
        out.alpha_count = [x + y for x, y in zip(a.alpha_count, b.alpha_count)]
        out.increments = [LogSumExp.combine(x, y) for x, y in zip(a.increments, b.increments)]
        out.online = None if a.online is None else OnlineStats.combine(a.online, b.online)
        out.restarts = a.restarts + b.restarts
        out.round_trips = a.round_trips + b.round_trips
        return out


@dataclass
class Replica:
    index: int
    chain: int
    state: list
    rng: SplittableRng
    flag: int = UNTOUCHED
    restarts: int = 0
    round_trips: int = 0
    path: object = field(default=None, repr=False)
    endpoints: tuple = field(default=None, repr=False)
    stats: RoundStats = field(default=None, repr=False)

    def log_potential(self, beta):
        return tempered(beta, *self.endpoints)


def global_barrier(rejection_rates):
    """Sum of the adjacent-pair rejection rates."""
    total = 0.0
    for r in rejection_rates:
        total += r
    return total


def stepping_stone(increments):
    """``log(Z_target / Z_reference)`` from per-pair :class:`LogSumExp` accumulators
    of ``l_{k+1}(x) - l_k(x)`` over states ``x`` visited at chain ``k``."""
    total = 0.0
    for acc in increments:
        if acc.count == 0:
            raise ValueError("no samples")
        total += acc.log_mean()
    return total


def adapt_schedule(rejection_rates, old):
    """Equi-partition the piecewise-linear cumulative rejection curve.

    ``rejection_rates[k]`` belongs to the pair of chains ``k+1, k+2``.  The
    endpoints stay at 0 and 1; the schedule is returned unchanged if there
    are no rejections or the fitted betas would not be strictly increasing.
    """
    betas = old.betas if isinstance(old, Schedule) else tuple(old)
    n = len(betas)
    if len(rejection_rates) != n - 1:
        raise ValueError(f"need {n - 1} rejection rates, got {len(rejection_rates)}")
    cumulative = [0.0]
    for r in rejection_rates:
        if not 0.0 <= r:
            raise ValueError(f"negative rejection rate {r}")
        cumulative.append(cumulative[-1] + r)
    total = cumulative[-1]
    if total == 0.0 or n == 2:
        return Schedule(betas)
    new = [0.0]
    k = 0
    for j in range(1, n - 1):
        level = total * j / (n - 1)
        while k < n - 2 and (cumulative[k + 1] < level or cumulative[k + 1] == cumulative[k]):
            k += 1
        lo, hi = cumulative[k], cumulative[k + 1]
        frac = (level - lo) / (hi - lo) if hi > lo else 0.0
        frac = min(1.0, max(0.0, frac))
        new.append(betas[k] + frac * (betas[k + 1] - betas[k]))
    new.append(1.0)
    if any(b1 <= b0 for b0, b1 in zip(new, new[1:])):
        return Schedule(betas)
    return Schedule(tuple(new))


REPORT_COLUMNS = ("#scans", "restarts", "Λ", "time(s)", "allc(B)", "log(Z₁/Z₀)", "min(α)", "mean(α)")
_WIDTH = 10


def _fmt(v):
    return f"{v:.3g}"


def report_header():
    rule = "-" * (len(REPORT_COLUMNS) * (_WIDTH + 1))
    names = " ".join(c.rjust(_WIDTH) for c in REPORT_COLUMNS)
    under = " ".join("-" * _WIDTH for _ in REPORT_COLUMNS)
    return f"{rule}\n{names}\n{under}"


def report_footer():
    return "-" * (len(REPORT_COLUMNS) * (_WIDTH + 1))


def report_row(report):
    cells = [_fmt(report.scans), _fmt(report.restarts), _fmt(report.lambda_), _fmt(report.time_s),
             "", _fmt(report.log_z_ratio), _fmt(report.min_alpha), _fmt(report.mean_alpha)]
    return " ".join(c.rjust(_WIDTH) for c in cells)


def record_scan(replica, scan, n_chains, schedule, record, final_round, trace=None):
    """Fold the replica's post-communication position into its recorders."""
    c = replica.chain
    stats = replica.stats
    if c < n_chains:
        inc = replica.log_potential(schedule[c + 1]) - replica.log_potential(schedule[c])
        stats.increments[c - 1].add(inc)
    if c == n_chains:
        if final_round and stats.online is not None:
            stats.online.update(replica.state)
        if trace is not None:
            trace.append((scan, tuple(replica.state)))
    if c == 1:
        if replica.flag == HIT_TARGET:
            replica.round_trips += 1
            stats.round_trips += 1
        replica.flag = HIT_REFERENCE
    elif c == n_chains:
        if replica.flag == HIT_REFERENCE:
            replica.restarts += 1
            stats.restarts += 1
        replica.flag = HIT_TARGET


@dataclass
class EngineState:
    """Everything needed to continue a run after a completed round."""

    config: RunConfig
    round: int
    scan_counter: int
    schedule: tuple
    replicas: list  # ReplicaSnapshot, sorted by replica index
    adapt_rng: tuple
    reports: list
    schedules: list
    meta: dict = field(default_factory=dict)

    def directory(self):
        """Replica index currently at each chain, chains 1..N in order."""
        at = {r.chain: r.index for r in self.replicas}
        return [at[j] for j in range(1, len(self.replicas) + 1)]


@dataclass
class ReplicaSnapshot:
    index: int
    chain: int
    state: tuple
    rng: tuple
    flag: int
    restarts: int
    round_trips: int


def initial_state(config, path, meta=None):
    master = new_rng(config.seed)
    streams = [master.split() for _ in range(config.n_chains)]
    adapt = master.split()
    start = tuple(path.initial)
    snaps = [ReplicaSnapshot(i, i, start, streams[i - 1].state(), UNTOUCHED, 0, 0)
             for i in range(1, config.n_chains + 1)]
    schedule = Schedule.equally_spaced(config.n_chains).betas
    return EngineState(config, 0, 0, schedule, snaps, adapt.state(), [], [schedule], dict(meta or {}))


@dataclass
class RunResult:
    reports: list
    schedules: list
    trace: list
    online: OnlineStats
    restarts: int
    round_trips: int
    run_dir: str = None
    state: EngineState = None

    @property
    def log_z_ratio(self):
        return self.reports[-1].log_z_ratio


class _Job:
    """Picklable per-rank entry point."""

    def __init__(self, state, path, n_threads, run_dir, progress=None, on_round_end=None,
                 force_alpha=None):
        self.state = state
        self.path = path
        self.n_threads = n_threads
        self.run_dir = run_dir
        self.progress = progress
        self.on_round_end = on_round_end
        self.force_alpha = force_alpha

    def __getstate__(self):
        d = dict(self.__dict__)
        d["progress"] = None
        d["on_round_end"] = None
        return d

    def __call__(self, transport):
        return _Worker(self, transport).run()


_enc = pickle.dumps
_dec = pickle.loads


class _Worker:
    def __init__(self, job, transport):
        st = job.state
        self.job = job
        self.transport = transport
        self.rank = transport.rank
        self.config = st.config
        self.n = st.config.n_chains
        self.assignment = WorkerAssignment(self.n, transport.n_workers)
        self.schedule = Schedule(st.schedule)
        self.scan_counter = st.scan_counter
        self.start_round = st.round
        self.state = st
        self.dimension = len(st.replicas[0].state)
        owner = self.assignment.owner
        self.replicas = []
        for s in st.replicas:
            if owner(s.index) != self.rank:
                continue
            rep = Replica(s.index, s.chain, list(s.state), SplittableRng(*s.rng), s.flag,
                          s.restarts, s.round_trips, path=job.path.fork())
            rep.endpoints = rep.path.endpoints(rep.state)
            self.replicas.append(rep)
        at = {s.chain: s.index for s in st.replicas}
        entries = {j: owner(at[j]) for j in range(1, self.n + 1) if owner(j) == self.rank}
        self.dist_array = PermutedDistributedArray(self.n, self.rank, owner, entries)
        self.epoch = 0

    def _next_epoch(self):
        self.epoch += 1
        return self.scan_counter * 16 + self.epoch

    def _explore(self, rep):
        logp = rep.path.interpolate(self.schedule[rep.chain])
        rep.state = explore(rep.state, logp, rep.rng, self.config.explorer)
        rep.endpoints = rep.path.endpoints(rep.state)

    def run(self):
        cfg = self.config
        st = self.state
        reports = list(st.reports)
        schedules = list(st.schedules)
        pool = ThreadPoolExecutor(self.job.n_threads) if self.job.n_threads > 1 else None
        trace_rows = []
        online = None
        restarts = sum(r.restarts for r in st.replicas)
        round_trips = sum(r.round_trips for r in st.replicas)
        if self.rank == 1 and self.job.progress is not None:
            print(report_header(), file=self.job.progress, flush=True)
            for rep in reports:
                print(report_row(rep), file=self.job.progress, flush=True)
        try:
            for rnd in range(self.start_round + 1, cfg.n_rounds + 1):
                self.epoch = 0
                final = rnd == cfg.n_rounds
                keep_trace = (final and "traces" in cfg.record) or "disk" in cfg.record
                local_trace = [] if keep_trace else None
                for rep in self.replicas:
                    rep.stats = RoundStats(self.n, self.dimension, final and "online" in cfg.record)
                t0 = time.perf_counter()
                for scan in range(1, 2 ** rnd + 1):
                    self.scan_counter += 1
                    if pool is None:
                        for rep in self.replicas:
                            self._explore(rep)
                    else:
                        list(pool.map(self._explore, self.replicas))
                    decisions = communicate(
                        self.replicas, self.scan_counter, self.dist_array, self.transport,
                        self.schedule, cfg.seed, evaluate=Replica.log_potential,
                        force_alpha=self.job.force_alpha)
                    if decisions:
                        by_chain = {r.chain: r for r in self.replicas}
                        for d in decisions:
                            # The lower chain's old holder now sits at the upper chain if accepted.
                            holder = by_chain[d.pair[1] if d.accepted else d.pair[0]]
                            holder.stats.alpha_sum[d.pair[0] - 1] += d.alpha
                            holder.stats.alpha_count[d.pair[0] - 1] += 1
                    for rep in self.replicas:
                        record_scan(rep, scan, self.n, self.schedule, cfg.record, final, local_trace)

                pooled = distributed_reduce([r.stats for r in self.replicas], self.assignment,
                                            self.transport, RoundStats.combine, _enc, _dec,
                                            epoch=self._next_epoch())
                report = None
                new_schedule = None
                if self.rank == 1:
                    restarts += pooled.restarts
                    round_trips += pooled.round_trips
                    report, new_schedule = self._summarize(rnd, pooled, restarts, t0)
                    if final and pooled.online is not None:
                        online = pooled.online
                new_schedule = broadcast(self.transport, new_schedule, _enc, _dec, self._next_epoch())
                self.schedule = Schedule(new_schedule)

                rows = None
                if local_trace is not None:
                    parts = gather(self.transport, local_trace, _enc, _dec, self._next_epoch())
                    if parts is not None:
                        rows = sorted((row for part in parts for row in part), key=lambda r: r[0])
                        if final and "traces" in cfg.record:
                            trace_rows = rows

                snaps = gather(self.transport, [self._snapshot(r) for r in self.replicas],
                               _enc, _dec, self._next_epoch())
                if self.rank == 1:
                    reports.append(report)
                    schedules.append(self.schedule.betas)
                    st = EngineState(cfg, rnd, self.scan_counter, self.schedule.betas,
                                     sorted((s for part in snaps for s in part), key=lambda s: s.index),
                                     st.adapt_rng, list(reports), list(schedules), st.meta)
                    self.state = st
                    if self.job.run_dir is not None:
                        _write_round_outputs(self.job.run_dir, st, rnd, rows, cfg)
                    if self.job.progress is not None:
                        print(report_row(report), file=self.job.progress, flush=True)
                    if self.job.on_round_end is not None:
                        self.job.on_round_end(rnd, st)
        finally:
            if pool is not None:
                pool.shutdown()
            for rep in self.replicas:
                close = getattr(rep.path.target, "close", None)
                if close is not None:
                    close()
        if self.rank != 1:
            return None
        if self.job.progress is not None:
            print(report_footer(), file=self.job.progress, flush=True)
        result = RunResult(reports, schedules, trace_rows, online, restarts, round_trips,
                           self.job.run_dir, self.state)
        if self.job.run_dir is not None:
            _write_final_outputs(self.job.run_dir, result, self.config)
        return result

    def _snapshot(self, rep):
        return ReplicaSnapshot(rep.index, rep.chain, tuple(rep.state), rep.rng.state(), rep.flag,
                               rep.restarts, rep.round_trips)

    def _summarize(self, rnd, pooled, restarts, t0):
        means = [s / c if c else 1.0 for s, c in zip(pooled.alpha_sum, pooled.alpha_count)]
        rejections = [1.0 - m for m in means]
        barrier = global_barrier(rejections)
        try:
            log_z = stepping_stone(pooled.increments)
        except ValueError:
            log_z = math.nan
        new = adapt_schedule(rejections, self.schedule).betas
        mean_alpha = sum(means) / len(means)
        report = RoundReport(rnd, 2 ** rnd, restarts, barrier, time.perf_counter() - t0, log_z,
                             min(means), mean_alpha)
        return report, new


def _dump_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=1, allow_nan=True)
        f.write("\n")
    os.replace(tmp, path)


def write_trace_csv(path, rows, dimension):
    with open(path, "w") as f:
        f.write("scan," + ",".join(f"x{k + 1}" for k in range(dimension)) + "\n")
        for scan, x in rows:
            f.write(f"{scan}," + ",".join(repr(float(v)) for v in x) + "\n")


def read_trace_csv(path):
    rows = []
    with open(path) as f:
        header = f.readline().strip().split(",")
        for line in f:
            parts = line.strip().split(",")
            if len(parts) < 2:
                continue
            rows.append((int(parts[0]), tuple(float(v) for v in parts[1:])))
    return header, rows


def _write_round_outputs(run_dir, st, rnd, rows, cfg):
    try:
        os.makedirs(run_dir, exist_ok=True)
        _dump_json(os.path.join(run_dir, "report.json"), [r.to_json() for r in st.reports])
        _dump_json(os.path.join(run_dir, "schedules.json"), [list(s) for s in st.schedules])
        if "disk" in cfg.record and rows is not None:
            sample_dir = os.path.join(run_dir, "samples")
            os.makedirs(sample_dir, exist_ok=True)
            write_trace_csv(os.path.join(sample_dir, f"round_{rnd}.csv"), rows,
                            len(st.replicas[0].state))
        if cfg.checkpoint:
            ckpt.save(st, run_dir)
    except OSError as e:
        raise OSError(e.errno, f"cannot write outputs: {e.strerror}", e.filename) from e


def _write_final_outputs(run_dir, result, cfg):
    dim = len(result.state.replicas[0].state)
    if "traces" in cfg.record:
        write_trace_csv(os.path.join(run_dir, "trace.csv"), result.trace, dim)
    if result.online is not None:
        _dump_json(os.path.join(run_dir, "online.json"), result.online.to_json())
    if "round_trip" in cfg.record:
        _dump_json(os.path.join(run_dir, "round_trips.json"),
                   {"restarts": result.restarts, "round_trips": result.round_trips})


def new_run_dir(output_dir, run_id=None):
    if run_id is None:
        run_id = time.strftime("%Y-%m-%d-%H-%M-%S") + f"-{os.getpid()}-{time.monotonic_ns() % 10**6:06d}"
    run_dir = os.path.join(output_dir, "results", "all", run_id)
    os.makedirs(run_dir, exist_ok=True)
    ckpt.write_latest(output_dir, run_dir)
    return run_dir


BACKENDS = ("sequential", "threads", "sockets")


def execute(state, path, backend="sequential", n_workers=1, n_threads=1, base_port=None,
            run_dir=None, progress=None, on_round_end=None, force_alpha=None, timeout=None):
    """Run ``state`` forward to ``state.config.n_rounds`` on the chosen backend."""
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    if n_threads < 1:
        raise ValueError("n_threads must be >= 1")
    if not 1 <= n_workers <= state.config.n_chains:
        raise ValueError(f"n_workers must be in 1..{state.config.n_chains}")
    if backend == "sequential" and (n_workers != 1 or n_threads != 1):
        raise ValueError("the sequential backend runs one worker on one thread")
    job = _Job(state, path, n_threads, run_dir, progress, on_round_end, force_alpha)
    kw = {} if timeout is None else {"timeout": timeout}
    if backend == "sequential":
        return job(LocalHub(1).transport(1, **kw))
    if backend == "threads":
        return run_threads(n_workers, job, **kw)
    return launch_local(n_workers, job, base_port=base_port, **kw)


def run(config, path, backend="sequential", n_workers=1, n_threads=1, base_port=None,
        run_id=None, progress=None, on_round_end=None, meta=None, force_alpha=None):
    """Run parallel tempering on ``path``.

    Parameters
    ----------
    config : RunConfig
    path : roost.model.Path
        Must be picklable for the ``sockets`` backend.
    backend : {"sequential", "threads", "sockets"}
    n_workers : int
        Number of ranks (threads or processes); must not exceed ``n_chains``.
    n_threads : int
        Exploration threads inside each rank.
    progress : file-like, optional
        Receives the report table.
    on_round_end : callable, optional
        ``on_round_end(round, state)`` called on rank 1 after each round.

    Returns
    -------
    RunResult
    """
    state = initial_state(config, path, meta)
    run_dir = new_run_dir(config.output_dir, run_id) if config.output_dir is not None else None
    return execute(state, path, backend, n_workers, n_threads, base_port, run_dir, progress,
                   on_round_end, force_alpha)


def resume(checkpoint_path, path, backend="sequential", n_workers=1, n_threads=1, base_port=None,
           progress=None, on_round_end=None):
    """Continue a run from a checkpoint file, a round directory, a run directory or a
    ``results/latest`` pointer."""
    file, run_dir = ckpt.locate(checkpoint_path)
    state = ckpt.load(file)
    return execute(state, path, backend, n_workers, n_threads, base_port, run_dir, progress,
                   on_round_end)


def print_report(reports, file=sys.stdout):
    print(report_header(), file=file)
    for r in reports:
        print(report_row(r), file=file)
    print(report_footer(), file=file)
