"""Distributed non-reversible parallel tempering with strong parallelism invariance."""

from roost.engine import (
    OnlineStats,
    RoundReport,
    RunConfig,
    RunResult,
    adapt_schedule,
    global_barrier,
    print_report,
    resume,
    run,
    stepping_stone,
)
from roost.explore import ExplorerConfig, explore
from roost.model import (
    Path,
    Schedule,
    bimodal_target,
    coinflip_target,
    interpolate,
    mvn_log_ratio,
    mvn_target,
)
from roost.reduce import WorkerAssignment, distributed_reduce, left_fold, reduce_tree
from roost.rng import SplittableRng, keyed_rng, new_rng
from roost.transport import launch_local, run_threads

__version__ = "0.1.0"
