import io
import json
import math
import os

import pytest

from roost.engine import (
    HIT_REFERENCE,
    HIT_TARGET,
    LogSumExp,
    OnlineStats,
    Replica,
    RoundReport,
    RoundStats,
    RunConfig,
    adapt_schedule,
    global_barrier,
    read_trace_csv,
    record_scan,
    report_header,
    report_row,
    run,
    stepping_stone,
)
from roost.model import Path, Schedule, bimodal_target, coinflip_target, mvn_log_ratio, mvn_target
from roost.rng import new_rng


def test_global_barrier():
    assert global_barrier([]) == 0.0
    assert global_barrier([0.25, 0.5, 0.0]) == 0.75


def test_adapt_schedule_uniform_rejections_keep_equal_spacing():
    old = Schedule.equally_spaced(5)
    new = adapt_schedule([0.3] * 4, old)
    assert new.betas == pytest.approx(old.betas, abs=1e-15)


def test_adapt_schedule_moves_points_toward_hard_region():
    old = Schedule.equally_spaced(4)
    new = adapt_schedule([0.9, 0.05, 0.05], old)
    # Two thirds of the barrier lies in the first interval.
    assert new.betas[0] == 0.0 and new.betas[-1] == 1.0
    assert new.betas[1] < 1 / 3 and new.betas[2] < 1 / 3
    assert new.betas[1] == pytest.approx(1 / 3 * (1 / 3) / 0.9, rel=1e-12)


def test_adapt_schedule_degenerate_inputs():
    old = Schedule.equally_spaced(4)
    assert adapt_schedule([0.0, 0.0, 0.0], old) == old
    assert adapt_schedule([0.0, 1.0, 0.0], old).betas[0] == 0.0
    with pytest.raises(ValueError):
        adapt_schedule([0.1, 0.1], old)
    with pytest.raises(ValueError):
        adapt_schedule([0.1, -0.1, 0.1], old)


def test_logsumexp_matches_direct_sum():
    values = [-3.0, 1.5, 0.25, -math.inf, 2.0]
    acc = LogSumExp()
    for v in values:
        acc.add(v)
    direct = math.log(sum(math.exp(v) for v in values) / len(values))
    assert acc.log_mean() == pytest.approx(direct, rel=1e-14)
    a, b = LogSumExp(), LogSumExp()
    for v in values[:2]:
        a.add(v)
    for v in values[2:]:
        b.add(v)
    assert LogSumExp.combine(a, b).log_mean() == pytest.approx(direct, rel=1e-14)


def test_stepping_stone_sums_pairs():
    accs = []
    for v in (0.5, -1.0):
        a = LogSumExp()
        a.add(v)
        a.add(v)
        accs.append(a)
    assert stepping_stone(accs) == pytest.approx(-0.5, abs=1e-15)
    with pytest.raises(ValueError):
        stepping_stone([LogSumExp()])


def test_online_stats_combine():
    rng = new_rng(5)
    xs = [(rng.next_normal(), rng.next_unit_f64()) for _ in range(101)]
    whole = OnlineStats(2)
    left, right = OnlineStats(2), OnlineStats(2)
    for i, x in enumerate(xs):
        whole.update(x)
        (left if i < 40 else right).update(x)
    both = OnlineStats.combine(left, right)
    assert both.count == 101
    for k in range(2):
        col = [x[k] for x in xs]
        mean = sum(col) / len(col)
        var = sum((v - mean) ** 2 for v in col) / (len(col) - 1)
        assert both.mean[k] == pytest.approx(mean, rel=1e-12)
        assert both.variance[k] == pytest.approx(var, rel=1e-12)
        assert whole.variance[k] == pytest.approx(var, rel=1e-12)
        assert both.min[k] == min(col) and both.max[k] == max(col)


def test_record_scan_counts_restarts_and_round_trips():
    n = 3
    sched = Schedule.equally_spaced(n)
    rep = Replica(1, 1, [0.0], new_rng(1), endpoints=(0.0, 0.0))
    rep.stats = RoundStats(n, 1, online=True)
    trace = []
    for scan, chain in enumerate([1, 2, 3, 2, 1, 2, 3, 3, 1], start=1):
        rep.chain = chain
        record_scan(rep, scan, n, sched, set(), True, trace)
    assert rep.restarts == 2 and rep.stats.restarts == 2
    assert rep.round_trips == 2 and rep.stats.round_trips == 2
    assert rep.flag == HIT_REFERENCE
    assert [s for s, _ in trace] == [3, 7, 8]
    assert rep.stats.online.count == 3
    assert rep.stats.increments[0].count == 3 and rep.stats.increments[1].count == 3


def test_record_scan_first_visit_to_target_is_not_a_restart():
    rep = Replica(1, 2, [0.0], new_rng(1), endpoints=(0.0, 0.0))
    rep.stats = RoundStats(2, 1, online=False)
    record_scan(rep, 1, 2, Schedule.equally_spaced(2), set(), False)
    assert rep.flag == HIT_TARGET and rep.restarts == 0


def test_report_row_format():
    r = RoundReport(3, 8, 12, 3.1734, 0.01234, -11.87944, 0.61, 0.7)
    row = report_row(r)
    cells = [row[i * 11:i * 11 + 10] for i in range(8)]
    assert [c.strip() for c in cells] == ["8", "12", "3.17", "0.0123", "", "-11.9", "0.61", "0.7"]
    assert "Λ" in report_header() and "log(Z₁/Z₀)" in report_header()
    assert RoundReport.from_json(r.to_json()) == r
    assert "lambda" in r.to_json()


def test_run_config_validation(tmp_path):
    with pytest.raises(ValueError):
        RunConfig(n_chains=1)
    with pytest.raises(ValueError):
        RunConfig(record={"bogus"})
    with pytest.raises(ValueError):
        RunConfig(checkpoint=True)
    with pytest.raises(ValueError):
        RunConfig(seed=-1)
    cfg = RunConfig(record={"traces"}, output_dir=str(tmp_path))
    assert RunConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


def test_run_rejects_bad_worker_counts():
    path = Path(*mvn_target(1, 2.0))
    with pytest.raises(ValueError):
        run(RunConfig(n_chains=3, n_rounds=1), path, backend="threads", n_workers=4)
    with pytest.raises(ValueError):
        run(RunConfig(n_chains=3, n_rounds=1), path, backend="sequential", n_threads=2)
    with pytest.raises(ValueError):
        run(RunConfig(n_chains=3, n_rounds=1), path, backend="mpi")


def test_trivial_path_is_exact():
    path = Path(*mvn_target(2, 1.0))
    res = run(RunConfig(n_chains=6, n_rounds=5, seed=3), path)
    for r in res.reports:
        assert r.lambda_ == 0.0 and r.log_z_ratio == 0.0
        assert r.min_alpha == 1.0 and r.mean_alpha == 1.0


def test_small_gaussian_estimate():
    path = Path(*mvn_target(1, 2.0))
    res = run(RunConfig(n_chains=6, n_rounds=8, seed=2), path)
    assert abs(res.reports[-1].log_z_ratio - mvn_log_ratio(1, 2.0)) < 0.1


def test_outputs_written(tmp_path):
    path = Path(*coinflip_target(100, 50))
    cfg = RunConfig(n_chains=4, n_rounds=3, seed=1, output_dir=str(tmp_path),
                    record={"traces", "online", "round_trip", "disk"}, checkpoint=True)
    out = io.StringIO()
    res = run(cfg, path, run_id="r1", progress=out)
    d = res.run_dir
    assert d == os.path.join(str(tmp_path), "results", "all", "r1")
    for name in ["report.json", "schedules.json", "trace.csv", "online.json", "round_trips.json",
                 "samples/round_1.csv", "samples/round_3.csv", "round_3/checkpoint.pgns"]:
        assert os.path.exists(os.path.join(d, name)), name
    header, rows = read_trace_csv(os.path.join(d, "trace.csv"))
    assert header == ["scan", "x1", "x2"]
    assert rows == [(s, tuple(x)) for s, x in res.trace]
    assert len(rows) == 8  # one target-chain state per scan of the last round
    assert [s for s, _ in rows] == list(range(1, 9))
    assert len(json.load(open(os.path.join(d, "report.json")))) == 3
    assert len(json.load(open(os.path.join(d, "schedules.json")))) == 4
    assert out.getvalue().count("\n") == 3 + 3 + 1
    assert res.online.count == 8


def test_restarts_are_cumulative():
    path = Path(*bimodal_target())
    res = run(RunConfig(n_chains=5, n_rounds=6, seed=1), path)
    counts = [r.restarts for r in res.reports]
    assert counts == sorted(counts)
    assert counts[-1] == res.restarts


@pytest.mark.parametrize("backend,workers,threads", [
    ("threads", 1, 3), ("threads", 2, 1), ("threads", 5, 2), ("sockets", 3, 1)])
def test_parallelism_invariance_small(backend, workers, threads, free_port):
    path = Path(*coinflip_target(1000, 400))
    cfg = RunConfig(n_chains=5, n_rounds=5, seed=9, record={"traces", "online", "round_trip"})
    ref = run(cfg, path)
    other = run(cfg, path, backend=backend, n_workers=workers, n_threads=threads,
                base_port=free_port(workers))

    def strip(reports):
        return [{k: v for k, v in r.to_json().items() if k != "time_s"} for r in reports]

    assert other.trace == ref.trace
    assert strip(other.reports) == strip(ref.reports)
    assert other.schedules == ref.schedules
    assert other.online.to_json() == ref.online.to_json()
    assert other.state.directory() == ref.state.directory()
