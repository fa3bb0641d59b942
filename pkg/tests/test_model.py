import math
import sys

import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from roost.bridge import BridgeError, BridgeTarget, child_process_target, parse_response
from roost.model import (
    Coinflip,
    Path,
    Schedule,
    bimodal_target,
    coinflip_target,
    interpolate,
    mvn_log_ratio,
    mvn_target,
)
from roost.rng import new_rng

NEG_INF = float("-inf")
# tests/oracles/quadrature_ref.py
COINFLIP_LOG_Z = -11.879441172160908
BIMODAL_POSITIVE_MASS = 0.4999683297612345


def test_coinflip_hand_value():
    target, _ = coinflip_target(2, 1)
    assert target((1.0, 0.5)) == pytest.approx(-math.log(2), abs=1e-15)


def test_coinflip_support():
    target, ref = coinflip_target(10, 4)
    for x in [(-0.1, 0.5), (0.5, 1.2), (2.0, 2.0)]:
        assert target(x) == NEG_INF
        assert ref(x) == NEG_INF
    assert target((0.0, 0.5)) == NEG_INF
    assert target((1.0, 1.0)) == NEG_INF
    assert ref((0.3, 0.9)) == 0.0
    # Boundary is in the support when y sits at an extreme.
    assert coinflip_target(5, 0)[0]((0.0, 0.3)) == 0.0
    assert coinflip_target(5, 5)[0]((1.0, 1.0)) == 0.0


@pytest.mark.parametrize("n,y", [(3, 4), (-1, 0), (5, -1)])
def test_coinflip_bad_arguments(n, y):
    with pytest.raises(ValueError):
        coinflip_target(n, y)


def test_coinflip_large_n_is_finite():
    target, _ = coinflip_target(100000, 50000)
    assert math.isfinite(target(target.initial))


def test_coinflip_small_normalizer_by_quadrature():
    # Z for (n=2, y=1) from a plain 2-D quadrature of our own density.
    target, _ = coinflip_target(2, 1)
    z, _ = integrate.dblquad(lambda p2, p1: math.exp(target((p1, p2))), 0, 1, 0, 1)
    assert math.log(z) == pytest.approx(-1.2809338454620645, abs=1e-9)


def test_paper_log_normalizer_oracle():
    # The frozen oracle reproduces the published constant.
    assert round(COINFLIP_LOG_Z, 4) == -11.8794


def test_bimodal_symmetry():
    target, ref = bimodal_target(2.0, 0.5)
    a, b = target.component_log_densities((0.0, 0.0))
    assert a == b
    assert target((2.0, 2.0)) == target((-2.0, -2.0))
    assert ref.sd == 6.0


def test_bimodal_quadrant_mass():
    target, _ = bimodal_target(2.0, 0.5)
    mass, _ = integrate.dblquad(lambda y, x: math.exp(target((x, y))), 0, 10, 0, 10)
    assert mass == pytest.approx(BIMODAL_POSITIVE_MASS, abs=1e-7)
    assert 0.5 - mass < 1e-4


@pytest.mark.parametrize("args", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
def test_bimodal_bad_arguments(args):
    with pytest.raises(ValueError):
        bimodal_target(*args)


def test_mvn_ratio():
    target, ref = mvn_target(1, 1.0)
    assert target((0.0,)) == 0.0
    assert mvn_log_ratio(1, 1.0) == 0.0
    assert mvn_log_ratio(2, 2.0) == -2 * math.log(2)
    # Analytic value against 1-D quadrature of the unnormalized densities.
    t2, r2 = mvn_target(1, 2.0)
    a, _ = integrate.quad(lambda v: math.exp(t2((v,))), -math.inf, math.inf)
    b, _ = integrate.quad(lambda v: math.exp(r2((v,))), -math.inf, math.inf)
    assert 2 * (math.log(a) - math.log(b)) == pytest.approx(mvn_log_ratio(2, 2.0), abs=1e-12)
    with pytest.raises(ValueError):
        mvn_target(0)


def test_interpolate_endpoints_and_midpoint():
    path = Path(*mvn_target(1, 2.0))
    for x in (-1.3, 0.0, 2.5):
        assert interpolate(path, 0.0)((x,)) == path.reference((x,))
        assert interpolate(path, 1.0)((x,)) == path.target((x,))
        assert interpolate(path, 0.5)((x,)) == pytest.approx(-0.5 * x * x * (0.5 + 0.5 * 0.25), rel=1e-15)
    with pytest.raises(ValueError):
        interpolate(path, 1.5)


@pytest.mark.parametrize("maker", [lambda: coinflip_target(50, 20), lambda: bimodal_target(),
                                   lambda: mvn_target(3, 2.0)])
def test_interpolation_is_monotone_in_beta(maker):
    path = Path(*maker())
    rng = new_rng(11)
    d = path.dimension
    for _ in range(1000):
        x = [rng.next_unit_f64() * 1.2 - 0.1 for _ in range(d)]
        lo, hi = path.endpoints(x)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            continue
        vals = [interpolate(path, b)(x) for b in (0.0, 0.25, 0.5, 0.75, 1.0)]
        steps = [b - a for a, b in zip(vals, vals[1:])]
        assert all(s >= 0 for s in steps) or all(s <= 0 for s in steps)
        assert min(lo, hi) <= vals[2] <= max(lo, hi)


def test_schedule_validation():
    assert Schedule.equally_spaced(5).betas == (0.0, 0.25, 0.5, 0.75, 1.0)
    for bad in [(0.0,), (0.1, 1.0), (0.0, 0.5, 0.5, 1.0), (0.0, 0.9)]:
        with pytest.raises(ValueError):
            Schedule(bad)
    s = Schedule((0.0, 0.3, 1.0))
    assert s[1] == 0.0 and s[3] == 1.0 and len(s) == 3


# Bridge ----------------------------------------------------------------------------

def bridge_cmd(*args):
    return [sys.executable, "-m", "roost.bridge", *args]


def test_bridge_constant():
    target = child_process_target(bridge_cmd("constant", "0.0", "--dim", "2"), 2)
    try:
        assert target((0.3, 0.4)) == 0.0
        assert target((5.0, -1.0)) == 0.0
    finally:
        target.close()


def test_bridge_matches_native_coinflip():
    native = Coinflip(2, 1)
    bridged = BridgeTarget(bridge_cmd("coinflip", "2", "1"), 2)
    rng = new_rng(3)
    try:
        for _ in range(100):
            x = (rng.next_unit_f64() * 1.2 - 0.1, rng.next_unit_f64() * 1.2 - 0.1)
            a, b = native(x), bridged(x)
            if a == NEG_INF:
                assert b == NEG_INF
            else:
                assert abs(a - b) <= 1e-12
    finally:
        bridged.close()


def test_bridge_nan_is_an_error():
    target = BridgeTarget(bridge_cmd("constant", "nan"), 2)
    try:
        with pytest.raises(BridgeError, match="nan"):
            target((0.1, 0.1))
    finally:
        target.close()


def test_bridge_dead_process():
    target = BridgeTarget([sys.executable, "-c", "import sys; sys.stdin.readline(); print('ok', flush=True)"], 2)
    with pytest.raises(BridgeError):
        target((0.1, 0.1))
    target.close()


def test_bridge_timeout():
    target = BridgeTarget([sys.executable, "-c", "import time; time.sleep(30)"], 1, timeout=0.5)
    from roost.bridge import BridgeTimeout
    with pytest.raises(BridgeTimeout):
        target((0.0,))
    target._proc.kill()
    target.close()


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_parse_response_round_trips(v):
    assert parse_response(repr(v) + "\n") == v


def test_parse_response_rejects_garbage():
    assert parse_response("-inf\n") == NEG_INF
    for bad in ["nan", "inf", "hello", ""]:
        with pytest.raises(BridgeError):
            parse_response(bad)


def test_bridge_fork_is_private():
    t = BridgeTarget(bridge_cmd("constant", "1.5", "--dim", "1"), 1)
    f = t.fork()
    try:
        assert t((0.0,)) == 1.5 and f((0.0,)) == 1.5
        assert t._proc.pid != f._proc.pid
    finally:
        t.close()
        f.close()
