"""Within-chain exploration kernels.

All randomness comes from the stream passed in, so a replica's trajectory
depends only on its own stream and the tempered density it is targeting.
"""

import math
from dataclasses import dataclass

NEG_INF = float("-inf")
MAX_SHRINK = 1000


class ExplorerError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExplorerConfig:
    kind: str = "slice"
    slice_width: float = 1.0
    slice_max_doublings: int = 10
    rwm_step: float = 0.5
    passes_per_scan: int = 3

    def __post_init__(self):
        if self.kind not in ("slice", "rwm"):
            raise ValueError(f"unknown explorer kind {self.kind!r}")
        if self.slice_width <= 0 or self.rwm_step <= 0:
            raise ValueError("slice_width and rwm_step must be positive")
        if self.slice_max_doublings < 0 or self.passes_per_scan < 1:
            raise ValueError("slice_max_doublings >= 0 and passes_per_scan >= 1 required")


def _log_uniform(rng):
    # 1 - u lies in (0, 1], so the log is finite or zero.
    return math.log(1.0 - rng.next_unit_f64())


def _check(value):
    if value != value:
        raise ExplorerError("log density returned NaN")
    return value


def slice_sample_coordinate(state, axis, logp, rng, cfg, current=None):
    """One doubling slice-sampling update of ``state[axis]``.

    Returns ``(new_state, logp(new_state))``.  ``state`` is not modified.
    """
    x = list(state)
    x0 = x[axis]

    def f(v):
        x[axis] = v
        return _check(logp(x))

    lp0 = f(x0) if current is None else current
    level = lp0 + _log_uniform(rng)
    w = cfg.slice_width

    left = x0 - w * rng.next_unit_f64()
    right = left + w
    f_left, f_right = f(left), f(right)
    for _ in range(cfg.slice_max_doublings):
        if level >= f_left and level >= f_right:
            break
        if rng.next_unit_f64() < 0.5:
            left -= right - left
            f_left = f(left)
        else:
            right += right - left
            f_right = f(right)

    lo, hi = left, right
    for _ in range(MAX_SHRINK):
        x1 = lo + rng.next_unit_f64() * (hi - lo)
        lp1 = f(x1)
        if level < lp1 and _doubling_accepts(x0, x1, level, left, right, w, f):
            x[axis] = x1
            return x, lp1
        if x1 < x0:
            lo = x1
        else:
            hi = x1
    raise ExplorerError(
        f"slice sampler failed to find a point on the slice after {MAX_SHRINK} shrinkage steps")


def _doubling_accepts(x0, x1, level, left, right, w, f):
    # Neal (2003) doubling check: reject x1 if the doubling from x1 would have stopped early.
    differ = False
    while right - left > 1.1 * w:
        mid = 0.5 * (left + right)
        if (x0 < mid) != (x1 < mid):
            differ = True
        if x1 < mid:
            right = mid
        else:
            left = mid
        if differ and level >= f(left) and level >= f(right):
            return False
    return True


def rwm_step(state, logp, rng, cfg, current):
    proposal = [v + cfg.rwm_step * rng.next_normal() for v in state]
    lp1 = _check(logp(proposal))
    if _log_uniform(rng) < lp1 - current:
        return proposal, lp1
    return list(state), current


def explore(state, logp, rng, cfg=ExplorerConfig()):
    """Apply ``cfg.passes_per_scan`` kernel sweeps targeting ``logp``.

    Returns the new state as a list of floats.
    """
    x = [float(v) for v in state]
    lp = _check(logp(x))
    if lp == NEG_INF:
        raise ExplorerError(f"initial state {x} is outside the support")
    for _ in range(cfg.passes_per_scan):
        if cfg.kind == "slice":
            for axis in range(len(x)):
                x, lp = slice_sample_coordinate(x, axis, logp, rng, cfg, lp)
        else:
            x, lp = rwm_step(x, logp, rng, cfg, lp)
    return x
