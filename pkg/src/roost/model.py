"""Log-potentials, annealing paths and built-in targets.

A log-potential is any picklable callable mapping a state (sequence of
floats) to an unnormalized log density, returning ``-inf`` outside the
support.  Built-in ones also carry ``dimension`` and ``initial``.
"""

import math
from dataclasses import dataclass

NEG_INF = float("-inf")


class UniformBox:
    """Uniform prior on [0, 1]^d, log density 0 inside."""

    def __init__(self, dimension):
        self.dimension = dimension
        self.initial = (0.5,) * dimension

    def __call__(self, x):
        for v in x:
            if not 0.0 <= v <= 1.0:
                return NEG_INF
        return 0.0

    def support(self, x):
        return self(x) > NEG_INF


class Coinflip:
    """Two-parameter non-identifiable binomial likelihood.

    ``log C(n, y) + y log(p1 p2) + (n - y) log(1 - p1 p2)`` on the unit square.
    """

    def __init__(self, n, y):
        if n < 0 or y < 0 or y > n:
            raise ValueError(f"need 0 <= y <= n, got n={n}, y={y}")
        self.n = n
        self.y = y
        self.dimension = 2
        self.initial = (math.sqrt(y / n),) * 2 if 0 < y < n else (0.5, 0.5)
        self._logc = math.lgamma(n + 1) - math.lgamma(y + 1) - math.lgamma(n - y + 1)

    def __call__(self, x):
        p1, p2 = x
        if not (0.0 <= p1 <= 1.0 and 0.0 <= p2 <= 1.0):
            return NEG_INF
        u = p1 * p2
        out = self._logc
        if self.y:
            if u == 0.0:
                return NEG_INF
            out += self.y * math.log(u)
        if self.n - self.y:
            if u == 1.0:
                return NEG_INF
            out += (self.n - self.y) * math.log1p(-u)
        return out

    def support(self, x):
        return self(x) > NEG_INF


class IsotropicGaussian:
    """Unnormalized ``-|x - mean|^2 / (2 sd^2)``."""

    def __init__(self, dimension, sd=1.0, mean=0.0):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        if sd <= 0:
            raise ValueError("sd must be positive")
        self.dimension = dimension
        self.sd = sd
        self.mean = mean
        self.initial = (float(mean),) * dimension
        self._scale = -0.5 / (sd * sd)

    def __call__(self, x):
        m = self.mean
        return self._scale * sum((v - m) * (v - m) for v in x)

    def support(self, x):
        return True


class Bimodal:
    """Equal-weight mixture of two isotropic 2-D Gaussians at (-c, -c) and (c, c)."""

    def __init__(self, separation=2.0, sd=0.5):
        if separation <= 0 or sd <= 0:
            raise ValueError("separation and sd must be positive")
        self.separation = separation
        self.sd = sd
        self.dimension = 2
        self.initial = (0.0, 0.0)
        self._norm = math.log(0.5) - math.log(2.0 * math.pi * sd * sd)
        self._scale = -0.5 / (sd * sd)

    def component_log_densities(self, x):
        c = self.separation
        a = self._scale * ((x[0] + c) ** 2 + (x[1] + c) ** 2)
        b = self._scale * ((x[0] - c) ** 2 + (x[1] - c) ** 2)
        return a, b

    def __call__(self, x):
        a, b = self.component_log_densities(x)
        m = max(a, b)
        return self._norm + m + math.log(math.exp(a - m) + math.exp(b - m))

    def support(self, x):
        return True


def coinflip_target(n, y):
    """Returns ``(target, reference)``; the reference is the uniform prior."""
    return Coinflip(n, y), UniformBox(2)


def bimodal_target(separation=2.0, sd=0.5):
    target = Bimodal(separation, sd)
    return target, IsotropicGaussian(2, max(3 * separation, 3 * sd))


def mvn_target(d, ref_sd=2.0):
    """Unnormalized standard normal target against an isotropic normal reference.

    Both omit their ``(2 pi)^(d/2)`` factor, so the exact log ratio of
    normalizing constants is ``-d * log(ref_sd)``; see :func:`mvn_log_ratio`.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    return IsotropicGaussian(d, 1.0), IsotropicGaussian(d, ref_sd)


def mvn_log_ratio(d, ref_sd):
    return -d * math.log(ref_sd)


def tempered(beta, ref_value, target_value):
    """Log-linear interpolation with exact endpoints and -inf propagation."""
    if beta == 0.0:
        return ref_value
    if beta == 1.0:
        return target_value
    if ref_value == NEG_INF or target_value == NEG_INF:
        return NEG_INF
    # Written as ref + beta * (target - ref) so identical endpoints give identical values.
    return ref_value + beta * (target_value - ref_value)


class Path:
    """Geometric path between a reference (beta = 0) and a target (beta = 1)."""

    def __init__(self, target, reference):
        self.target = target
        self.reference = reference
        self.dimension = getattr(target, "dimension", None) or getattr(reference, "dimension")

    @property
    def initial(self):
        start = getattr(self.target, "initial", None)
        if start is None:
            start = getattr(self.reference, "initial", None)
        if start is None:
            raise ValueError("neither endpoint defines an initial state")
        return tuple(float(v) for v in start)

    def endpoints(self, x):
        """``(log reference, log target)`` at ``x``; the target is skipped outside the
        reference support."""
        r = self.reference(x)
        if r == NEG_INF:
            return NEG_INF, NEG_INF
        return r, self.target(x)

    def interpolate(self, beta):
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"beta={beta} outside [0, 1]")
        return TemperedPotential(self, beta)

    def fork(self):
        """Copy whose endpoints hold no shared per-process resources."""
        fork = lambda p: p.fork() if hasattr(p, "fork") else p
        return Path(fork(self.target), fork(self.reference))


class TemperedPotential:
    __slots__ = ("path", "beta")

    def __init__(self, path, beta):
        self.path = path
        self.beta = beta

    @property
    def dimension(self):
        return self.path.dimension

    def __call__(self, x):
        beta = self.beta
        if beta == 0.0:
            return self.path.reference(x)
        if beta == 1.0:
            return self.path.target(x)
        return tempered(beta, *self.path.endpoints(x))


def interpolate(path, beta):
    return path.interpolate(beta)


@dataclass(frozen=True)
class Schedule:
    """Annealing parameters ``0 = beta_1 < ... < beta_N = 1``."""

    betas: tuple

    def __post_init__(self):
        b = tuple(float(v) for v in self.betas)
        object.__setattr__(self, "betas", b)
        if len(b) < 2:
            raise ValueError("a schedule needs at least two betas")
        if b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError("schedule endpoints must be 0 and 1")
        if any(b1 <= b0 for b0, b1 in zip(b, b[1:])):
            raise ValueError("schedule must be strictly increasing")

    @classmethod
    def equally_spaced(cls, n_chains):
        if n_chains < 2:
            raise ValueError("need at least two chains")
        last = n_chains - 1
        return cls(tuple(i / last for i in range(n_chains)))

    def __len__(self):
        return len(self.betas)

    def __getitem__(self, chain):
        """Beta of a 1-based chain index."""
        return self.betas[chain - 1]
