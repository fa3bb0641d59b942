"""SplitMix64 splittable random streams.

Constants and the split derivation follow java.util.SplittableRandom, so a
stream is fully described by two unsigned 64-bit integers ``(seed, gamma)``.
"""

import math

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_DOUBLE_UNIT = 1.0 / (1 << 53)


def mix64(z):
    """Two-stage xor-shift-multiply finalizer (variant 13 of Stafford)."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix_gamma(z):
    z = ((z ^ (z >> 33)) * 0xFF51AFD7ED558CCD) & MASK64
    z = ((z ^ (z >> 33)) * 0xC4CEB9FE1A85EC53) & MASK64
    z = (z ^ (z >> 33)) | 1
    if bin(z ^ (z >> 1)).count("1") < 24:
        z ^= 0xAAAAAAAAAAAAAAAA
    return z


class SplittableRng:
    """A single SplitMix64 stream.

    Not thread-safe: each replica owns exactly one stream.
    """

    __slots__ = ("seed", "gamma")

    def __init__(self, seed, gamma=GOLDEN_GAMMA):
        if not gamma & 1:
            raise ValueError("gamma must be odd")
        self.seed = seed & MASK64
        self.gamma = gamma & MASK64

    def __repr__(self):
        return f"SplittableRng(seed={self.seed:#018x}, gamma={self.gamma:#018x})"

    def __eq__(self, other):
        if not isinstance(other, SplittableRng):
            return NotImplemented
        return self.seed == other.seed and self.gamma == other.gamma

    def _next_seed(self):
        self.seed = (self.seed + self.gamma) & MASK64
        return self.seed

    def next_u64(self):
        return mix64(self._next_seed())

    def next_unit_f64(self):
        """Uniform draw in [0, 1) from the top 53 bits of the next output."""
        return (self.next_u64() >> 11) * _DOUBLE_UNIT

    def next_normal(self):
        """Standard normal draw (Box-Muller, two uniforms per call)."""
        u1 = 1.0 - self.next_unit_f64()
        u2 = self.next_unit_f64()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def split(self):
        """Return a child stream; advances this stream by two steps."""
        child_seed = self.next_u64()
        child_gamma = _mix_gamma(self._next_seed())
        return SplittableRng(child_seed, child_gamma)

    def copy(self):
        return SplittableRng(self.seed, self.gamma)

    def state(self):
        return (self.seed, self.gamma)


def new_rng(seed):
    return SplittableRng(seed, GOLDEN_GAMMA)


def keyed_rng(seed, key1, key2):
    """Stream that is a pure function of ``(seed, key1, key2)``.

    Used so that two workers can draw the same uniform without exchanging it.
    """
    h = mix64((seed + GOLDEN_GAMMA) & MASK64)
    h = mix64(((h ^ (key1 & MASK64)) + GOLDEN_GAMMA) & MASK64)
    h = mix64(((h ^ (key2 & MASK64)) + GOLDEN_GAMMA) & MASK64)
    return SplittableRng(h, GOLDEN_GAMMA)
