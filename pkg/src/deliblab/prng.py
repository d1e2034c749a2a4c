"""SplitMix64 pseudo-random generator.

Corpus generation uses this documented, dependency-free generator so corpora
are reproducible bit-for-bit from (seed, index) on any platform. Constants
and update rule follow Steele, Lea & Flood's SplitMix64:

    state  = (state + 0x9E3779B97F4A7C15) mod 2^64
    z = state
    z = (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9   mod 2^64
    z = (z XOR (z >> 27)) * 0x94D049BB133111EB   mod 2^64
    output = z XOR (z >> 31)

Floats in [0, 1) take the top 53 bits of the output. Bounded integers are
floor(u01() * n); the bias is below 2^-53 * n and irrelevant at desk scale.
"""

MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """One SplitMix64 output scramble of a 64-bit value."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *tags: int) -> int:
    """Fold integer tags into a base seed, one scramble per tag.

    Used to give each (split, example index) its own independent stream.
    """
    s = mix64(seed)
    for t in tags:
        s = mix64((s + _GAMMA + (t & MASK64)) & MASK64)
    return s


class SplitMix64:
    """Sequential SplitMix64 stream."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & MASK64
        return mix64(self.state)

    def u01(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return min(int(self.u01() * n), n - 1)
