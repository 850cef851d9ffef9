"""SplitMix64 pseudo-random generator.

Every seeded operation in the package (splits, weight init, batch sampling)
draws from this generator so results are reproducible bit-for-bit across
platforms and numpy versions.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based 64-bit generator (Steele, Lea & Flood)."""

    def __init__(self, seed: int) -> None:
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def next_u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` outputs, identical to ``n`` calls of :meth:`next_u64`."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix_array(states)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection, so there is no modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        threshold = ((1 << 64) - n) % n
        while True:
            x = self.next_u64()
            if x >= threshold:
                return x % n

    def uniform_array(self, n: int) -> np.ndarray:
        """Doubles in (0, 1] built from the top 53 bits."""
        bits = self.next_u64_array(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * 2.0**-53

    def normal_array(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller; consumes 2*ceil(n/2) outputs."""
        pairs = (n + 1) // 2
        u = self.uniform_array(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def shuffle(self, items: np.ndarray) -> None:
        """In-place Fisher-Yates, walking from the last index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, pool: np.ndarray, k: int) -> np.ndarray:
        """k distinct entries of ``pool`` via a partial Fisher-Yates pass.

        ``pool`` is permuted in place; any prior order still gives a uniform
        k-subset, so callers may keep reusing the same buffer.
        """
        n = len(pool)
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} of {n}")
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()
