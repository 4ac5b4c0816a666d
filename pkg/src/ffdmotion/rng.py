"""Counter-based SplitMix64 streams, so phantoms are reproducible bit for bit.

Output ``i`` (1-based) of the stream with key ``seed`` is the SplitMix64
finalizer applied to ``seed + i * 0x9E3779B97F4A7C15 (mod 2**64)``:

    z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27; z *= 0x94D049BB133111EB
    z ^= z >> 31

Uniforms are ``(z >> 11) * 2**-53``. Normals use the cosine branch of
Box-Muller on consecutive uniform pairs ``(u1, u2)``:
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``. Independent sub-streams are keyed by
``derive_seed(seed, stream) = mix(seed + (stream + 1) * 0xD1B54A32D192ED03)``.
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
STREAM_STEP = 0xD1B54A32D192ED03
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed, stream):
    key = np.array([(int(seed) + (int(stream) + 1) * STREAM_STEP) & _MASK], dtype=np.uint64)
    return int(_mix(key)[0])


class SplitMix64:
    def __init__(self, seed):
        self.key = np.uint64(int(seed) & _MASK)
        self.counter = 0

    def next_u64(self, count):
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        return _mix(self.key + idx * GOLDEN)

    def uniform(self, count, low=0.0, high=1.0):
        u = (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normal(self, count):
        u = self.uniform(2 * count).reshape(count, 2)
        return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
