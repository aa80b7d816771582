"""Counter-based random streams.

Every random draw in the simulator comes from a :class:`SeededRng`, a thin
wrapper around numpy's Philox-4x64 bit generator keyed by ``(seed,
stream_id)``. The counter is split so that ``substream(index)`` starts at
block ``index << 64``; a training step can therefore be replayed from its
step number alone.

Conventions (fixed so that ports can match draws exactly):

* uniform: ``(word >> 11) * 2**-53``, in ``[0, 1)``.
* normal: Box-Muller on consecutive word pairs ``(w1, w2)``:
  ``r = sqrt(-2 log(1 - u1))``, ``theta = 2 pi u2``, emitting
  ``r cos(theta)`` then ``r sin(theta)``. Odd requests discard the final
  sine draw.
"""

import numpy as np

from . import _kernels
from .errors import DimensionError

_MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / 9007199254740992.0

# stream ids used throughout the package
STREAM_DICT = 0
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_MASK = 3
STREAM_NEG = 4
STREAM_PROBE = 5
STREAM_EVAL = 6


class SeededRng:
    """Deterministic random stream identified by ``(seed, stream_id, index)``."""

    def __init__(self, seed, stream_id=0, index=0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.index = int(index) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        counter = np.array([0, self.index, 0, 0], dtype=np.uint64)
        self._bits = np.random.Philox(key=key, counter=counter)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id}, index={self.index})"

    def stream(self, stream_id, index=0):
        """A sibling stream sharing this seed."""
        return SeededRng(self.seed, stream_id, index)

    def substream(self, index):
        """Independent sub-sequence of this stream, addressed by ``index``."""
        return SeededRng(self.seed, self.stream_id, index)

    def raw(self, n):
        return self._bits.random_raw(int(n))

    def uniform(self, shape):
        n = int(np.prod(shape, dtype=np.int64))
        words = self._bits.random_raw(n) if n else np.empty(0, dtype=np.uint64)
        return ((words >> np.uint64(11)).astype(np.float64) * _INV_2_53).reshape(shape)

    def normal(self, shape):
        n = int(np.prod(shape, dtype=np.int64))
        if n == 0:
            return np.empty(shape)
        pairs = (n + 1) // 2
        z = _kernels.box_muller(self._bits.random_raw(2 * pairs))
        return z[:n].reshape(shape)

    def bernoulli_half(self, shape):
        """Fair coin flips (one word per flip, top bit)."""
        n = int(np.prod(shape, dtype=np.int64))
        words = self._bits.random_raw(n) if n else np.empty(0, dtype=np.uint64)
        return (words >> np.uint64(63)).astype(bool).reshape(shape)

    def signs(self, shape):
        return np.where(self.bernoulli_half(shape), 1.0, -1.0)


def gaussian_vector(rng, n, sigma):
    """``n`` i.i.d. ``N(0, sigma**2)`` draws from ``rng``."""
    if n < 1:
        raise DimensionError("gaussian_vector needs n >= 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return sigma * rng.normal((n,))
