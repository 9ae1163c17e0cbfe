"""Counter-based Philox4x64-10 uniforms, vectorized over counters.

Each draw is a pure function of ``(seed, stream, tag, index)``: the key is
``(seed, 0)`` and the 256-bit counter is ``(block, stream, tag, 0)`` where
``block = index // 4``. Replications use distinct ``stream`` values and the
auxiliary chains of a controlled run use distinct ``tag`` values, so every
random sequence is reproducible on any platform and independent of how work
is split across processes.

Sequential streams come from numpy's ``Philox`` bit generator with the
counter set accordingly. Batches that need the same word index from many
streams at once use a vectorized implementation of the round function
(published Random123 multipliers and Weyl constants), which the test suite
checks bit for bit against numpy.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_ROUNDS = 10
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_MASK64 = (1 << 64) - 1

TAG_MAIN = 0
TAG_AUX = 1


def tag_block(j: int) -> int:
    """Substream tag for the j-th block sequence of a controlled run."""
    return 2 + j


def _mulhilo(a: np.uint64, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """High and low 64-bit halves of ``a * b`` using 32-bit limbs."""
    a_lo, a_hi = a & _LO32, a >> _S32
    b_lo, b_hi = b & _LO32, b >> _S32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _S32) + (lh & _LO32) + (hl & _LO32)
    hi = hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32)
    lo = a * b
    return hi, lo


def philox4x64(counters: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Apply Philox4x64-10 to an ``(n, 4)`` array of uint64 counters."""
    c = np.array(counters, dtype=np.uint64).reshape(-1, 4)
    x0, x1, x2, x3 = (c[:, i].copy() for i in range(4))
    k0 = np.uint64(key[0] & 0xFFFFFFFFFFFFFFFF)
    k1 = np.uint64(key[1] & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for r in range(_ROUNDS):
            if r:
                k0 = k0 + _W0
                k1 = k1 + _W1
            hi0, lo0 = _mulhilo(_M0, x0)
            hi1, lo1 = _mulhilo(_M1, x2)
            x0, x1, x2, x3 = hi1 ^ x1 ^ k0, lo1, hi0 ^ x3 ^ k1, lo0
    return np.stack([x0, x1, x2, x3], axis=1)


def _numpy_philox(seed: int, stream: int, tag: int, block: int) -> np.random.Philox:
    """numpy's Philox positioned so that its first output block is ``block``.

    numpy increments the 256-bit counter before each block, so the stored
    counter is one less (with borrow) than the first block to be emitted.
    """
    value = (block + (stream << 64) + (tag << 128) - 1) % (1 << 256)
    counter = [(value >> (64 * i)) & _MASK64 for i in range(4)]
    key = np.array([seed & _MASK64, 0], dtype=np.uint64)
    return np.random.Philox(key=key, counter=np.array(counter, dtype=np.uint64))


def random_words(seed: int, stream: int, tag: int, start: int, count: int) -> np.ndarray:
    """``count`` raw 64-bit words beginning at word index ``start``."""
    if count <= 0:
        return np.empty(0, dtype=np.uint64)
    offset = start % 4
    words = _numpy_philox(seed, stream, tag, start // 4).random_raw(offset + count)
    return np.asarray(words, dtype=np.uint64)[offset:]


def words_to_uniform(words: np.ndarray) -> np.ndarray:
    """Map 64-bit words to doubles in ``[0, 1)`` using the top 53 bits."""
    return (np.asarray(words, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def uniforms(seed: int, stream: int, tag: int, count: int, start: int = 0) -> np.ndarray:
    return words_to_uniform(random_words(seed, stream, tag, start, count))


def uniforms_across_streams(seed: int, streams: np.ndarray, tag: int, index: int) -> np.ndarray:
    """The ``index``-th uniform of every stream in ``streams`` (one per replication)."""
    streams = np.asarray(streams, dtype=np.uint64)
    ctr = np.zeros((streams.size, 4), dtype=np.uint64)
    ctr[:, 0] = np.uint64(index // 4)
    ctr[:, 1] = streams
    ctr[:, 2] = np.uint64(tag)
    words = philox4x64(ctr, (seed, 0))[:, index % 4]
    return words_to_uniform(words)


def block_uniforms_across_streams(seed: int, streams: np.ndarray, tag: int, block: int) -> np.ndarray:
    """All four uniforms of counter block ``block`` for each stream; shape (n, 4)."""
    streams = np.asarray(streams, dtype=np.uint64)
    ctr = np.zeros((streams.size, 4), dtype=np.uint64)
    ctr[:, 0] = np.uint64(block)
    ctr[:, 1] = streams
    ctr[:, 2] = np.uint64(tag)
    return words_to_uniform(philox4x64(ctr, (seed, 0)))


class UniformStream:
    """Sequential reader over one ``(seed, stream, tag)`` sequence, buffered in chunks."""

    def __init__(self, seed: int, stream: int = 0, tag: int = TAG_MAIN, chunk: int = 4096):
        self.seed, self.stream, self.tag = seed, stream, tag
        self._chunk = max(4, chunk - chunk % 4)
        self._buf = np.empty(0)
        self._pos = 0
        self._next_start = 0

    def take(self, count: int) -> np.ndarray:
        """The next ``count`` uniforms as an array."""
        out = np.empty(count)
        filled = 0
        while filled < count:
            if self._pos >= self._buf.size:
                self._refill(max(self._chunk, count - filled))
            step = min(count - filled, self._buf.size - self._pos)
            out[filled : filled + step] = self._buf[self._pos : self._pos + step]
            self._pos += step
            filled += step
        return out

    def next(self) -> float:
        if self._pos >= self._buf.size:
            self._refill(self._chunk)
        u = float(self._buf[self._pos])
        self._pos += 1
        return u

    def _refill(self, count: int) -> None:
        self._buf = uniforms(self.seed, self.stream, self.tag, count, start=self._next_start)
        self._next_start += count
        self._pos = 0
