"""Counter-based random streams.

Every draw is a pure function of ``(seed, replica_id, step, tag, element)``, so
a replica produces the same numbers whether it runs alone, in a batch, or in
a worker thread. The block cipher is Philox4x32-10, evaluated with numpy
integer arithmetic so that whole batches of replicas are generated at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)

# Tags separate the independent draws made inside one transition.
TAG_VELOCITY = 0
TAG_ACCEPT = 1
TAG_RESIDUAL = 2  # residual proposals use TAG_RESIDUAL + 2*attempt (+1 for the uniform)


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function.

    ``counter`` is a sequence of four uint32-valued arrays (broadcastable),
    ``key`` a pair of uint32 scalars. Returns four uint32 arrays stored as
    uint64.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK32 for c in counter)
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> np.uint64(32)) ^ c1 ^ k0,
            p1 & _MASK32,
            (p0 >> np.uint64(32)) ^ c3 ^ k1,
            p0 & _MASK32,
        )
    return c0, c1, c2, c3


def _to_unit(hi, lo):
    # 53-bit uniform in [0, 1)
    bits = ((hi >> np.uint64(5)) << np.uint64(26)) | (lo >> np.uint64(6))
    return bits.astype(np.float64) * (1.0 / 9007199254740992.0)


def _layout(shape):
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(n) for n in shape)
    size = int(np.prod(shape, dtype=np.int64))
    return shape, size, (size + 1) // 2


@dataclass(frozen=True)
class Streams:
    """Random streams for one replica (scalar ``replicas``) or a batch of them.

    Output arrays have shape ``replicas.shape + shape``.
    """

    seed: int
    replicas: np.ndarray

    def __init__(self, seed: int, replicas=0):
        object.__setattr__(self, "seed", int(seed) & 0xFFFFFFFFFFFFFFFF)
        object.__setattr__(self, "replicas", np.asarray(replicas, dtype=np.uint64))

    @property
    def key(self):
        return (self.seed & 0xFFFFFFFF, self.seed >> 32)

    def subset(self, index) -> "Streams":
        return Streams(self.seed, self.replicas[index])

    def _blocks(self, step: int, tag: int, n_blocks: int):
        # counter words: (element block, step, replica, tag); replica ids and
        # steps are taken modulo 2**32
        rep = self.replicas[..., None]
        blocks = np.arange(n_blocks, dtype=np.uint64)
        return philox4x32((blocks, np.uint64(step), rep, np.uint64(tag)), self.key)

    def uniform(self, step: int, tag: int, shape=()) -> np.ndarray:
        shape, size, n_blocks = _layout(shape)
        w0, w1, w2, w3 = self._blocks(step, tag, n_blocks)
        u = np.stack([_to_unit(w0, w1), _to_unit(w2, w3)], axis=-1)
        u = u.reshape(self.replicas.shape + (2 * n_blocks,))[..., :size]
        return u.reshape(self.replicas.shape + shape)

    def normal(self, step: int, tag: int, shape=()) -> np.ndarray:
        shape, size, n_blocks = _layout(shape)
        w0, w1, w2, w3 = self._blocks(step, tag, n_blocks)
        radius = np.sqrt(-2.0 * np.log1p(-_to_unit(w0, w1)))
        angle = 2.0 * np.pi * _to_unit(w2, w3)
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)
        z = z.reshape(self.replicas.shape + (2 * n_blocks,))[..., :size]
        return z.reshape(self.replicas.shape + shape)
