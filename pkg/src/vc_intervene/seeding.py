"""One run seed, many independent streams.

Stream ``name`` of run seed ``s`` is ``SeedSequence([s, crc32(name)])``, so
adding a stream or reordering draws in one component never perturbs another,
and the result is independent of worker counts.
"""
import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def fan_out(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & _MASK64, zlib.crc32(name.encode("utf-8"))])


def rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(fan_out(seed, name))
