"""Deterministic random source.

Contract: a splittable counter-based generator.  Every stream is keyed by a
tuple of integers (seed, purpose, substream...); within a stream the i-th
64-bit word is a pure function of (key, i).  Streams are realized as Philox
bit generators keyed through ``numpy.random.SeedSequence``, which is a stable,
documented hashing scheme.  Gaussians are produced by inverse-CDF applied to
uniforms built from the top 53 bits of each word, so results are identical
no matter how work is scheduled across threads or chunks.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

# purpose ids keep independent uses of the same user seed disjoint
LIFT = 1
SIM_XI = 2
SIM_W = 3
OUTER = 4
BUMP = 5

_INV53 = 2.0 ** -53


def stream(seed: int, *ids: int) -> np.random.Generator:
    """Generator for the (seed, *ids) stream; same arguments, same stream."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(i) for i in ids))
    return np.random.Generator(np.random.Philox(ss))


def uniforms(seed: int, ids: tuple, n: int) -> np.ndarray:
    """n uniforms in the open interval (0, 1) from the given stream."""
    words = stream(seed, *ids).integers(0, 2**64, size=n, dtype=np.uint64)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53


def normals(seed: int, ids: tuple, n: int) -> np.ndarray:
    """n standard Gaussians via inverse-CDF; deterministic in (seed, ids)."""
    return ndtri(uniforms(seed, ids, n))
