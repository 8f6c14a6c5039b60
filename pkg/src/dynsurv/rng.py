"""Deterministic substream derivation for seeded computations.

Every stochastic routine in the package derives its generator through
``substream(seed, *parts)`` so that results are bit-reproducible for a fixed
seed and independent of worker scheduling: each job's stream is keyed by its
identity (replicate index, draw index, subject id, landmark time, ...), never
by the order in which jobs happen to run.
"""

import hashlib

import numpy as np


def _part_to_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    if isinstance(part, (float, np.floating)):
        return int(np.float64(part).view(np.uint64))
    raise TypeError(f"unsupported substream key part: {part!r}")


def substream(seed: int, *parts) -> np.random.Generator:
    """Return a generator keyed by ``seed`` and an arbitrary identity tuple."""
    entropy = [_part_to_int(seed)] + [_part_to_int(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))
