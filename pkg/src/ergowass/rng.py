"""Counter-based random streams keyed by (master seed, replica, level).

Every replica owns an independent Philox stream, so results never depend on
how replicas are scheduled across workers.  Within a stream the position is
the step index: drawing ``n`` normals and then ``m`` more gives the same
numbers as drawing ``n + m`` at once.
"""

import hashlib

import numpy as np

_KEY_WORDS = 2


def _derive_key(*parts):
    digest = hashlib.sha256(
        b"ergowass-rng:" + b":".join(str(int(p)).encode() for p in parts)
    ).digest()
    return np.frombuffer(digest[: 8 * _KEY_WORDS], dtype="<u8").copy()


def replica_stream(seed, replica, level=0):
    """Return the generator for one replica.

    ``level`` selects an auxiliary substream; level 0 drives the coarse path
    and level ``l > 0`` supplies the Brownian-bridge refinement used when the
    step is halved ``l`` times.
    """
    if replica < 0 or level < 0:
        raise ValueError("replica and level must be nonnegative")
    return np.random.Generator(np.random.Philox(key=_derive_key(seed, replica, level)))


def named_stream(seed, name):
    """Stream for non-replica randomness (bootstrap, limit-law sampling)."""
    h = int.from_bytes(hashlib.sha256(name.encode()).digest()[:7], "little")
    return np.random.Generator(np.random.Philox(key=_derive_key(seed, h, 1 << 20)))
