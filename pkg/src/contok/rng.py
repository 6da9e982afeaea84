"""Named random substreams derived from one integer seed.

Every consumer of randomness asks for its own stream by name (``"init"``,
``"gumbel"``, ``"shuffle"``, ``"data"``), so changing how one stage draws
numbers never shifts another stage's draws.
"""

import hashlib

import numpy as np


def _key(name):
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def substream(seed, *names):
    """A ``numpy.random.Generator`` for ``(seed, *names)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))
