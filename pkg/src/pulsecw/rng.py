"""Named, index-addressable random substreams derived from one master seed."""

import numpy as np

STREAMS = {
    "frame": 1,
    "phase": 2,
    "bootstrap": 3,
}

MAX_SEED = 2**64 - 1


def substream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Independent generator for (seed, name, index).

    The same triple always yields the same stream, regardless of how many
    other streams were created before it or on which thread.
    """
    if not 0 <= int(seed) <= MAX_SEED:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[name], int(index)))
    return np.random.Generator(np.random.PCG64(ss))
