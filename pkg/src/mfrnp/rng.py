"""Named, independent random substreams derived from one run seed."""

import zlib

import numpy as np


def substream(seed, name):
    """Generator for ``name`` under ``seed``; streams with different names never overlap."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))
