"""Named sub-seeds derived from one master seed.

``derive_seed(master, *names)`` is the first 8 bytes (big-endian) of
``sha256("master/name1/name2/...")``. Adding a new consumer name never shifts
the stream of an existing one.
"""
import hashlib

import numpy as np


def derive_seed(master: int, *names) -> int:
    key = "/".join([str(int(master))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")


def stream(master: int, *names) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by the derived seed."""
    key = "/".join([str(int(master))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "big")))
