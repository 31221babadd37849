"""Deterministic per-component RNG streams from one global seed.

Streams are counter-based (Philox) and keyed by (seed, component name), so
the order in which components draw numbers can never perturb another
component's stream.
"""

import numpy as np

from .datasets import fnv1a64


def stream(seed, name):
    """Independent Generator for a named component under a global seed."""
    key = fnv1a64(f"{int(seed)}:{name}".encode("utf-8"))
    return np.random.Generator(np.random.Philox(key=key))
