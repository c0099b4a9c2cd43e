"""Seed splitting.

Every random stream in deepmeta is derived from the experiment's root seed
plus a tuple of labels, so that no two components share a stream and
adding a consumer never shifts the draws of another one::

    rng = stream(root_seed, "train", "tasks")
    rng = stream(root_seed, "eval", "test", task_index)

String labels are mapped to integers with CRC-32 so derivation is stable
across processes and Python versions.
"""

import zlib
from typing import Union

import numpy as np

Label = Union[int, str]


def _label_key(label: Label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"seed labels must be non-negative, got {label}")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def derive_seed(root: int, *labels: Label) -> np.random.SeedSequence:
    """Return the seed sequence for the stream named by ``labels``."""
    return np.random.SeedSequence(
        entropy=int(root), spawn_key=tuple(_label_key(l) for l in labels)
    )


def stream(root: int, *labels: Label) -> np.random.Generator:
    """Return an independent generator for the stream named by ``labels``."""
    return np.random.Generator(np.random.PCG64(derive_seed(root, *labels)))


def child_seed(root: int, *labels: Label) -> int:
    """Derive a plain 63-bit integer seed (for configs that store seeds)."""
    state = derive_seed(root, *labels).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])
