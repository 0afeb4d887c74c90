"""Labeled random streams.

All randomness in the package hangs off one root seed. Consumers (mask
sampling, batch anchors, env dropping, policy sampling, weight init) each get
a child stream derived from the root seed plus string/number labels, so
toggling one consumer never perturbs the draws seen by another.
"""

import hashlib

import numpy as np


def _label_hash(label) -> int:
    if isinstance(label, float):
        text = format(label, ".17g")
    else:
        text = str(label)
    digest = hashlib.sha256(f"{type(label).__name__}:{text}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def child_seed(root_seed: int, *labels) -> int:
    """Derive a 64-bit seed for the stream named by `labels`."""
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF] + [_label_hash(l) for l in labels]
    ss = np.random.SeedSequence(entropy=entropy)
    return int(ss.generate_state(1, np.uint64)[0])


def child_rng(root_seed: int, *labels) -> np.random.Generator:
    """Independent numpy generator for the stream named by `labels`."""
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF] + [_label_hash(l) for l in labels]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=entropy)))
