"""Named seed substreams.

Every source of randomness in the pipeline derives from one root seed via
stable names, so reruns are bit-identical and independent stages (data /
train / generation / eval) never share a stream.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, *names) -> int:
    """Deterministic 63-bit seed for the substream ``root/name1/name2/...``."""
    key = ":".join([str(int(root))] + [str(n) for n in names])
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def np_rng(root: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))


def torch_rng(root: int, *names) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, *names))
    return g
