"""Root-seed splitting. Every random draw in a run derives from one integer."""

import zlib
from typing import Union

import numpy as np
import torch

Key = Union[int, str]


def _as_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & 0xFFFFFFFF


def derive_seed(root: int, *keys: Key) -> int:
    """Deterministic 63-bit child seed for (root, keys...)."""
    seq = np.random.SeedSequence([int(root) & 0xFFFFFFFF] + [_as_int(k) for k in keys])
    hi, lo = (int(x) for x in seq.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) & ((1 << 63) - 1)


def numpy_rng(root: int, *keys: Key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))


def torch_generator(root: int, *keys: Key) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(root, *keys))
    return gen
