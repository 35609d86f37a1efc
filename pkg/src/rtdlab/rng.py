"""Counter-based random streams keyed by (seed, step, purpose)."""

import zlib

import numpy as np
import torch


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, step: int, purpose: str) -> np.random.Generator:
    """Independent Philox generator for one (seed, step, purpose) key.

    Streams for different keys never share state, so data order, masks and
    samples can be replayed from any step without replaying earlier draws.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(step), _purpose_code(purpose)])
    return np.random.Generator(np.random.Philox(ss))


def torch_generator(seed: int, step: int, purpose: str) -> torch.Generator:
    key = stream(seed, step, purpose).integers(0, 2**62)
    g = torch.Generator()
    g.manual_seed(int(key))
    return g
