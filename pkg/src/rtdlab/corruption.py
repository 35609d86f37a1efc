"""Masking, replacement sampling and corrupted-input construction.

Everything here is numpy on integer id arrays of shape [batch, n]; the
random generator is always passed in explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import MASK_ID, NUM_SPECIAL, UnigramTable


class CorruptionError(ValueError):
    pass


@dataclass
class MaskSpec:
    positions: np.ndarray  # int64 [batch, k], sorted within each row

    @property
    def k(self) -> int:
        return self.positions.shape[1]

    def as_bool(self, n: int) -> np.ndarray:
        out = np.zeros((self.positions.shape[0], n), dtype=bool)
        np.put_along_axis(out, self.positions, True, axis=1)
        return out


def num_masked(n: int, mask_frac: float) -> int:
    # round first so 0.15 * 20 does not become ceil(3.0000000000000004) = 4
    return max(1, math.ceil(round(mask_frac * n, 9)))


def sample_mask_positions(n: int, mask_frac: float, rng: np.random.Generator, batch: int = 1) -> MaskSpec:
    """k = ceil(mask_frac * n) distinct positions per sequence, uniformly without replacement."""
    if not 0.0 < mask_frac < 1.0:
        raise CorruptionError("mask_frac must lie in (0, 1)")
    if n < 1:
        raise CorruptionError("sequence length must be >= 1")
    k = num_masked(n, mask_frac)
    keys = rng.random((batch, n))
    pos = np.argsort(keys, axis=1, kind="stable")[:, :k]
    return MaskSpec(np.sort(pos, axis=1))


def _check_spec(ids: np.ndarray, spec: MaskSpec) -> None:
    if spec.k < 1:
        raise CorruptionError("mask must cover at least one position")
    if spec.positions.shape[0] != ids.shape[0]:
        raise CorruptionError("mask batch size does not match ids")
    if spec.positions.min() < 0 or spec.positions.max() >= ids.shape[1]:
        raise CorruptionError("mask position out of range")


def apply_mask(ids: np.ndarray, spec: MaskSpec) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    _check_spec(ids, spec)
    out = ids.copy()
    np.put_along_axis(out, spec.positions, MASK_ID, axis=1)
    return out


def sample_replacements(probs: np.ndarray, rng: np.random.Generator, atol: float = 1e-6) -> np.ndarray:
    """One categorical draw per row of ``probs`` (temperature 1)."""
    p = np.asarray(probs, dtype=np.float64)
    sums = p.sum(axis=-1)
    if np.any(p < 0) or np.any(np.abs(sums - 1.0) > atol):
        raise CorruptionError("replacement distribution is not normalized")
    flat = p.reshape(-1, p.shape[-1])
    cdf = np.cumsum(flat, axis=1)
    u = rng.random(flat.shape[0]) * cdf[:, -1]
    draws = (cdf <= u[:, None]).sum(axis=1)
    # guard against u landing exactly on the top edge through rounding
    draws = np.minimum(draws, flat.shape[1] - 1)
    return draws.reshape(p.shape[:-1]).astype(np.int64)


def unigram_replacements(table: UnigramTable, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(table.probs)
    u = rng.random(spec.positions.shape) * cdf[-1]
    draws = np.searchsorted(cdf, u, side="right")
    return np.minimum(draws, len(cdf) - 1).astype(np.int64)


@dataclass
class CorruptionRecord:
    originals: np.ndarray  # x
    masked: np.ndarray  # x^masked
    spec: MaskSpec
    samples: np.ndarray  # x-hat, [batch, k]
    corrupt: np.ndarray  # x^corrupt
    fake: np.ndarray  # bool [batch, n]; True where the corrupted token differs from x

    @property
    def real(self) -> np.ndarray:
        return ~self.fake


def build_corruption(x: np.ndarray, spec: MaskSpec, samples: np.ndarray, masked: np.ndarray | None = None) -> CorruptionRecord:
    """Replace masked positions with samples and label each position.

    A sampled token equal to the original is labeled real.
    """
    x = np.asarray(x, dtype=np.int64)
    samples = np.asarray(samples, dtype=np.int64)
    if samples.shape != spec.positions.shape:
        raise CorruptionError("need exactly one sample per masked position")
    if masked is None:
        masked = apply_mask(x, spec)
    else:
        _check_spec(x, spec)
    corrupt = x.copy()
    np.put_along_axis(corrupt, spec.positions, samples, axis=1)
    return CorruptionRecord(x, masked, spec, samples, corrupt, corrupt != x)


@dataclass(frozen=True)
class BertNoise:
    p_mask: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1

    def __post_init__(self):
        if abs(self.p_mask + self.p_random + self.p_keep - 1.0) > 1e-12:
            raise CorruptionError("80/10/10 probabilities must sum to 1")


def bert_noise(ids: np.ndarray, spec: MaskSpec, vocab_size: int, rng: np.random.Generator,
               noise: BertNoise = BertNoise()) -> np.ndarray:
    """BERT-style input noising at the masked positions.

    Each selected position independently becomes [MASK], a uniform random
    non-special token, or stays unchanged. All selected positions remain
    prediction targets whatever happened to them.
    """
    ids = np.asarray(ids, dtype=np.int64)
    _check_spec(ids, spec)
    out = ids.copy()
    u = rng.random(spec.positions.shape)
    rand_tok = rng.integers(NUM_SPECIAL, vocab_size, size=spec.positions.shape)
    current = np.take_along_axis(ids, spec.positions, axis=1)
    new = np.where(u < noise.p_mask, MASK_ID,
                   np.where(u < noise.p_mask + noise.p_random, rand_tok, current))
    np.put_along_axis(out, spec.positions, new, axis=1)
    return out
