"""Text ingestion, vocabularies, batching and synthetic Markov corpora."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import rng as rngmod

PAD, UNK, MASK = "[PAD]", "[UNK]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, MASK)
PAD_ID, UNK_ID, MASK_ID = 0, 1, 2
NUM_SPECIAL = len(SPECIAL_TOKENS)


class CorpusError(ValueError):
    pass


@dataclass
class Vocab:
    tokens: list[str]
    ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise CorpusError("special tokens must occupy ids 0..2")
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise CorpusError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self.ids.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: str, max_size: int) -> Vocab:
    """Frequency-ranked vocabulary; ties broken lexicographically."""
    if max_size < NUM_SPECIAL + 1:
        raise CorpusError("max_size must be at least 4")
    counts = Counter(corpus.split())
    for s in SPECIAL_TOKENS:
        counts.pop(s, None)
    if not counts:
        raise CorpusError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [t for t, _ in ranked[: max_size - NUM_SPECIAL]]
    return Vocab(list(SPECIAL_TOKENS) + keep)


def encode(text: str, vocab: Vocab) -> list[int]:
    return [vocab.lookup(t) for t in text.split()]


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.tokens[int(i)] for i in ids)


@dataclass
class TokenBatch:
    ids: np.ndarray  # int64 [batch, n]
    valid: np.ndarray | None = None  # bool [batch, n]; all True for packed windows

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.valid is None:
            self.valid = np.ones(self.ids.shape, dtype=bool)

    @property
    def batch(self) -> int:
        return self.ids.shape[0]

    @property
    def n(self) -> int:
        return self.ids.shape[1]


def windows(ids: Sequence[int] | np.ndarray, n: int) -> np.ndarray:
    """Non-overlapping length-n windows; the trailing remainder is dropped."""
    if n < 2:
        raise CorpusError("sequence length must be >= 2")
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size < n:
        raise CorpusError("corpus shorter than sequence length")
    count = arr.size // n
    return arr[: count * n].reshape(count, n)


def make_batches(ids, n: int, batch: int, seed: int) -> Iterator[TokenBatch]:
    """One shuffled pass over the windows of a token stream.

    Every window is emitted exactly once; the final batch may be short.
    """
    if batch < 1:
        raise CorpusError("batch must be >= 1")
    w = windows(ids, n)
    order = rngmod.stream(seed, 0, "window-order").permutation(len(w))
    for start in range(0, len(order), batch):
        yield TokenBatch(w[order[start : start + batch]])


def batch_for_step(w: np.ndarray, batch: int, seed: int, step: int) -> TokenBatch:
    """Full batch for a training step, cycling through seeded epoch permutations.

    Depends only on (windows, batch, seed, step), so a resumed run sees the
    same data as an uninterrupted one.
    """
    count = len(w)
    idx = np.arange(step * batch, (step + 1) * batch)
    epochs, pos = np.divmod(idx, count)
    rows = np.empty(batch, dtype=np.int64)
    for e in np.unique(epochs):
        perm = rngmod.stream(seed, int(e), "epoch-order").permutation(count)
        sel = epochs == e
        rows[sel] = perm[pos[sel]]
    return TokenBatch(w[rows])


@dataclass
class UnigramTable:
    probs: np.ndarray  # float64 [|V|]; zero on special ids

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise CorpusError("unigram probabilities must be non-negative and sum to 1")
        if np.any(p[:NUM_SPECIAL] != 0):
            raise CorpusError("special tokens cannot carry unigram mass")
        self.probs = p


def unigram_table(ids: Sequence[int] | np.ndarray, vocab: Vocab) -> UnigramTable:
    arr = np.asarray(ids, dtype=np.int64)
    counts = np.bincount(arr, minlength=len(vocab)).astype(np.float64)
    counts[:NUM_SPECIAL] = 0
    total = counts.sum()
    if total == 0:
        raise CorpusError("empty stream")
    return UnigramTable(counts / total)


# --- synthetic corpora -------------------------------------------------------


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Seeded Markov source over ``vocab_size`` word types.

    With ``regimes > 1`` the stream alternates between chains in blocks of
    ``block_length`` tokens. Order-1 chains are doubly stochastic (convex
    mixtures of permutations plus a uniform ``leak``), so every regime has
    the same uniform unigram distribution and only transitions tell regimes
    apart.

    ``n_groups == 1``: regimes share all but their last ``private_perms``
    permutation components.

    ``n_groups > 1`` (a power of two): words are split into equal groups and
    regime ``r`` pairs group ``i`` with group ``i ^ (r + 1)``. Apart from the
    leak, the chain never leaves the pair it starts in, so a window's regime
    shows in which groups co-occur rather than in any single word's
    frequency.
    """

    vocab_size: int = 64
    order: int = 1
    transition_seed: int = 0
    length: int = 100_000
    regimes: int = 1
    block_length: int = 256
    n_perms: int = 4
    private_perms: int = 2
    n_groups: int = 1
    leak: float = 0.0

    def __post_init__(self):
        if self.order not in (1, 2):
            raise CorpusError("Markov order must be 1 or 2")
        if self.vocab_size < 2 or self.length < 1 or self.regimes < 1:
            raise CorpusError("invalid synthetic corpus spec")
        if not 0 <= self.private_perms <= self.n_perms:
            raise CorpusError("private_perms must lie in [0, n_perms]")
        if self.n_groups > 1:
            g = self.n_groups
            if g & (g - 1) or self.vocab_size % g or self.regimes >= g:
                raise CorpusError("n_groups must be a power of two dividing vocab_size and exceed regimes")
        if not 0.0 <= self.leak <= 1.0:
            raise CorpusError("leak must lie in [0, 1]")


def synthetic_token(i: int) -> str:
    return f"w{i}"


def synthetic_vocab(spec: SyntheticCorpusSpec) -> Vocab:
    """Word ``w{i}`` gets id ``i + 3``."""
    return Vocab(list(SPECIAL_TOKENS) + [synthetic_token(i) for i in range(spec.vocab_size)])


def transition_matrix(spec: SyntheticCorpusSpec, regime: int = 0) -> np.ndarray:
    """Row-stochastic matrix of shape [vocab_size**order, vocab_size]."""
    V = spec.vocab_size
    rs = rngmod.stream(spec.transition_seed, 0, "transitions")
    weights = rs.dirichlet(np.full(spec.n_perms, 2.0))
    if spec.n_groups > 1:
        perms = _paired_group_perms(spec, regime, spec.n_perms)
    else:
        shared = [rs.permutation(V) for _ in range(spec.n_perms - spec.private_perms)]
        rr = rngmod.stream(spec.transition_seed, regime + 1, "regime-transitions")
        perms = shared + [rr.permutation(V) for _ in range(spec.private_perms)]
    if spec.order == 1:
        P = np.zeros((V, V))
        for w, perm in zip(weights, perms):
            P[np.arange(V), perm] += w
    else:
        rows = V * V
        P = np.zeros((rows, V))
        prev2, prev1 = np.divmod(np.arange(rows), V)
        for j, (w, perm) in enumerate(zip(weights, perms)):
            P[np.arange(rows), perm[(prev1 + (j + 1) * prev2) % V]] += w
    return (1.0 - spec.leak) * P + spec.leak / V


def group_of(spec: SyntheticCorpusSpec, word: np.ndarray | int):
    return np.asarray(word) // (spec.vocab_size // spec.n_groups)


def _paired_group_perms(spec: SyntheticCorpusSpec, regime: int, count: int) -> list[np.ndarray]:
    """Permutations mapping every word into its regime's group pair."""
    V, G = spec.vocab_size, spec.n_groups
    size = V // G
    partner = np.arange(G) ^ (regime + 1)
    rr = rngmod.stream(spec.transition_seed, regime + 1, "regime-transitions")
    perms = []
    for _ in range(count):
        perm = np.empty(V, dtype=np.int64)
        for g in range(G):
            if partner[g] < g:
                continue
            members = np.concatenate([np.arange(g * size, (g + 1) * size),
                                      np.arange(partner[g] * size, (partner[g] + 1) * size)])
            perm[members] = rr.permutation(members)
        perms.append(perm)
    return perms


def _sample_chain(P: np.ndarray, order: int, V: int, length: int, rs: np.random.Generator, state):
    cdf = np.cumsum(P, axis=1)
    cdf[:, -1] = 1.0
    u = rs.random(length)
    out = np.empty(length, dtype=np.int64)
    a, b = state
    for i in range(length):
        row = b if order == 1 else a * V + b
        nxt = int(np.searchsorted(cdf[row], u[i], side="right"))
        out[i] = nxt
        a, b = b, nxt
    return out, (a, b)


def synthetic_ids(spec: SyntheticCorpusSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Word indices (0-based) and the regime label of every token."""
    V = spec.vocab_size
    mats = [transition_matrix(spec, r) for r in range(spec.regimes)]
    rs = rngmod.stream(seed, 0, "synthetic-corpus")
    state = tuple(int(x) for x in rs.integers(0, V, size=2))
    tokens = np.empty(spec.length, dtype=np.int64)
    labels = np.empty(spec.length, dtype=np.int64)
    pos, block = 0, 0
    while pos < spec.length:
        regime = block % spec.regimes if spec.regimes > 1 else 0
        size = min(spec.block_length if spec.regimes > 1 else spec.length, spec.length - pos)
        chunk, state = _sample_chain(mats[regime], spec.order, V, size, rs, state)
        tokens[pos : pos + size] = chunk
        labels[pos : pos + size] = regime
        pos += size
        block += 1
    return tokens, labels


def synthetic_corpus(spec: SyntheticCorpusSpec, seed: int) -> str:
    tokens, _ = synthetic_ids(spec, seed)
    return " ".join(synthetic_token(int(t)) for t in tokens)


def read_corpus(path: str | Path) -> str:
    return Path(path).read_text(encoding="utf-8")
