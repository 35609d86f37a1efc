"""Closed-form FLOP counts for the encoders and training variants.

Conventions: an m x k by k x n product costs 2*m*k*n; embedding lookups are
dense one-hot products; every elementwise op (including exp) costs 1; a
backward pass costs the same as its forward pass. Loss arithmetic and
sampling are not counted.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .corruption import num_masked
from .encoder import ModelConfig, TowerConfig

# Elementwise op constants, per element. Changing one here re-derives every total.
ELEMENTWISE_OPS = {
    "bias": 1,
    "residual": 1,
    "embed_add": 1,
    "attn_scale": 1,
    "softmax": 3,  # subtract max, exp, divide
    "softmax_reduce": 1,  # running sum
    "layernorm": 7,  # mean, subtract, square, variance, normalize, gain, shift
    "gelu": 5,  # x * 0.5 * (1 + erf(x / sqrt 2))
    "sigmoid": 4,  # negate, exp, add, reciprocal
}

OP_CLASSES = ("embedding", "attention", "ffn", "heads", "elementwise")


def matmul_flops(m: int, k: int, n: int) -> int:
    if min(m, k, n) < 1:
        raise ValueError("matmul dimensions must be positive")
    return 2 * m * k * n


def _ew(kind: str, count: int) -> int:
    return ELEMENTWISE_OPS[kind] * count


@dataclass
class FlopsReport:
    """FLOPs per batch, broken down by op class and by tower."""

    breakdown: dict[str, int] = field(default_factory=lambda: dict.fromkeys(OP_CLASSES, 0))
    per_tower: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.breakdown.values())

    @property
    def matmul(self) -> int:
        return self.total - self.breakdown["elementwise"]

    def add(self, tower: str, parts: dict[str, int], times: int = 1) -> "FlopsReport":
        for k, v in parts.items():
            self.breakdown[k] += times * v
        self.per_tower[tower] = self.per_tower.get(tower, 0) + times * sum(parts.values())
        return self

    def scaled(self, factor: int) -> "FlopsReport":
        return FlopsReport({k: v * factor for k, v in self.breakdown.items()},
                           {k: v * factor for k, v in self.per_tower.items()})


def tower_body(cfg: TowerConfig, embed: int, vocab: int, max_len: int, n: int) -> dict[str, int]:
    """One sequence through embeddings, input projection and all blocks."""
    H, F, A = cfg.hidden, cfg.ffn, cfg.heads
    c = Counter()
    c["embedding"] += matmul_flops(n, vocab, embed) + matmul_flops(n, max_len, embed)
    c["embedding"] += matmul_flops(n, embed, H)
    c["elementwise"] += _ew("embed_add", n * embed) + _ew("layernorm", n * embed) + _ew("bias", n * H)
    for _ in range(cfg.layers):
        c["attention"] += matmul_flops(n, H, 3 * H)
        c["attention"] += 2 * A * matmul_flops(n, cfg.head_size, n)  # scores and weighted sum
        c["attention"] += matmul_flops(n, H, H)
        c["elementwise"] += _ew("bias", 3 * n * H) + _ew("attn_scale", A * n * n)
        c["elementwise"] += _ew("softmax", A * n * n) + _ew("softmax_reduce", A * n * n)
        c["elementwise"] += _ew("bias", n * H) + _ew("residual", n * H) + _ew("layernorm", n * H)
        c["ffn"] += matmul_flops(n, H, F) + matmul_flops(n, F, H)
        c["elementwise"] += _ew("bias", n * F) + _ew("gelu", n * F)
        c["elementwise"] += _ew("bias", n * H) + _ew("residual", n * H) + _ew("layernorm", n * H)
    return dict(c)


def mlm_head(hidden: int, embed: int, vocab: int, positions: int) -> dict[str, int]:
    return {
        "heads": matmul_flops(positions, hidden, embed) + matmul_flops(positions, embed, vocab),
        "elementwise": _ew("bias", positions * embed) + _ew("softmax", positions * vocab)
        + _ew("softmax_reduce", positions * vocab),
    }


def sigmoid_head(hidden: int, positions: int) -> dict[str, int]:
    return {"heads": matmul_flops(positions, hidden, 1),
            "elementwise": _ew("bias", positions) + _ew("sigmoid", positions)}


def _merge(*parts: dict[str, int]) -> dict[str, int]:
    c = Counter()
    for p in parts:
        c.update(p)
    return dict(c)


def tower_forward(config: ModelConfig, tower: str, seq_len: int, variant: str, mask_frac: float = 0.15) -> dict[str, int]:
    """Forward cost of one sequence through one tower plus the heads ``variant`` uses on it."""
    E, V, L = config.embed, config.vocab, config.max_len
    k = num_masked(seq_len, mask_frac)
    if tower == "generator":
        g = config.gen
        parts = [tower_body(g, E, V, L, seq_len), mlm_head(g.hidden, E, V, k)]
        if variant == "adversarial":
            parts.append(sigmoid_head(g.hidden, k))
        return _merge(*parts)
    d = config.disc
    parts = [tower_body(d, E, V, L, seq_len)]
    if variant == "bert":
        parts.append(mlm_head(d.hidden, E, V, k))
    elif variant == "replace-mlm":
        parts.append(mlm_head(d.hidden, E, V, k))
    elif variant == "all-tokens-mlm":
        parts += [mlm_head(d.hidden, E, V, seq_len), sigmoid_head(d.hidden, seq_len)]
    else:
        parts.append(sigmoid_head(d.hidden, seq_len))
    return _merge(*parts)


TRAIN_VARIANTS = ("electra", "electra15", "bert", "replace-mlm", "all-tokens-mlm",
                  "unigram-electra", "two-stage-generator", "two-stage-discriminator", "adversarial")


def towers_for(variant: str) -> tuple[str, ...]:
    if variant == "bert":
        return ("bert",)
    if variant == "unigram-electra":
        return ("discriminator",)
    if variant == "two-stage-generator":
        return ("generator",)
    return ("generator", "discriminator")


def forward_flops(config: ModelConfig, seq_len: int, batch: int, variant: str = "electra",
                  mask_frac: float = 0.15) -> FlopsReport:
    """Forward-only FLOPs for a batch through every tower the variant runs.

    BERT is a single full-size tower with an MLM head.
    """
    rep = FlopsReport()
    for t in towers_for(variant):
        if t == "bert":
            rep.add("bert", tower_forward(config, "discriminator", seq_len, "bert", mask_frac), batch)
        else:
            rep.add(t, tower_forward(config, t, seq_len, variant, mask_frac), batch)
    return rep


def train_step_flops(config: ModelConfig, seq_len: int, batch: int, variant: str,
                     mask_frac: float = 0.15) -> FlopsReport:
    """Forward plus backward for one optimizer step.

    In the second stage of two-stage training the frozen generator only runs
    forward (to draw samples), so it is counted once.
    """
    if variant not in TRAIN_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    fwd = forward_flops(config, seq_len, batch, variant, mask_frac)
    if variant != "two-stage-discriminator":
        return fwd.scaled(2)
    rep = FlopsReport()
    rep.add("generator", tower_forward(config, "generator", seq_len, variant, mask_frac), batch)
    rep.add("discriminator", tower_forward(config, "discriminator", seq_len, variant, mask_frac), 2 * batch)
    return rep


def format_report(rep: FlopsReport, title: str = "") -> str:
    rows = [(k, v) for k, v in rep.breakdown.items()]
    rows += [("tower:" + k, v) for k, v in rep.per_tower.items()]
    rows += [("matmul", rep.matmul), ("total", rep.total)]
    width = max(len(k) for k, _ in rows)
    lines = [title] if title else []
    lines += [f"{k:<{width}}  {v:>16,d}" for k, v in rows]
    lines.append(f"{'matmul share':<{width}}  {rep.matmul / rep.total:>16.4f}")
    return "\n".join(lines)


def write_flops_csv(path, reports: dict[str, FlopsReport]) -> None:
    """One row per (report, item): item is an op class, ``tower:<name>``, ``matmul`` or ``total``."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["report", "item", "flops"])
        for name, rep in reports.items():
            for k, v in rep.breakdown.items():
                w.writerow([name, k, v])
            for k, v in rep.per_tower.items():
                w.writerow([name, f"tower:{k}", v])
            w.writerow([name, "matmul", rep.matmul])
            w.writerow([name, "total", rep.total])
