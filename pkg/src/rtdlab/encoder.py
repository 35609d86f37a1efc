"""Generator/discriminator transformer encoders with shared embeddings.

Both towers read the same token and position embedding arrays. Each tower
owns its embedding layer norm and an input projection from the embedding
width to its hidden width. The generator's MLM head projects back to the
embedding width and scores against the (tied) token embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

INIT_STD = 0.02


@dataclass(frozen=True)
class TowerConfig:
    layers: int
    hidden: int
    ffn: int
    heads: int

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")

    @property
    def head_size(self) -> int:
        return self.hidden // self.heads


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    ffn: int = 256
    heads: int = 4
    embed: int = 64
    vocab: int = 512
    max_len: int = 64
    gen_mult: float = 0.25
    ln_eps: float = 1e-12
    init_std: float = INIT_STD

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by the number of heads")
        if not 0.0 < self.gen_mult <= 1.0:
            raise ValueError("generator multiplier must lie in (0, 1]")

    @property
    def disc(self) -> TowerConfig:
        return TowerConfig(self.layers, self.hidden, self.ffn, self.heads)

    @property
    def gen(self) -> TowerConfig:
        return derive_generator_config(self.disc, self.gen_mult)


def derive_generator_config(disc: TowerConfig, g: float) -> TowerConfig:
    """Scale hidden, FFN and head counts by ``g`` (rounded, at least 1).

    Layer count and embedding width are untouched. If the scaled hidden size
    is not divisible by the scaled head count, heads are reduced until it is.
    """
    if not 0.0 < g <= 1.0:
        raise ValueError("generator multiplier must lie in (0, 1]")
    hidden = max(1, round(g * disc.hidden))
    ffn = max(1, round(g * disc.ffn))
    heads = max(1, round(g * disc.heads))
    while hidden % heads:
        heads -= 1
    return TowerConfig(disc.layers, hidden, ffn, heads)


def _linear(d_in: int, d_out: int, bias: bool = True) -> nn.Linear:
    return nn.Linear(d_in, d_out, bias=bias)


class SelfAttention(nn.Module):
    def __init__(self, cfg: TowerConfig):
        super().__init__()
        self.heads = cfg.heads
        self.qkv = _linear(cfg.hidden, 3 * cfg.hidden)
        self.out = _linear(cfg.hidden, cfg.hidden)

    def forward(self, h: torch.Tensor, return_weights: bool = False):
        B, n, H = h.shape
        d = H // self.heads
        q, k, v = self.qkv(h).view(B, n, 3, self.heads, d).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        weights = scores.softmax(dim=-1)
        ctx = (weights @ v).transpose(1, 2).reshape(B, n, H)
        out = self.out(ctx)
        return (out, weights) if return_weights else out


class Block(nn.Module):
    """Post-layer-norm transformer block (original BERT ordering)."""

    def __init__(self, cfg: TowerConfig, eps: float):
        super().__init__()
        self.attn = SelfAttention(cfg)
        self.ln1 = nn.LayerNorm(cfg.hidden, eps=eps)
        self.ff_in = _linear(cfg.hidden, cfg.ffn)
        self.ff_out = _linear(cfg.ffn, cfg.hidden)
        self.ln2 = nn.LayerNorm(cfg.hidden, eps=eps)

    def forward(self, h, return_weights=False):
        a = self.attn(h, return_weights)
        if return_weights:
            a, w = a
        h = self.ln1(h + a)
        h = self.ln2(h + self.ff_out(F.gelu(self.ff_in(h))))
        return (h, w) if return_weights else h


class Tower(nn.Module):
    def __init__(self, cfg: TowerConfig, embed: int, eps: float):
        super().__init__()
        self.cfg = cfg
        self.emb_ln = nn.LayerNorm(embed, eps=eps)
        self.in_proj = _linear(embed, cfg.hidden)
        self.blocks = nn.ModuleList(Block(cfg, eps) for _ in range(cfg.layers))

    def forward(self, emb: torch.Tensor, return_weights: bool = False):
        h = self.in_proj(self.emb_ln(emb))
        weights = []
        for blk in self.blocks:
            if return_weights:
                h, w = blk(h, True)
                weights.append(w)
            else:
                h = blk(h)
        return (h, weights) if return_weights else h


GENERATOR, DISCRIMINATOR = "generator", "discriminator"


class RTDModel(nn.Module):
    """All learnable arrays for every pre-training variant.

    Parameter groups (by name prefix):
      ``embed.*``      token/position embeddings shared by both towers
      ``gen.*``        generator tower, ``gen_out`` MLM projection, ``baseline`` head
      ``disc.*``       discriminator tower, ``disc_head`` (w, b) and ``disc_mlm_out``
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Parameter(torch.empty(config.vocab, config.embed))
        self.pos_emb = nn.Parameter(torch.empty(config.max_len, config.embed))
        gcfg = config.gen
        self.gen = Tower(gcfg, config.embed, config.ln_eps)
        self.gen_out = _linear(gcfg.hidden, config.embed)
        self.baseline = _linear(gcfg.hidden, 1)
        self.disc = Tower(config.disc, config.embed, config.ln_eps)
        self.disc_head = _linear(config.hidden, 1)
        self.disc_mlm_out = _linear(config.hidden, config.embed)

    # -- forwards ------------------------------------------------------------

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        n = ids.shape[-1]
        if n > self.config.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        if ids.numel() and (int(ids.max()) >= self.config.vocab or int(ids.min()) < 0):
            raise ValueError("token id out of vocabulary range")
        return self.tok_emb[ids] + self.pos_emb[:n]

    def hidden(self, tower: str, ids, return_weights: bool = False):
        ids = torch.as_tensor(ids, dtype=torch.long)
        t = self.gen if tower == GENERATOR else self.disc if tower == DISCRIMINATOR else None
        if t is None:
            raise ValueError(f"unknown tower {tower!r}")
        return t(self.embed(ids), return_weights)

    def gen_logits(self, h_gen: torch.Tensor) -> torch.Tensor:
        return mlm_logits(h_gen, self.gen_out, self.tok_emb)

    def disc_mlm_logits(self, h_disc: torch.Tensor) -> torch.Tensor:
        return mlm_logits(h_disc, self.disc_mlm_out, self.tok_emb)

    def disc_logits(self, h_disc: torch.Tensor) -> torch.Tensor:
        return self.disc_head(h_disc).squeeze(-1)

    def baseline_logits(self, h_gen: torch.Tensor) -> torch.Tensor:
        return self.baseline(h_gen).squeeze(-1)

    # -- parameter bookkeeping ------------------------------------------------

    def named_arrays(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def group_of(self, name: str) -> str:
        if name in ("tok_emb", "pos_emb"):
            return "embed"
        if name.startswith(("gen.", "gen_out.", "baseline.")):
            return "gen"
        return "disc"

    def copy_generator_to_discriminator(self) -> None:
        """Overwrite the discriminator tower with an exact copy of the generator tower."""
        if self.config.gen != self.config.disc:
            raise ValueError("two-stage requires equal sizes")
        with torch.no_grad():
            for (gn, gp), (dn, dp) in zip(self.gen.named_parameters(), self.disc.named_parameters()):
                assert gn == dn
                dp.copy_(gp)


def mlm_logits(h: torch.Tensor, out_proj: nn.Linear, tok_emb: torch.Tensor) -> torch.Tensor:
    """Tied-softmax logits: project hidden states to embedding width, dot with every token embedding."""
    return out_proj(h) @ tok_emb.t()


def init_params(config: ModelConfig, seed: int, dtype=torch.float32) -> RTDModel:
    """Truncated-normal(0, init_std) weights cut at 2 std, zero biases, unit layer-norm gains."""
    model = RTDModel(config)
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or "emb_ln" in name:
                p.fill_(1.0)
            else:
                std = config.init_std
                nn.init.trunc_normal_(p, 0.0, std, -2 * std, 2 * std, generator=g)
    return model.to(dtype)


def generator_probs(logits: torch.Tensor) -> torch.Tensor:
    return logits.softmax(dim=-1)


def discriminator_probs(logits: torch.Tensor) -> torch.Tensor:
    """Probability that each position holds the original token."""
    return torch.sigmoid(logits)


def with_gen_mult(config: ModelConfig, g: float) -> ModelConfig:
    return replace(config, gen_mult=g)
