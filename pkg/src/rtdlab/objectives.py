"""Pre-training losses and the per-variant gradient entry point.

All losses are per-token means computed from logits in log space. A step is
split in two: :func:`prepare` draws masks and replacement samples without
tracking gradients, and :func:`variant_loss` evaluates the differentiable
loss for that frozen draw. Gradient checks perturb parameters against a
fixed :class:`Prepared` draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import UnigramTable
from .corruption import (BertNoise, CorruptionRecord, apply_mask, bert_noise, build_corruption,
                         sample_mask_positions, sample_replacements, unigram_replacements)
from .encoder import DISCRIMINATOR, GENERATOR, RTDModel

VARIANTS = ("electra", "electra15", "bert", "replace-mlm", "all-tokens-mlm", "unigram-electra")
DEFAULT_LAMBDA = 50.0
LOG_FLOOR = -100.0  # clamp for log(0+) in the copy mixture


@dataclass
class LossReport:
    """Per-step loss components.

    ``disc_loss`` holds the main-tower objective: binary cross-entropy for
    the replaced-token-detection variants, the main tower's MLM loss for
    replace-mlm / all-tokens-mlm (where ``lam`` is 1). ``combined`` is always
    ``mlm_loss + lam * disc_loss``.
    """

    mlm_loss: float
    disc_loss: float
    lam: float
    n_mlm: int
    n_disc: int

    @property
    def combined(self) -> float:
        return self.mlm_loss + self.lam * self.disc_loss


def mlm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean of -log softmax(logits)[target] over rows."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


def disc_loss(logits: torch.Tensor, fake: torch.Tensor, scope: torch.Tensor | None = None) -> torch.Tensor:
    """Mean binary cross-entropy, D = sigmoid(logit) = P(real).

    ``scope`` selects the scored positions (None scores all of them).
    """
    fake = torch.as_tensor(fake, dtype=torch.bool)
    per_tok = -torch.where(fake, F.logsigmoid(-logits), F.logsigmoid(logits))
    if scope is None:
        return per_tok.mean()
    scope = torch.as_tensor(scope, dtype=torch.bool)
    return per_tok[scope].mean()


def copy_mixture_nll(mlm_logits: torch.Tensor, copy_logits: torch.Tensor, inputs: torch.Tensor,
                     targets: torch.Tensor) -> torch.Tensor:
    """Per-position -log(D * [input == target] + (1 - D) * softmax[target])."""
    log_sm = mlm_logits.log_softmax(dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    copy_term = torch.where(inputs == targets, F.logsigmoid(copy_logits),
                            torch.full_like(copy_logits, float("-inf")))
    log_p = torch.logaddexp(copy_term, F.logsigmoid(-copy_logits) + log_sm)
    return -log_p.clamp(min=LOG_FLOOR)


def all_tokens_mlm_loss(mlm_logits, copy_logits, inputs, targets) -> torch.Tensor:
    return copy_mixture_nll(mlm_logits, copy_logits, inputs, targets).mean()


def reinforce_surrogate(log_p_samples: torch.Tensor, rewards: torch.Tensor, baselines: torch.Tensor) -> torch.Tensor:
    """Scalar whose gradient is the REINFORCE ascent direction.

    Gradient is sum_t grad log p(x_t) * (R_t - b_t) averaged over positions;
    rewards and baselines are treated as constants.
    """
    adv = (rewards - baselines).detach()
    return (log_p_samples * adv).mean()


def baseline_loss(baseline_logits: torch.Tensor, rewards: torch.Tensor) -> torch.Tensor:
    """Cross-entropy fitting b = -log sigmoid(z) to the reward.

    The target probability exp(-R) makes the optimum sigmoid(z) = exp(-R),
    i.e. b = R. Rewards carry no gradient.
    """
    target = torch.exp(-rewards.detach())
    return F.binary_cross_entropy_with_logits(baseline_logits, target)


# --- variant dispatch --------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    variant: str = "electra"
    lam: float = DEFAULT_LAMBDA
    mask_frac: float = 0.15
    unigram: UnigramTable | None = field(default=None, compare=False)
    noise: BertNoise = BertNoise()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.variant == "unigram-electra" and self.unigram is None:
            raise ValueError("unigram-electra needs a unigram table")


@dataclass
class Prepared:
    """Frozen random draw for one step: mask, generator input, corruption."""

    x: np.ndarray
    masked: np.ndarray  # generator / BERT input
    spec: object
    record: CorruptionRecord | None = None


def _positions(spec, device=None):
    return torch.as_tensor(spec.positions, dtype=torch.long)


def _gather_positions(t: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """t: [B, n, ...] -> [B, k, ...] at ``pos`` [B, k]."""
    idx = pos.view(*pos.shape, *([1] * (t.dim() - 2))).expand(*pos.shape, *t.shape[2:])
    return t.gather(1, idx)


def prepare(spec: LossSpec, model: RTDModel, x: np.ndarray, rng: np.random.Generator) -> Prepared:
    """Draw the mask and (if needed) replacement samples for one step."""
    x = np.asarray(x, dtype=np.int64)
    B, n = x.shape
    mspec = sample_mask_positions(n, spec.mask_frac, rng, batch=B)
    v = spec.variant
    if v == "bert":
        return Prepared(x, bert_noise(x, mspec, model.config.vocab, rng, spec.noise), mspec)
    masked = apply_mask(x, mspec)
    if v == "unigram-electra":
        samples = unigram_replacements(spec.unigram, mspec, rng)
    else:
        with torch.no_grad():
            h = model.hidden(GENERATOR, masked)
            logits = model.gen_logits(_gather_positions(h, _positions(mspec)))
            probs = logits.double().softmax(-1).numpy()
        samples = sample_replacements(probs, rng)
    return Prepared(x, masked, mspec, build_corruption(x, mspec, samples, masked))


def variant_loss(spec: LossSpec, model: RTDModel, prep: Prepared) -> tuple[torch.Tensor, LossReport]:
    """Differentiable objective for a frozen draw."""
    v = spec.variant
    pos = _positions(prep.spec)
    x = torch.as_tensor(prep.x)
    targets = x.gather(1, pos)
    zero = torch.zeros((), dtype=model.tok_emb.dtype)
    k_total = pos.numel()

    gen_term = zero
    if v != "unigram-electra":
        h_g = model.hidden(GENERATOR, prep.masked)
        gen_term = mlm_loss(model.gen_logits(_gather_positions(h_g, pos)), targets)
    if v == "bert":
        return gen_term, LossReport(gen_term.item(), 0.0, 0.0, k_total, 0)

    rec = prep.record
    h_d = model.hidden(DISCRIMINATOR, rec.corrupt)
    if v in ("electra", "electra15", "unigram-electra"):
        scope = torch.as_tensor(rec.spec.as_bool(x.shape[1])) if v == "electra15" else None
        d_term = disc_loss(model.disc_logits(h_d), torch.as_tensor(rec.fake), scope)
        lam = spec.lam
        n_disc = k_total if scope is not None else x.numel()
    elif v == "replace-mlm":
        d_term = mlm_loss(model.disc_mlm_logits(_gather_positions(h_d, pos)), targets)  # == replace_mlm_loss
        lam, n_disc = 1.0, k_total
    else:  # all-tokens-mlm
        d_term = all_tokens_mlm_loss(model.disc_mlm_logits(h_d), model.disc_logits(h_d),
                                     torch.as_tensor(rec.corrupt), x)
        lam, n_disc = 1.0, x.numel()
    total = gen_term + lam * d_term
    n_mlm = 0 if v == "unigram-electra" else k_total
    return total, LossReport(gen_term.item(), d_term.item(), lam, n_mlm, n_disc)


def loss_gradients(spec: LossSpec, model: RTDModel, x: np.ndarray, rng: np.random.Generator,
                   prep: Prepared | None = None) -> tuple[LossReport, dict[str, torch.Tensor], Prepared]:
    """Loss report and a gradient for every parameter (exact zeros where unreachable)."""
    if prep is None:
        prep = prepare(spec, model, x, rng)
    model.zero_grad(set_to_none=True)
    total, report = variant_loss(spec, model, prep)
    total.backward()
    grads = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
             for name, p in model.named_parameters()}
    model.zero_grad(set_to_none=True)
    return report, grads, prep


def combined_loss_parts(model: RTDModel, prep: Prepared, lam: float = DEFAULT_LAMBDA):
    """Separate L_MLM and lam * L_Disc tensors for an ELECTRA draw."""
    pos = _positions(prep.spec)
    x = torch.as_tensor(prep.x)
    h_g = model.hidden(GENERATOR, prep.masked)
    l_mlm = mlm_loss(model.gen_logits(_gather_positions(h_g, pos)), x.gather(1, pos))
    h_d = model.hidden(DISCRIMINATOR, prep.record.corrupt)
    l_disc = disc_loss(model.disc_logits(h_d), torch.as_tensor(prep.record.fake))
    return l_mlm, lam * l_disc


def combined_loss(model: RTDModel, prep: Prepared, lam: float = DEFAULT_LAMBDA) -> tuple[torch.Tensor, LossReport]:
    """L_MLM + lam * L_Disc for an ELECTRA draw (record built from the generator's own samples)."""
    l_mlm, l_disc = combined_loss_parts(model, prep, lam)
    k = prep.spec.k * len(prep.x)
    return l_mlm + l_disc, LossReport(l_mlm.item(), l_disc.item() / lam if lam else 0.0, lam, k, prep.x.size)


def replace_mlm_loss(model: RTDModel, corrupt: np.ndarray, originals: np.ndarray, positions: np.ndarray) -> torch.Tensor:
    """MLM loss predicting ``originals`` at ``positions`` from the corrupted input (no [MASK] tokens)."""
    pos = torch.as_tensor(np.asarray(positions), dtype=torch.long)
    h = model.hidden(DISCRIMINATOR, corrupt)
    targets = torch.as_tensor(np.asarray(originals, dtype=np.int64)).gather(1, pos)
    return mlm_loss(model.disc_mlm_logits(_gather_positions(h, pos)), targets)
