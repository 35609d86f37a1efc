"""Adam with decoupled weight decay and a linear warmup / linear decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass(frozen=True)
class AdamConfig:
    peak_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    warmup: int = 100
    total: int = 2000


def learning_rate(step: int, cfg: AdamConfig) -> float:
    """Piecewise linear: 0 -> peak over ``warmup`` steps, then peak -> 0 at ``total``."""
    if cfg.warmup > 0 and step <= cfg.warmup:
        return cfg.peak_lr * step / cfg.warmup
    if cfg.total <= cfg.warmup:
        return 0.0
    return cfg.peak_lr * max(0.0, 1.0 - (step - cfg.warmup) / (cfg.total - cfg.warmup))


def decays(name: str) -> bool:
    """Biases and layer-norm parameters are exempt from weight decay."""
    return not (name.endswith("bias") or ".ln" in name or "emb_ln" in name)


@dataclass
class OptimizerState:
    cfg: AdamConfig
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def optimizer_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
                   state: OptimizerState, only: set[str] | None = None) -> float:
    """In-place update of ``params``; returns the learning rate used.

    ``only`` restricts the update (and moment tracking) to the named
    parameters; the rest stay bit-identical.
    """
    names = [n for n in params if only is None or n in only]
    for n in names:
        g = grads[n]
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {n!r} at step {state.step + 1}")
    state.step += 1
    cfg = state.cfg
    lr = learning_rate(state.step, cfg)
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    with torch.no_grad():
        for n in names:
            p, g = params[n], grads[n]
            m = state.m.setdefault(n, torch.zeros_like(p))
            v = state.v.setdefault(n, torch.zeros_like(p))
            m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps)
            if cfg.weight_decay and decays(n):
                update = update + cfg.weight_decay * p
            p.sub_(lr * update)
    return lr
