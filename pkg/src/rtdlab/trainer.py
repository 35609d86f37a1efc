"""Joint, two-stage and adversarial pre-training loops plus checkpoint I/O."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import rng as rngmod
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .corpus import TokenBatch, UnigramTable, batch_for_step
from .corruption import apply_mask, build_corruption, sample_mask_positions, sample_replacements
from .encoder import DISCRIMINATOR, GENERATOR, ModelConfig, RTDModel, init_params
from .flopcount import train_step_flops
from .objectives import (DEFAULT_LAMBDA, LossReport, LossSpec, Prepared, _gather_positions, baseline_loss,
                         disc_loss, loss_gradients, reinforce_surrogate)
from .optim import AdamConfig, OptimizerState, optimizer_step

ALGORITHMS = ("two-stage", "adversarial")
ALL_VARIANTS = ("electra", "bert", "electra15", "replace-mlm", "all-tokens-mlm", "unigram-electra",
                "two-stage", "adversarial")
CSV_COLUMNS = ("step", "mlm_loss", "disc_loss", "combined", "lr", "cumulative_flops", "wallclock_s")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    adam: AdamConfig = AdamConfig()
    variant: str = "electra"
    batch: int = 16
    mask_frac: float = 0.15
    lam: float = DEFAULT_LAMBDA

    @property
    def seq_len(self) -> int:
        return self.model.max_len


def effective_model_config(variant: str, model: ModelConfig) -> ModelConfig:
    """BERT is a single full-size MLM tower, trained in the generator slot."""
    if variant == "bert":
        return replace(model, gen_mult=1.0)
    return model


def retained_tower(variant: str) -> str:
    """The tower kept for downstream use after pre-training."""
    return GENERATOR if variant == "bert" else DISCRIMINATOR


@dataclass
class StepRecord:
    step: int
    mlm_loss: float
    disc_loss: float
    combined: float
    lr: float
    cumulative_flops: int
    wallclock_s: float
    gen_accuracy: float | None = None

    def csv_row(self, wallclock: bool) -> list[str]:
        return [str(self.step), f"{self.mlm_loss:.6g}", f"{self.disc_loss:.6g}", f"{self.combined:.6g}",
                f"{self.lr:.6g}", str(self.cumulative_flops),
                f"{self.wallclock_s:.3f}" if wallclock else "0"]


@dataclass
class TrainRunLog:
    variant: str
    seed: int
    records: list[StepRecord] = field(default_factory=list)

    def write_csv(self, path: str | Path, wallclock: bool = False) -> None:
        write_metrics(path, self.records, wallclock)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


def write_metrics(path, records, wallclock: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(r.csv_row(wallclock))


@dataclass
class RunState:
    model: RTDModel
    opt: OptimizerState
    step: int = 0
    cumulative_flops: int = 0
    phase: int = 1


StepCallback = Callable[[RunState, StepRecord], None]


def _record(state: RunState, report: LossReport, lr: float, t0: float, acc=None) -> StepRecord:
    return StepRecord(state.step, report.mlm_loss, report.disc_loss, report.combined, lr,
                      state.cumulative_flops, time.perf_counter() - t0, acc)


def new_state(cfg: TrainConfig, seed: int, steps: int) -> RunState:
    model = init_params(effective_model_config(cfg.variant, cfg.model), seed)
    return RunState(model, OptimizerState(replace(cfg.adam, total=steps)))


def joint_pretrain(cfg: TrainConfig, windows: np.ndarray, steps: int, seed: int,
                   unigram: UnigramTable | None = None, state: RunState | None = None,
                   callback: StepCallback | None = None) -> tuple[RunState, TrainRunLog]:
    """Train any single-objective variant (ELECTRA and its ablations, BERT).

    Each step: fresh mask, generator forward, sampling, corruption, loss and
    one optimizer step over every parameter. Pass ``state`` to resume.
    """
    spec = LossSpec(cfg.variant, cfg.lam, cfg.mask_frac, unigram)
    if state is None:
        state = new_state(cfg, seed, steps)
    mcfg = state.model.config
    step_flops = train_step_flops(mcfg, cfg.seq_len, cfg.batch, cfg.variant, cfg.mask_frac).total
    params = dict(state.model.named_parameters())
    log = TrainRunLog(cfg.variant, seed)
    t0 = time.perf_counter()
    while state.step < steps:
        s = state.step + 1
        batch = batch_for_step(windows, cfg.batch, seed, s)
        report, grads, _ = loss_gradients(spec, state.model, batch.ids, rngmod.stream(seed, s, "corrupt"))
        lr = optimizer_step(params, grads, state.opt)
        state.step = s
        state.cumulative_flops += step_flops
        rec = _record(state, report, lr, t0)
        log.records.append(rec)
        if callback:
            callback(state, rec)
    return state, log


def two_stage_pretrain(cfg: TrainConfig, windows: np.ndarray, n_steps: int, seed: int,
                       callback: StepCallback | None = None, state: RunState | None = None
                       ) -> tuple[RunState, TrainRunLog]:
    """Generator-only MLM for ``n_steps``, copy it into the discriminator, then
    discriminator-only training for ``n_steps`` with the generator frozen.

    The shared embeddings belong to the generator and stay frozen in phase 2;
    the discriminator adapts through its own layer norm and input projection.
    """
    if cfg.model.gen_mult != 1.0:
        raise ValueError("two-stage requires equal sizes")
    if state is None:
        state = new_state(cfg, seed, n_steps)
    model = state.model
    params = dict(model.named_parameters())
    gen_names = {n for n in params if model.group_of(n) in ("gen", "embed")}
    disc_names = set(params) - gen_names
    mcfg = model.config
    f1 = train_step_flops(mcfg, cfg.seq_len, cfg.batch, "two-stage-generator", cfg.mask_frac).total
    f2 = train_step_flops(mcfg, cfg.seq_len, cfg.batch, "two-stage-discriminator", cfg.mask_frac).total
    mlm_spec = LossSpec("bert", cfg.lam, cfg.mask_frac)
    log = TrainRunLog("two-stage", seed)
    t0 = time.perf_counter()
    while state.step < 2 * n_steps:
        s = state.step + 1
        batch = batch_for_step(windows, cfg.batch, seed, s)
        rs = rngmod.stream(seed, s, "corrupt")
        if s <= n_steps:
            # plain [MASK] inputs: the generator stage is ordinary MLM
            x = batch.ids
            mspec = sample_mask_positions(x.shape[1], cfg.mask_frac, rs, batch=x.shape[0])
            prep = Prepared(x, apply_mask(x, mspec), mspec)
            report, grads, _ = loss_gradients(mlm_spec, model, x, rs, prep)
            lr = optimizer_step(params, grads, state.opt, only=gen_names)
            state.cumulative_flops += f1
        else:
            if s == n_steps + 1 and state.phase == 1:
                model.copy_generator_to_discriminator()
                state.opt = OptimizerState(replace(state.opt.cfg, total=n_steps))
                state.phase = 2
            record = corrupt_with_generator(model, batch.ids, cfg.mask_frac, rs)
            model.zero_grad(set_to_none=True)
            d = disc_loss(model.disc_logits(model.hidden(DISCRIMINATOR, record.corrupt)),
                          torch.as_tensor(record.fake))
            d.backward()
            grads = {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
            model.zero_grad(set_to_none=True)
            lr = optimizer_step(params, grads, state.opt, only=disc_names)
            report = LossReport(0.0, d.item(), 1.0, 0, int(np.prod(batch.ids.shape)))
            state.cumulative_flops += f2
        state.step = s
        rec = _record(state, report, lr, t0)
        log.records.append(rec)
        if callback:
            callback(state, rec)
    return state, log


def corrupt_with_generator(model: RTDModel, x: np.ndarray, mask_frac: float, rs: np.random.Generator):
    x = np.asarray(x, dtype=np.int64)
    mspec = sample_mask_positions(x.shape[1], mask_frac, rs, batch=x.shape[0])
    masked = apply_mask(x, mspec)
    with torch.no_grad():
        h = model.hidden(GENERATOR, masked)
        probs = model.gen_logits(_gather_positions(h, torch.as_tensor(mspec.positions))).double().softmax(-1)
    samples = sample_replacements(probs.numpy(), rs)
    return build_corruption(x, mspec, samples, masked)


# --- adversarial training ------------------------------------------------------


@dataclass
class AdversarialState:
    rewards: np.ndarray | None = None
    baselines: np.ndarray | None = None
    advantages: np.ndarray | None = None


def rewards_from_disc(d_logits_at_masked: torch.Tensor, correct: torch.Tensor) -> torch.Tensor:
    """-log D for a correct sample, -log(1 - D) otherwise (D = P(real))."""
    return torch.where(correct, -torch.nn.functional.logsigmoid(d_logits_at_masked),
                       -torch.nn.functional.logsigmoid(-d_logits_at_masked))


def adversarial_step(model: RTDModel, record, adv_state: AdversarialState, lam: float = DEFAULT_LAMBDA,
                     ) -> tuple[LossReport, dict[str, torch.Tensor], AdversarialState]:
    """Gradients for one adversarial step on a fixed corruption record.

    The generator receives only the REINFORCE term (ascent on the
    discriminator loss, returned as a descent gradient); the baseline head is
    fitted to the rewards by cross-entropy on detached generator states; the
    discriminator is trained on the usual detection loss.
    """
    pos = torch.as_tensor(record.spec.positions)
    samples = torch.as_tensor(record.samples)
    x = torch.as_tensor(record.originals)
    model.zero_grad(set_to_none=True)

    h_g = model.hidden(GENERATOR, record.masked)
    h_g_m = _gather_positions(h_g, pos)
    log_p = model.gen_logits(h_g_m).log_softmax(-1).gather(-1, samples.unsqueeze(-1)).squeeze(-1)

    h_d = model.hidden(DISCRIMINATOR, record.corrupt)
    d_logits = model.disc_logits(h_d)
    l_disc = disc_loss(d_logits, torch.as_tensor(record.fake))

    rewards = rewards_from_disc(d_logits.detach().gather(1, pos), samples == x.gather(1, pos))
    b_logits = model.baseline_logits(h_g_m.detach())
    baselines = -torch.nn.functional.logsigmoid(b_logits)
    surrogate = reinforce_surrogate(log_p, rewards, baselines)
    l_base = baseline_loss(b_logits, rewards)

    total = -surrogate + l_base + lam * l_disc
    total.backward()
    grads = {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in model.named_parameters()}
    model.zero_grad(set_to_none=True)

    adv = AdversarialState(rewards.numpy().copy(), baselines.detach().numpy().copy(),
                           (rewards - baselines).detach().numpy().copy())
    report = LossReport(l_base.item(), l_disc.item(), lam, int(pos.numel()), int(x.numel()))
    return report, grads, adv


def adversarial_pretrain(cfg: TrainConfig, windows: np.ndarray, steps: int, seed: int,
                         state: RunState | None = None, callback: StepCallback | None = None,
                         track_accuracy: bool = False) -> tuple[RunState, TrainRunLog]:
    """Joint loop with the generator's MLE gradient replaced by REINFORCE.

    ``mlm_loss`` in the log holds the baseline's cross-entropy, since the
    generator has no likelihood objective here.
    """
    if state is None:
        state = new_state(cfg, seed, steps)
    model = state.model
    params = dict(model.named_parameters())
    step_flops = train_step_flops(model.config, cfg.seq_len, cfg.batch, "adversarial", cfg.mask_frac).total
    log = TrainRunLog("adversarial", seed)
    adv = AdversarialState()
    t0 = time.perf_counter()
    while state.step < steps:
        s = state.step + 1
        batch = batch_for_step(windows, cfg.batch, seed, s)
        record = corrupt_with_generator(model, batch.ids, cfg.mask_frac, rngmod.stream(seed, s, "corrupt"))
        report, grads, adv = adversarial_step(model, record, adv, cfg.lam)
        lr = optimizer_step(params, grads, state.opt)
        state.step = s
        state.cumulative_flops += step_flops
        acc = None
        if track_accuracy:
            acc = float((record.samples == np.take_along_axis(record.originals, record.spec.positions, 1)).mean())
        rec = _record(state, report, lr, t0, acc)
        log.records.append(rec)
        if callback:
            callback(state, rec)
    return state, log


def pretrain(cfg: TrainConfig, windows: np.ndarray, steps: int, seed: int,
             unigram: UnigramTable | None = None, state: RunState | None = None,
             callback: StepCallback | None = None) -> tuple[RunState, TrainRunLog]:
    """Dispatch on ``cfg.variant``. For two-stage, ``steps`` counts both phases."""
    if cfg.variant == "two-stage":
        if steps % 2:
            raise ValueError("two-stage needs an even total step count")
        return two_stage_pretrain(cfg, windows, steps // 2, seed, callback, state)
    if cfg.variant == "adversarial":
        return adversarial_pretrain(cfg, windows, steps, seed, state, callback)
    if cfg.variant not in ALL_VARIANTS:
        raise ValueError(f"unknown variant {cfg.variant!r}")
    return joint_pretrain(cfg, windows, steps, seed, unigram, state, callback)


def step_flops(cfg: TrainConfig, variant: str | None = None) -> int:
    """FLOPs of one optimizer step (two-stage: the mean of its two phases)."""
    v = variant or cfg.variant
    mcfg = effective_model_config(v, cfg.model)
    if v == "two-stage":
        a = train_step_flops(mcfg, cfg.seq_len, cfg.batch, "two-stage-generator", cfg.mask_frac).total
        b = train_step_flops(mcfg, cfg.seq_len, cfg.batch, "two-stage-discriminator", cfg.mask_frac).total
        return (a + b) // 2
    return train_step_flops(mcfg, cfg.seq_len, cfg.batch, v, cfg.mask_frac).total


# --- checkpoints -----------------------------------------------------------------


def save_checkpoint(path: str | Path, state: RunState, meta: dict | None = None) -> None:
    arrays = {f"param/{n}": p.detach().numpy() for n, p in state.model.named_parameters()}
    for n, t in state.opt.m.items():
        arrays[f"adam_m/{n}"] = t.numpy()
    for n, t in state.opt.v.items():
        arrays[f"adam_v/{n}"] = t.numpy()
    full_meta = {
        "model_config": asdict(state.model.config),
        "adam_config": asdict(state.opt.cfg),
        "opt_step": state.opt.step,
        "step": state.step,
        "cumulative_flops": state.cumulative_flops,
        "phase": state.phase,
        "dtype": str(state.model.tok_emb.dtype).replace("torch.", ""),
    }
    full_meta.update(meta or {})
    save_arrays(path, arrays, full_meta)


def load_checkpoint(path: str | Path) -> tuple[RunState, dict]:
    arrays, meta = load_arrays(path)
    try:
        mcfg = ModelConfig(**meta["model_config"])
        acfg = AdamConfig(**meta["adam_config"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: checkpoint metadata incomplete: {e}") from e
    dtype = getattr(torch, meta.get("dtype", "float32"))
    model = RTDModel(mcfg).to(dtype)
    expected = dict(model.named_parameters())
    got = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    if set(got) != set(expected):
        raise CheckpointError(f"{path}: parameter set does not match the model configuration")
    with torch.no_grad():
        for n, p in expected.items():
            if tuple(got[n].shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: shape mismatch for {n}")
            p.copy_(torch.from_numpy(got[n]))
    opt = OptimizerState(acfg, meta["opt_step"])
    for k, v in arrays.items():
        if k.startswith("adam_m/"):
            opt.m[k[7:]] = torch.from_numpy(v)
        elif k.startswith("adam_v/"):
            opt.v[k[7:]] = torch.from_numpy(v)
    state = RunState(model, opt, meta["step"], meta["cumulative_flops"], meta.get("phase", 1))
    return state, meta
