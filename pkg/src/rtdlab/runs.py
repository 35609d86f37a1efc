"""Run configuration and run-directory plumbing behind the command line.

A run directory holds everything one ``pretrain`` invocation produced::

    config.txt        resolved flat key=value config (re-runnable as-is)
    vocab.txt         one token per line
    metrics.csv       per-step training log
    checkpoint.rtd    latest complete checkpoint
    milestones.csv    FLOPs grid: milestone, target_flops, step, cumulative_flops, checkpoint
    milestones/       one checkpoint per milestone
    eval.csv          rows appended by ``eval``
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .corpus import (SyntheticCorpusSpec, Vocab, build_vocab, encode, read_corpus, synthetic_ids,
                     synthetic_vocab, unigram_table, windows)
from .encoder import DISCRIMINATOR, GENERATOR, ModelConfig
from .evaluation import (EvaluationError, downstream_probe, electra_mlm_predict, make_probe_task,
                         masked_lm_accuracy, rtd_metrics)
from .optim import AdamConfig
from .trainer import (ALL_VARIANTS, RunState, TrainConfig, corrupt_with_generator, load_checkpoint, pretrain,
                      new_state, retained_tower, save_checkpoint, step_flops, write_metrics)
from . import rng as rngmod

SEED_ENV = "RTD_SEED"
EVAL_METRICS = ("mlm", "rtd", "probe", "electra-mlm")
CURVE_COLUMNS = ("variant", "seed", "cumulative_flops", "probe_accuracy", "disc_loss", "mlm_loss")
MILESTONE_COLUMNS = ("milestone", "target_flops", "step", "cumulative_flops", "checkpoint")
EVAL_COLUMNS = ("metric", "value", "step", "cumulative_flops", "seed")


class ConfigError(ValueError):
    """Bad key or value; the command line maps it to exit status 2."""


class RunError(RuntimeError):
    """Failure while executing a command (exit status 1)."""


@dataclass(frozen=True)
class RunConfig:
    # what to run
    variant: str = "electra"
    seed: int = 0
    steps: int = 2000
    budget_flops: int = 0  # > 0: train until this many FLOPs instead of ``steps``
    milestones: int = 4
    checkpoint_every: int = 500
    out: str = ""  # default runs/<variant>-s<seed>
    wallclock: bool = False
    # corpus: "synthetic" or a path to whitespace-tokenized text
    corpus: str = "synthetic"
    max_vocab: int = 512
    syn_vocab: int = 64
    syn_order: int = 1
    syn_length: int = 200_000
    syn_regimes: int = 2
    syn_block: int = 256
    syn_perms: int = 4
    syn_private: int = 2
    syn_groups: int = 4
    syn_leak: float = 0.0
    syn_seed: int = 0
    # model
    layers: int = 2
    hidden: int = 64
    ffn: int = 256
    heads: int = 4
    embed: int = 64
    seq_len: int = 32
    gen_mult: float = 0.25
    init_std: float = 0.1
    ln_eps: float = 1e-12
    # objective / optimizer
    batch: int = 16
    mask_frac: float = 0.15
    lam: float = 50.0
    lr: float = 2e-3
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    # evaluation
    probe_len: int = 8
    probe_train: int = 1000
    probe_test: int = 1000
    probe_seed: int = 1
    probe_epochs: int = 200
    probe_finetune: bool = False
    eval_batches: int = 8
    eval_p_mask: float = 0.0  # electra-mlm: p_mask inside a = (1 - p)/p; 0 uses mask_frac
    loss_window: int = 50

    def __post_init__(self):
        if self.variant not in ALL_VARIANTS:
            raise ConfigError(f"variant: unknown variant {self.variant!r}; expected one of {', '.join(ALL_VARIANTS)}")
        for key in ("steps", "budget_flops", "checkpoint_every"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be >= 0")
        if self.milestones < 1:
            raise ConfigError("milestones: must be >= 1")

    # -- derived objects ---------------------------------------------------------

    @property
    def run_dir(self) -> Path:
        return Path(self.out or f"runs/{self.variant}-s{self.seed}")

    def synthetic_spec(self) -> SyntheticCorpusSpec:
        return SyntheticCorpusSpec(vocab_size=self.syn_vocab, order=self.syn_order, transition_seed=self.syn_seed,
                                   length=self.syn_length, regimes=self.syn_regimes, block_length=self.syn_block,
                                   n_perms=self.syn_perms, private_perms=self.syn_private,
                                   n_groups=self.syn_groups, leak=self.syn_leak)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(layers=self.layers, hidden=self.hidden, ffn=self.ffn, heads=self.heads,
                           embed=self.embed, vocab=vocab_size, max_len=self.seq_len, gen_mult=self.gen_mult,
                           ln_eps=self.ln_eps, init_std=self.init_std)

    def train_config(self, vocab_size: int) -> TrainConfig:
        adam = AdamConfig(peak_lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                          weight_decay=self.weight_decay, warmup=self.warmup)
        return TrainConfig(self.model_config(vocab_size), adam, self.variant, self.batch, self.mask_frac, self.lam)

    # -- text form ---------------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in fields(self))


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"{key}: unknown config key")
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            try:
                return int(raw)
            except ValueError:
                value = float(raw)  # allow 1e9-style literals
                if not value.is_integer():
                    raise
                return int(value)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str) -> dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def resolve_config(path: str | Path | None = None, overrides: dict[str, str] | None = None,
                   env: dict[str, str] | None = None) -> RunConfig:
    """Defaults < config file < ``RTD_SEED`` < command-line overrides."""
    values: dict[str, object] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
        values.update(parse_config_text(text))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        values["seed"] = _coerce("seed", env[SEED_ENV])
    for key, raw in (overrides or {}).items():
        values[key.replace("-", "_")] = _coerce(key.replace("-", "_"), raw)
    return RunConfig(**values)


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs from leftover argv tokens."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or tok == "--":
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, raw = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"{tok[2:]}: missing value")
            key, raw = tok[2:], tokens[i + 1]
            i += 2
        if key.replace("-", "_") not in _FIELDS:
            raise ConfigError(f"{key}: unknown config key")
        out[key] = raw
    return out


# --- data ---------------------------------------------------------------------------


@dataclass
class RunData:
    vocab: Vocab
    ids: np.ndarray
    windows: np.ndarray

    def unigram(self):
        return unigram_table(self.ids, self.vocab)


def load_data(cfg: RunConfig) -> RunData:
    if cfg.corpus == "synthetic":
        spec = cfg.synthetic_spec()
        words, _ = synthetic_ids(spec, cfg.syn_seed)
        vocab = synthetic_vocab(spec)
        ids = words + 3
    else:
        try:
            text = read_corpus(cfg.corpus)
        except OSError as e:
            raise RunError(f"cannot read corpus {cfg.corpus}: {e.strerror}") from None
        vocab = build_vocab(text, cfg.max_vocab)
        ids = np.asarray(encode(text, vocab), dtype=np.int64)
    return RunData(vocab, ids, windows(ids, cfg.seq_len))


def probe_task(cfg: RunConfig):
    if cfg.corpus != "synthetic":
        raise EvaluationError("the probe task needs the synthetic corpus")
    task = make_probe_task(cfg.synthetic_spec(), cfg.probe_len, cfg.probe_train, cfg.probe_test, cfg.probe_seed)
    return dataclasses.replace(task, frozen=not cfg.probe_finetune)


# --- pretrain -------------------------------------------------------------------------


def planned_steps(cfg: RunConfig, tcfg: TrainConfig) -> int:
    if cfg.budget_flops:
        steps = math.ceil(cfg.budget_flops / step_flops(tcfg))
    else:
        steps = cfg.steps
    if cfg.variant == "two-stage" and steps % 2:
        steps += 1
    return steps


def milestone_targets(cfg: RunConfig, tcfg: TrainConfig, steps: int) -> list[int]:
    """Evenly spaced cumulative-FLOPs targets ending at the run's budget."""
    total = cfg.budget_flops or steps * step_flops(tcfg)
    return [total * k // cfg.milestones for k in range(1, cfg.milestones + 1)]


def run_pretrain(cfg: RunConfig) -> Path:
    """Train ``cfg.variant`` and populate its run directory; returns the directory."""
    out = cfg.run_dir
    (out / "milestones").mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    data = load_data(cfg)
    data.vocab.save(out / "vocab.txt")
    tcfg = cfg.train_config(len(data.vocab))
    steps = planned_steps(cfg, tcfg)
    targets = milestone_targets(cfg, tcfg, steps)
    meta = {"run_config": cfg.to_text(), "variant": cfg.variant, "seed": cfg.seed}
    records, reached = [], []

    def snapshot(state: RunState) -> None:
        save_checkpoint(out / "checkpoint.rtd", state, meta)
        write_metrics(out / "metrics.csv", records, cfg.wallclock)

    def on_step(state: RunState, rec) -> None:
        records.append(rec)
        while len(reached) < len(targets) and state.cumulative_flops >= targets[len(reached)]:
            name = f"milestones/m{len(reached) + 1:02d}.rtd"
            save_checkpoint(out / name, state, meta)
            reached.append((len(reached) + 1, targets[len(reached)], state.step, state.cumulative_flops, name))
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            snapshot(state)

    unigram = data.unigram() if cfg.variant == "unigram-electra" else None
    state = new_state(tcfg, cfg.seed, steps if cfg.variant != "two-stage" else steps // 2)
    snapshot(state)
    state, _ = pretrain(tcfg, data.windows, steps, cfg.seed, unigram, state=state, callback=on_step)
    snapshot(state)
    with open(out / "milestones.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MILESTONE_COLUMNS)
        w.writerows(reached)
    return out


# --- eval -----------------------------------------------------------------------------


def _locate(path: str | Path) -> tuple[Path, Path]:
    """(checkpoint file, run directory) from either of the two."""
    p = Path(path)
    if p.is_dir():
        return p / "checkpoint.rtd", p
    run_dir = p.parent.parent if p.parent.name == "milestones" else p.parent
    return p, run_dir


def config_from_meta(meta: dict) -> RunConfig:
    try:
        return RunConfig(**parse_config_text(meta["run_config"]))
    except KeyError:
        raise RunError("checkpoint carries no run configuration") from None


def evaluate(checkpoint: str | Path, what: str, seed: int | None = None) -> dict[str, float]:
    """Metric name -> value for one checkpoint. Deterministic given ``seed``."""
    if what not in EVAL_METRICS:
        raise ConfigError(f"what: unknown metric {what!r}; expected one of {', '.join(EVAL_METRICS)}")
    ckpt, _ = _locate(checkpoint)
    state, meta = load_checkpoint(ckpt)
    cfg = config_from_meta(meta)
    seed = cfg.seed if seed is None else seed
    model = state.model
    model.eval()
    if what == "probe":
        tower = retained_tower(cfg.variant)
        return {"probe_accuracy": downstream_probe(model, probe_task(cfg), cfg.probe_epochs, seed, tower)}
    data = load_data(cfg)
    if what == "mlm":
        tower = DISCRIMINATOR if cfg.variant in ("replace-mlm", "all-tokens-mlm") else GENERATOR
        acc = masked_lm_accuracy(model, data.windows, cfg.mask_frac, seed, cfg.eval_batches, cfg.batch, tower)
        return {"mlm_accuracy": acc}
    if what == "rtd":
        scores, fake = [], []
        for b in range(cfg.eval_batches):
            x = data.windows[rngmod.stream(seed, b, "eval-rows").choice(len(data.windows), cfg.batch)]
            rec = corrupt_with_generator(model, x, cfg.mask_frac, rngmod.stream(seed, b, "eval-corrupt"))
            with torch.no_grad():
                d = torch.sigmoid(model.disc_logits(model.hidden(DISCRIMINATOR, rec.corrupt)))
            scores.append(d.double().numpy())
            fake.append(rec.fake)
        m = rtd_metrics(np.concatenate(scores), np.concatenate(fake))
        return {"rtd_accuracy": m.accuracy, "rtd_precision": m.precision, "rtd_recall": m.recall}
    # electra-mlm: one masked position per window, predicted by the discriminator
    rs = rngmod.stream(seed, 0, "eval-electra-mlm")
    rows = rs.choice(len(data.windows), cfg.eval_batches * cfg.batch)
    hits = 0
    for r in rows:
        x = data.windows[r].copy()
        t = int(rs.integers(0, len(x)))
        target, x[t] = int(x[t]), 2
        hits += electra_mlm_predict(model, x, cfg.eval_p_mask or cfg.mask_frac) == target
    return {"electra_mlm_accuracy": hits / len(rows)}


def append_eval(run_dir: Path, results: dict[str, float], step: int, flops: int, seed: int) -> Path:
    path = run_dir / "eval.csv"
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(EVAL_COLUMNS)
        for name, value in results.items():
            w.writerow([name, f"{value:.6g}", step, flops, seed])
    return path


def run_eval(checkpoint: str | Path, what: str, seed: int | None = None) -> tuple[dict[str, float], Path]:
    ckpt, run_dir = _locate(checkpoint)
    results = evaluate(ckpt, what, seed)
    _, meta = load_checkpoint(ckpt)
    cfg = config_from_meta(meta)
    path = append_eval(run_dir, results, meta["step"], meta["cumulative_flops"], cfg.seed if seed is None else seed)
    return results, path


# --- curves ----------------------------------------------------------------------------


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _run_grid(run_dir: Path) -> tuple[int, ...]:
    path = run_dir / "milestones.csv"
    if not path.exists():
        raise RunError(f"{run_dir}: no milestones.csv (is this a pretrain run directory?)")
    return tuple(int(r["target_flops"]) for r in read_csv(path))


def check_grids(run_dirs: list[Path]) -> tuple[int, ...]:
    """The shared FLOPs grid, or an error naming every run that deviates from the first."""
    grids = {d: _run_grid(d) for d in run_dirs}
    ref = grids[run_dirs[0]]
    bad = [str(d) for d, g in grids.items() if g != ref]
    if bad:
        raise RunError(f"mismatched milestones (grid of {run_dirs[0]} differs from): {', '.join(bad)}")
    return ref


def _trailing_mean(metrics: list[dict[str, str]], column: str, step: int, window: int) -> float:
    vals = [float(r[column]) for r in metrics if step - window < int(r["step"]) <= step]
    return float(np.mean(vals)) if vals else float("nan")


def curve_rows(run_dirs: list[str | Path]) -> list[dict[str, object]]:
    """Probe accuracy and trailing-mean losses at every shared FLOPs milestone."""
    dirs = [Path(d) for d in run_dirs]
    if not dirs:
        raise ConfigError("curves needs at least one run directory")
    check_grids(dirs)
    rows, tasks = [], {}
    for d in dirs:
        cfg = RunConfig(**parse_config_text((d / "config.txt").read_text(encoding="utf-8")))
        metrics = read_csv(d / "metrics.csv")
        key = (cfg.synthetic_spec(), cfg.probe_len, cfg.probe_train, cfg.probe_test, cfg.probe_seed, cfg.probe_finetune)
        if key not in tasks:
            tasks[key] = probe_task(cfg)
        for m in read_csv(d / "milestones.csv"):
            ckpt = d / m["checkpoint"]
            if not ckpt.exists():
                raise RunError(f"{d}: missing checkpoint for milestone {m['milestone']} ({ckpt})")
            state, _ = load_checkpoint(ckpt)
            acc = downstream_probe(state.model, tasks[key], cfg.probe_epochs, cfg.seed, retained_tower(cfg.variant))
            step = int(m["step"])
            rows.append({"variant": cfg.variant, "seed": cfg.seed, "cumulative_flops": int(m["target_flops"]),
                         "probe_accuracy": acc,
                         "disc_loss": _trailing_mean(metrics, "disc_loss", step, cfg.loss_window),
                         "mlm_loss": _trailing_mean(metrics, "mlm_loss", step, cfg.loss_window)})
    return rows


def write_curves(rows: list[dict[str, object]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([r["variant"], r["seed"], r["cumulative_flops"], f"{r['probe_accuracy']:.6g}",
                        f"{r['disc_loss']:.6g}", f"{r['mlm_loss']:.6g}"])


def variant_means(rows: list[dict[str, object]], flops: int | None = None) -> dict[str, float]:
    """Mean probe accuracy per variant at one milestone (default: the last)."""
    if flops is None:
        flops = max(int(r["cumulative_flops"]) for r in rows)
    acc: dict[str, list[float]] = {}
    for r in rows:
        if int(r["cumulative_flops"]) == flops:
            acc.setdefault(str(r["variant"]), []).append(float(r["probe_accuracy"]))
    return {v: float(np.mean(a)) for v, a in acc.items()}


__all__ = ["RunConfig", "ConfigError", "RunError", "resolve_config", "parse_overrides", "run_pretrain",
           "run_eval", "evaluate", "curve_rows", "write_curves", "check_grids", "variant_means"]
