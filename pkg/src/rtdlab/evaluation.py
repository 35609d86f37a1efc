"""Quality metrics: masked-LM accuracy, detection metrics, the optimal
discriminator algebra, discriminator-as-MLM prediction, and a linear probe.

All argmaxes break ties toward the lowest token id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import rng as rngmod
from .corpus import SyntheticCorpusSpec, batch_for_step, transition_matrix
from .corruption import apply_mask, sample_mask_positions
from .encoder import DISCRIMINATOR, GENERATOR, RTDModel
from .objectives import _gather_positions
from .optim import AdamConfig, OptimizerState, optimizer_step


class EvaluationError(ValueError):
    pass


def argmax_lowest(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    # np.argmax returns the first maximal index
    return np.argmax(np.asarray(scores), axis=axis)


def masked_accuracy(probs: np.ndarray, targets: np.ndarray) -> float:
    return float((argmax_lowest(probs) == np.asarray(targets)).mean())


@torch.no_grad()
def masked_lm_accuracy(model: RTDModel, windows: np.ndarray, mask_frac: float, seed: int,
                       n_batches: int = 8, batch: int = 16, tower: str = GENERATOR) -> float:
    """Top-1 accuracy of the MLM head of ``tower`` at freshly masked positions."""
    hits, total = 0, 0
    for b in range(n_batches):
        x = batch_for_step(windows, batch, seed, b).ids
        spec = sample_mask_positions(x.shape[1], mask_frac, rngmod.stream(seed, b, "eval-mask"), batch=x.shape[0])
        h = model.hidden(tower, apply_mask(x, spec))
        pos = torch.as_tensor(spec.positions)
        logits = (model.gen_logits if tower == GENERATOR else model.disc_mlm_logits)(_gather_positions(h, pos))
        pred = argmax_lowest(logits.numpy())
        hits += int((pred == np.take_along_axis(x, spec.positions, 1)).sum())
        total += pred.size
    return hits / total


@dataclass
class RTDMetrics:
    accuracy: float
    precision: float
    recall: float
    no_positives: bool  # no fake positions: recall reported as 1.0
    no_predicted_positives: bool  # nothing flagged fake: precision reported as 1.0


def rtd_metrics(scores: np.ndarray, fake: np.ndarray) -> RTDMetrics:
    """Detection metrics at threshold 0.5 with "fake" as the positive class.

    ``scores`` are P(real); a score of exactly 0.5 counts as real.
    """
    scores = np.asarray(scores, dtype=np.float64)
    fake = np.asarray(fake, dtype=bool)
    if scores.shape != fake.shape:
        raise EvaluationError("scores and labels must have the same shape")
    pred_fake = scores < 0.5
    tp = int((pred_fake & fake).sum())
    acc = float((pred_fake == fake).mean())
    pos, pred_pos = int(fake.sum()), int(pred_fake.sum())
    recall = tp / pos if pos else 1.0
    precision = tp / pred_pos if pred_pos else 1.0
    return RTDMetrics(acc, precision, recall, pos == 0, pred_pos == 0)


# --- optimal discriminator algebra ----------------------------------------------


def unmasked_ratio(p_mask):
    """a = (1 - p_mask) / p_mask, unmasked tokens per masked token."""
    p_mask = np.asarray(p_mask, dtype=np.float64)
    if np.any((p_mask <= 0) | (p_mask >= 1)):
        raise EvaluationError("p_mask must lie in (0, 1)")
    return (1.0 - p_mask) / p_mask


def optimal_discriminator(p_data, p_G, p_mask):
    """Minimizer over D of the per-candidate detection loss for a fixed generator:
    D = p_data (a + p_G) / (a p_data + p_G)."""
    p_data = np.asarray(p_data, dtype=np.float64)
    p_G = np.asarray(p_G, dtype=np.float64)
    a = unmasked_ratio(p_mask)
    den = a * p_data + p_G
    if np.any(den == 0):
        raise EvaluationError("undefined optimum")
    out = p_data * (a + p_G) / den
    return out if out.ndim else float(out)


def invert_discriminator(D, p_G, p_mask):
    """Recover p_data = D p_G / (a (1 - D) + p_G) from a discriminator score."""
    D = np.asarray(D, dtype=np.float64)
    p_G = np.asarray(p_G, dtype=np.float64)
    a = unmasked_ratio(p_mask)
    den = a * (1.0 - D) + p_G
    if np.any(den == 0):
        raise EvaluationError("denominator is zero")
    out = D * p_G / den
    return out if out.ndim else float(out)


def electra_mlm_choice(D: np.ndarray, p_G: np.ndarray, p_mask: float, top: int = 100) -> int:
    """Pick a token from per-candidate discriminator scores over the whole vocabulary.

    Only the ``top`` most probable generator tokens are eligible; the winner
    maximizes the inverted p_data estimate.
    """
    D = np.asarray(D, dtype=np.float64)
    p_G = np.asarray(p_G, dtype=np.float64)
    cand = top_candidates(p_G, top)
    est = invert_discriminator(D[cand], p_G[cand], p_mask)
    best = np.flatnonzero(est == est.max())
    return int(cand[best].min())


def top_candidates(p_G: np.ndarray, top: int = 100) -> np.ndarray:
    order = np.lexsort((np.arange(len(p_G)), -np.asarray(p_G)))
    return np.sort(order[: min(top, len(p_G))])


@torch.no_grad()
def electra_mlm_predict(model: RTDModel, ids: np.ndarray, p_mask: float, top: int = 100) -> int:
    """Predict the token at the single [MASK] in ``ids`` using the discriminator.

    Each generator top-``top`` candidate is written into the context and
    scored by the discriminator; the candidate with the largest inverted
    p_data estimate wins.
    """
    from .corpus import MASK_ID

    ids = np.asarray(ids, dtype=np.int64).reshape(1, -1)
    where = np.flatnonzero(ids[0] == MASK_ID)
    if len(where) != 1:
        raise EvaluationError("context must contain exactly one masked position")
    t = int(where[0])
    h = model.hidden(GENERATOR, ids)
    p_G = model.gen_logits(h[0, t]).double().softmax(-1).numpy()
    cand = top_candidates(p_G, top)
    filled = np.repeat(ids, len(cand), axis=0)
    filled[:, t] = cand
    d = torch.sigmoid(model.disc_logits(model.hidden(DISCRIMINATOR, filled))[:, t].double()).numpy()
    D = np.zeros_like(p_G)
    D[cand] = d
    return electra_mlm_choice(D, p_G, p_mask, top)


# --- tabular toy ---------------------------------------------------------------


@dataclass
class TabularToy:
    """Enumerable toy: context c is the previous token, V = 3.

    ``p_data[c, x]`` and ``p_gen[c, x]`` are row-stochastic; contexts are
    drawn uniformly.
    """

    p_data: np.ndarray
    p_gen: np.ndarray
    p_mask: float = 0.15

    @classmethod
    def default(cls) -> "TabularToy":
        p_data = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.25, 0.25, 0.5]])
        p_gen = np.array([[0.4, 0.4, 0.2], [0.3, 0.3, 0.4], [0.2, 0.3, 0.5]])
        return cls(p_data, p_gen)

    def closed_form(self) -> np.ndarray:
        return optimal_discriminator(self.p_data, self.p_gen, self.p_mask)


def simulate_toy(toy: TabularToy, n_events: int, seed: int):
    """Sample (context, shown token, is_real) events from the corruption process."""
    rs = rngmod.stream(seed, 0, "tabular-toy")
    C, V = toy.p_data.shape
    c = rs.integers(0, C, n_events)
    x = _sample_rows(toy.p_data[c], rs)
    masked = rs.random(n_events) < toy.p_mask
    sample = _sample_rows(toy.p_gen[c], rs)
    shown = np.where(masked, sample, x)
    return c, shown, shown == x


def _sample_rows(p: np.ndarray, rs: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(p, axis=1)
    u = rs.random(len(p)) * cdf[:, -1]
    return np.minimum((cdf <= u[:, None]).sum(axis=1), p.shape[1] - 1)


def train_tabular_discriminator(toy: TabularToy, n_events: int = 2_000_000, steps: int = 3000,
                                lr: float = 0.5, seed: int = 0) -> np.ndarray:
    """Fit one free logit per (context, candidate) by minimizing the empirical
    detection cross-entropy with Adam; returns D[c, x]."""
    C, V = toy.p_data.shape
    c, shown, real = simulate_toy(toy, n_events, seed)
    cell = c * V + shown
    n_real = np.bincount(cell[real], minlength=C * V).astype(np.float64)
    n_fake = np.bincount(cell[~real], minlength=C * V).astype(np.float64)
    # aggregate events by (cell, label): weighted BCE equals the per-event mean
    logits = torch.zeros(C * V, dtype=torch.float64, requires_grad=True)
    w = torch.as_tensor(np.concatenate([n_real, n_fake]) / n_events)
    fake = torch.cat([torch.zeros(C * V, dtype=torch.bool), torch.ones(C * V, dtype=torch.bool)])
    opt = OptimizerState(AdamConfig(peak_lr=lr, weight_decay=0.0, warmup=0, total=10 * steps))
    params = {"logits": logits}
    for _ in range(steps):
        both = torch.cat([logits, logits])
        per = -torch.where(fake, F.logsigmoid(-both), F.logsigmoid(both))
        loss = (w * per).sum()
        (g,) = torch.autograd.grad(loss, logits)
        optimizer_step(params, {"logits": g}, opt)
    return torch.sigmoid(logits.detach()).numpy().reshape(C, V)


# --- downstream probe ------------------------------------------------------------


@dataclass
class ProbeTask:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    frozen: bool = True


def make_probe_task(spec: SyntheticCorpusSpec, seq_len: int, n_train: int, n_test: int, seed: int) -> ProbeTask:
    """Which of two Markov regimes generated each sequence?

    Classes are exactly balanced; train and test share no sequence.
    """
    if spec.regimes < 2:
        raise EvaluationError("probe task needs a corpus spec with at least two regimes")
    per_class = (n_train + n_test) // 2
    rs = rngmod.stream(seed, 0, "probe-task")
    seqs, labels = [], []
    for regime in (0, 1):
        P = transition_matrix(spec, regime)
        cdf = np.cumsum(P, axis=1)
        cdf[:, -1] = 1.0
        out = np.empty((per_class, seq_len), dtype=np.int64)
        out[:, 0] = rs.integers(0, spec.vocab_size, per_class)
        if spec.order == 2:
            prev2 = rs.integers(0, spec.vocab_size, per_class)
        for t in range(1, seq_len):
            row = out[:, t - 1] if spec.order == 1 else prev2 * spec.vocab_size + out[:, t - 1]
            if spec.order == 2:
                prev2 = out[:, t - 1]
            u = rs.random(per_class)
            out[:, t] = np.minimum((cdf[row] <= u[:, None]).sum(axis=1), spec.vocab_size - 1)
        seqs.append(out)
        labels.append(np.full(per_class, regime))
    x = np.concatenate(seqs) + 3  # word index -> vocabulary id
    y = np.concatenate(labels)
    # drop exact duplicates so the split is disjoint
    _, first = np.unique(x, axis=0, return_index=True)
    keep = np.zeros(len(x), dtype=bool)
    keep[first] = True
    order = rs.permutation(len(x))
    order = order[keep[order]]
    x, y = x[order], y[order]
    n_test_eff = min(n_test, len(x) // 2)
    test_x, test_y = x[len(x) - n_test_eff:], y[len(x) - n_test_eff:]
    return ProbeTask(x[: len(x) - n_test_eff], y[: len(x) - n_test_eff], test_x, test_y)


@torch.no_grad()
def pooled_features(model: RTDModel, tower: str, x: np.ndarray, chunk: int = 256) -> torch.Tensor:
    feats = [model.hidden(tower, x[i:i + chunk]).mean(dim=1) for i in range(0, len(x), chunk)]
    return torch.cat(feats).double()


def downstream_probe(model: RTDModel, task: ProbeTask, epochs: int = 200, seed: int = 0,
                     tower: str = DISCRIMINATOR, lr: float = 1e-2, batch: int = 64) -> float:
    """Train a linear classifier on mean-pooled hidden states; held-out accuracy.

    With ``task.frozen`` the encoder is fixed and features are standardized
    on the training split; otherwise the encoder is fine-tuned jointly (on a
    copy, the passed model is left untouched).
    """
    if task.frozen:
        return _frozen_probe(model, task, epochs, seed, tower, lr)
    return _finetune_probe(model, task, epochs, seed, tower, lr, batch)


def _frozen_probe(model, task, epochs, seed, tower, lr) -> float:
    f_tr = pooled_features(model, tower, task.train_x)
    f_te = pooled_features(model, tower, task.test_x)
    mu, sd = f_tr.mean(0), f_tr.std(0) + 1e-8
    f_tr, f_te = (f_tr - mu) / sd, (f_te - mu) / sd
    y = torch.as_tensor(task.train_y, dtype=torch.float64)
    g = rngmod.torch_generator(seed, 0, "probe-init")
    params = {"w": (torch.randn(f_tr.shape[1], generator=g, dtype=torch.float64) * 0.02),
              "b": torch.zeros((), dtype=torch.float64)}
    opt = OptimizerState(AdamConfig(peak_lr=lr, weight_decay=0.0, warmup=0, total=epochs + 1))
    for _ in range(epochs):
        for p in params.values():
            p.requires_grad_(True)
        loss = F.binary_cross_entropy_with_logits(f_tr @ params["w"] + params["b"], y)
        grads = dict(zip(params, torch.autograd.grad(loss, list(params.values()))))
        for p in params.values():
            p.requires_grad_(False)
        optimizer_step(params, grads, opt)
    with torch.no_grad():
        pred = (f_te @ params["w"] + params["b"]) > 0
    return float((pred.numpy() == task.test_y.astype(bool)).mean())


def _finetune_probe(model, task, epochs, seed, tower, lr, batch) -> float:
    import copy

    model = copy.deepcopy(model)
    H = model.config.gen.hidden if tower == GENERATOR else model.config.hidden
    g = rngmod.torch_generator(seed, 0, "probe-init")
    dtype = model.tok_emb.dtype
    head_w = torch.randn(H, generator=g, dtype=dtype) * 0.02
    head_b = torch.zeros((), dtype=dtype)
    params = dict(model.named_parameters())
    params["probe.w"], params["probe.b"] = head_w, head_b
    head_w.requires_grad_(True)
    head_b.requires_grad_(True)
    steps_per_epoch = max(1, len(task.train_x) // batch)
    opt = OptimizerState(AdamConfig(peak_lr=lr, warmup=0, total=epochs * steps_per_epoch + 1))
    y_all = torch.as_tensor(task.train_y, dtype=dtype)
    for e in range(epochs):
        perm = rngmod.stream(seed, e, "probe-order").permutation(len(task.train_x))
        for i in range(steps_per_epoch):
            idx = perm[i * batch:(i + 1) * batch]
            pooled = model.hidden(tower, task.train_x[idx]).mean(dim=1)
            loss = F.binary_cross_entropy_with_logits(pooled @ head_w + head_b, y_all[idx])
            names = list(params)
            gs = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
            grads = {n: (gr if gr is not None else torch.zeros_like(params[n])) for n, gr in zip(names, gs)}
            optimizer_step(params, grads, opt)
    with torch.no_grad():
        pooled = torch.cat([model.hidden(tower, task.test_x[i:i + 256]).mean(dim=1)
                            for i in range(0, len(task.test_x), 256)])
        pred = (pooled @ head_w + head_b) > 0
    return float((pred.numpy() == task.test_y.astype(bool)).mean())
