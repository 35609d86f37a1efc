"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The compute-efficiency test trains 50 runs through the CLI (about half an
hour on one core). Set RTD_ACCEPTANCE_RUNS to a directory to keep those runs
and reuse them on later invocations.
"""

import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import gradcheck_model, random_ids, report_criterion, tiny_config
from gradcheck import check_all
from oracles import reinforce_enumeration
from rtdlab.cli import main
from rtdlab.corpus import UnigramTable
from rtdlab.corruption import build_corruption, sample_mask_positions
from rtdlab.encoder import init_params
from rtdlab.evaluation import (TabularToy, invert_discriminator, masked_lm_accuracy, optimal_discriminator,
                               train_tabular_discriminator)
from rtdlab.flopcount import forward_flops, train_step_flops
from rtdlab.objectives import VARIANTS, LossSpec, combined_loss_parts, loss_gradients, prepare, variant_loss
from rtdlab.runs import RunConfig, curve_rows, load_data, write_curves
from rtdlab.trainer import load_checkpoint, new_state, pretrain, save_checkpoint, step_flops

from test_flopcount import REF, fixture_rows, report_for


def test_1_gradient_exactness():
    t0 = time.perf_counter()
    worst = {}
    unigram = UnigramTable(np.r_[0.0, 0.0, 0.0, np.ones(8) / 8])
    for variant in VARIANTS:
        model = gradcheck_model(tiny_config(init_std=0.2))
        spec = LossSpec(variant, unigram=unigram)
        x = random_ids(np.random.default_rng(0), 2, 16, 11)
        _, grads, prep = loss_gradients(spec, model, x, np.random.default_rng(1))
        with torch.no_grad():
            errs = check_all(model, lambda: variant_loss(spec, model, prep)[0].item(), grads)
        worst[variant] = max(errs.values())
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 120
    report_criterion(1, "gradient exactness", ok,
                     f"worst relative error {max(worst.values()):.2e} over {len(worst)} variants, {elapsed:.1f}s")
    assert ok, worst


def test_2_stop_gradient():
    model = init_params(tiny_config(), 0, dtype=torch.float64)
    x = random_ids(np.random.default_rng(0), 4, 16, 11)
    prep = prepare(LossSpec(), model, x, np.random.default_rng(1))
    _, lam_disc = combined_loss_parts(model, prep)
    params = dict(model.named_parameters())
    gen_only = [n for n in params if model.group_of(n) == "gen"]
    shared = ["tok_emb", "pos_emb"]
    names = gen_only + shared
    grads = torch.autograd.grad(lam_disc, [params[n] for n in names], allow_unused=True)
    g = {n: (torch.zeros_like(params[n]) if gr is None else gr) for n, gr in zip(names, grads)}
    leaks = [n for n in gen_only if not torch.equal(g[n], torch.zeros_like(g[n]))]
    shared_ok = all(g[n].abs().max().item() > 0 for n in shared)
    ok = not leaks and shared_ok
    report_criterion(2, "stop-gradient rule", ok,
                     f"{len(gen_only)} generator-only tensors with exactly zero gradient, "
                     f"shared embeddings nonzero: {shared_ok}")
    assert ok, leaks


def test_3_labeling_rule():
    rs = np.random.default_rng(0)
    violations = 0
    for _ in range(10_000):
        n, V, B = int(rs.integers(1, 40)), int(rs.integers(4, 9)), int(rs.integers(1, 4))
        x = rs.integers(3, V, size=(B, n))
        spec = sample_mask_positions(n, float(rs.uniform(0.05, 0.95)), rs, batch=B)
        rec = build_corruption(x, spec, rs.integers(3, V, size=spec.positions.shape))
        violations += int(((rec.corrupt == rec.originals) != rec.real).sum())
    report_criterion(3, "labeling rule", violations == 0, f"{violations} violations over 10^4 records")
    assert violations == 0


def test_4_optimal_discriminator_oracle():
    t0 = time.perf_counter()
    toy = TabularToy.default()
    D = train_tabular_discriminator(toy)
    err = float(np.abs(D - toy.closed_form()).max())
    elapsed = time.perf_counter() - t0
    ok = err <= 0.02 and elapsed < 60
    report_criterion(4, "optimal-discriminator oracle", ok, f"max |D - closed form| {err:.4f}, {elapsed:.1f}s")
    assert ok


def test_5_inversion_roundtrip():
    rs = np.random.default_rng(0)
    p_data, p_G, p_mask = rs.random(10_000), rs.random(10_000) + 1e-6, rs.uniform(1e-3, 1 - 1e-3, 10_000)
    err = float(np.abs(invert_discriminator(optimal_discriminator(p_data, p_G, p_mask), p_G, p_mask) - p_data).max())
    report_criterion(5, "inversion roundtrip", err <= 1e-12, f"max error {err:.2e} over 10^4 triples")
    assert err <= 1e-12


def test_6_reinforce_unbiased():
    worst = 0.0
    for seed in range(5):
        expected, exact = reinforce_enumeration(seed)
        worst = max(worst, max((expected[n] - exact[n]).abs().max().item() for n in exact))
    report_criterion(6, "REINFORCE unbiasedness", worst <= 1e-10, f"max deviation {worst:.2e} (V=5, 5 instances)")
    assert worst <= 1e-10


# --- compute efficiency -------------------------------------------------------------

ORDER_VARIANTS = ("electra", "all-tokens-mlm", "replace-mlm", "electra15", "bert")
SEEDS = range(10)
BUDGET_STEPS = 2000


def _runs_root(tmp_path_factory) -> Path:
    keep = os.environ.get("RTD_ACCEPTANCE_RUNS")
    if keep:
        Path(keep).mkdir(parents=True, exist_ok=True)
        return Path(keep)
    return tmp_path_factory.mktemp("compute")


@pytest.mark.slow
def test_7_compute_efficiency_ordering(tmp_path_factory):
    root = _runs_root(tmp_path_factory)
    cfg = RunConfig()
    budget = step_flops(cfg.train_config(cfg.syn_vocab + 3), "electra") * BUDGET_STEPS
    dirs, times = [], []
    for seed in SEEDS:
        for v in ORDER_VARIANTS:
            out = root / f"{v}-s{seed}"
            dirs.append(out)
            if (out / "milestones.csv").exists():
                continue
            t0 = time.perf_counter()
            assert main(["pretrain", "--variant", v, "--seed", str(seed), "--budget_flops", str(budget),
                         "--out", str(out)]) == 0
            times.append(time.perf_counter() - t0)
    rows = curve_rows(dirs)
    write_curves(rows, root / "curves.csv")
    try:
        from rtdlab.plotting import plot_curves
        plot_curves(rows, root / "curves.png", "probe accuracy at matched FLOPs")
    except ImportError:
        pass

    final = max(r["cumulative_flops"] for r in rows)
    acc = {(r["variant"], r["seed"]): r["probe_accuracy"] for r in rows if r["cumulative_flops"] == final}
    mean = {v: float(np.mean([acc[(v, s)] for s in SEEDS])) for v in ORDER_VARIANTS}
    paired = sum(acc[("electra", s)] > acc[("bert", s)] for s in SEEDS)
    checks = {
        "electra >= all-tokens-mlm": mean["electra"] >= mean["all-tokens-mlm"],
        "all-tokens-mlm >= replace-mlm": mean["all-tokens-mlm"] >= mean["replace-mlm"],
        "all-tokens-mlm >= electra15": mean["all-tokens-mlm"] >= mean["electra15"],
        "replace-mlm >= bert": mean["replace-mlm"] >= mean["bert"],
        "electra15 >= bert": mean["electra15"] >= mean["bert"],
        "electra > bert in >= 7/10 seeds": paired >= 7,
    }
    ok = all(checks.values())
    means = ", ".join(f"{v} {mean[v]:.4f}" for v in ORDER_VARIANTS)
    failed = [k for k, v in checks.items() if not v]
    run_time = f", longest run {max(times):.0f}s" if times else ""
    report_criterion(7, "compute-efficiency ordering", ok,
                     f"means at {final:.3g} FLOPs: {means}; electra > bert in {paired}/10 seeds{run_time}"
                     + (f"; violated: {'; '.join(failed)}" if failed else ""))
    assert ok, checks


def _desk_data():
    cfg = RunConfig()
    return cfg, load_data(cfg)


def test_8_two_stage_switch():
    cfg, data = _desk_data()
    base = cfg.train_config(len(data.vocab))
    tcfg = replace(base, variant="two-stage", model=replace(base.model, gen_mult=1.0),
                   adam=replace(base.adam, warmup=20))
    n, wins, pairs = 300, 0, []
    for seed in SEEDS:
        _, log = pretrain(tcfg, data.windows, 2 * n, seed)
        d = log.column("disc_loss")
        pairs.append((d[n], d[n + 100]))  # phase-2 steps 0 and 100
        wins += d[n + 100] < d[n]
    ok = wins == 10
    report_criterion(8, "two-stage switch", ok,
                     f"phase-2 disc_loss fell by step 100 in {wins}/10 seeds "
                     f"(mean {np.mean([p[0] for p in pairs]):.3f} -> {np.mean([p[1] for p in pairs]):.3f})")
    assert ok


@pytest.mark.slow
def test_9_adversarial_vs_mle():
    cfg, data = _desk_data()
    base = cfg.train_config(len(data.vocab))
    steps, wins, accs = 500, 0, []
    for seed in SEEDS:
        a = {}
        for v in ("electra", "adversarial"):
            st, _ = pretrain(replace(base, variant=v), data.windows, steps, seed)
            a[v] = masked_lm_accuracy(st.model, data.windows, cfg.mask_frac, 1000 + seed, n_batches=16)
        accs.append(a)
        wins += a["adversarial"] <= a["electra"]
    ok = wins >= 7
    report_criterion(9, "adversarial vs MLE generator", ok,
                     f"adversarial <= MLE accuracy in {wins}/10 seeds (means "
                     f"{np.mean([a['adversarial'] for a in accs]):.4f} vs {np.mean([a['electra'] for a in accs]):.4f})")
    assert ok


def test_10_flops_accounting():
    rows = fixture_rows()
    twice = all(
        train_step_flops(c, 64, 1, v).per_tower[t] == 2 * forward_flops(c, 64, 1, v).per_tower[t]
        for v, c in (("electra", REF), ("bert", replace(REF, gen_mult=1.0)))
        for t in forward_flops(c, 64, 1, v).per_tower)
    e, b = report_for("electra"), report_for("bert")
    fixture = (e.total == rows[("electra", "all")]["forward_total"]
               and e.per_tower["generator"] == rows[("electra", "generator")]["forward_total"]
               and e.per_tower["discriminator"] == rows[("electra", "discriminator")]["forward_total"]
               and b.total == rows[("bert", "bert")]["forward_total"]
               and 2 * e.total == rows[("electra", "all")]["train_step_total"])
    share = min(e.matmul / e.total, b.matmul / b.total)
    ok = twice and fixture and share >= 0.95
    report_criterion(10, "FLOPs accounting", ok,
                     f"train = 2 x forward per tower: {twice}; fixture exact: {fixture}; matmul share {share:.4f}")
    assert ok


def test_11_determinism(tmp_path):
    small = ["--layers", "1", "--hidden", "16", "--ffn", "32", "--heads", "2", "--embed", "16", "--steps", "30",
             "--checkpoint_every", "10", "--syn_length", "20000"]
    for name in ("a", "b"):
        assert main(["pretrain", *small, "--out", str(tmp_path / name)]) == 0
    same_csv = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    cfg, data = _desk_data()
    tcfg = cfg.train_config(len(data.vocab))
    full, log_full = pretrain(tcfg, data.windows, 20, 3)
    half, _ = pretrain(tcfg, data.windows, 10, 3, state=new_state(tcfg, 3, 20))
    save_checkpoint(tmp_path / "half.rtd", half)
    resumed, _ = load_checkpoint(tmp_path / "half.rtd")
    resumed, log_rest = pretrain(tcfg, data.windows, 20, 3, state=resumed)
    same_log = [r.csv_row(False) for r in log_rest.records] == [r.csv_row(False) for r in log_full.records[10:]]
    same_params = all(torch.equal(p, q) for p, q in zip(full.model.parameters(), resumed.model.parameters()))
    ok = same_csv and same_log and same_params
    report_criterion(11, "determinism", ok, f"byte-identical metrics.csv: {same_csv}; "
                     f"resume matches uninterrupted run for 10 steps: {same_log and same_params}")
    assert ok
