import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_config
from rtdlab.corpus import MASK_ID, SyntheticCorpusSpec
from rtdlab.encoder import DISCRIMINATOR, GENERATOR, init_params
from rtdlab.evaluation import (EvaluationError, ProbeTask, TabularToy, downstream_probe, electra_mlm_choice,
                               electra_mlm_predict, invert_discriminator, make_probe_task, masked_accuracy,
                               masked_lm_accuracy, optimal_discriminator, rtd_metrics, top_candidates,
                               train_tabular_discriminator, unmasked_ratio)
from rtdlab.runs import RunConfig, probe_task


def minimize_detection_loss(p_data, p_G, p_mask, iters=200):
    """Ternary search for the D minimizing the expected per-candidate Bernoulli loss.

    A candidate is shown as real with weight p_data * (a + p_G) (unmasked, or
    masked and resampled correctly) and as fake with weight p_G * (1 - p_data).
    """
    a = (1 - p_mask) / p_mask
    w_real, w_fake = p_data * (a + p_G), p_G * (1 - p_data)
    f = lambda d: -w_real * math.log(d) - w_fake * math.log(1 - d)
    lo, hi = 1e-15, 1 - 1e-15
    for _ in range(iters):
        m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        lo, hi = (lo, m2) if f(m1) < f(m2) else (m1, hi)
    return (lo + hi) / 2


class TestMaskedAccuracy:
    def test_oracle(self):
        t = np.array([3, 7, 10, 4])
        assert masked_accuracy(np.eye(11)[t], t) == 1.0

    def test_uniform_is_one_over_v(self):
        t = np.random.default_rng(0).integers(0, 11, 10_000)
        assert masked_accuracy(np.full((10_000, 11), 1 / 11), t) == pytest.approx(1 / 11, abs=0.01)

    def test_tie_goes_to_lowest(self):
        p = np.zeros((1, 11))
        p[0, [3, 4]] = 0.5
        assert masked_accuracy(p, np.array([3])) == 1.0
        assert masked_accuracy(p, np.array([4])) == 0.0

    def test_model_accuracy_in_range_and_deterministic(self, rs):
        m = init_params(tiny_config(), 0)
        w = rs.integers(3, 11, size=(64, 16))
        a = masked_lm_accuracy(m, w, 0.15, 3, n_batches=2, batch=8)
        assert 0 <= a <= 1 and a == masked_lm_accuracy(m, w, 0.15, 3, n_batches=2, batch=8)


class TestRTDMetrics:
    def test_hand_example(self):
        r = rtd_metrics(np.array([0.9, 0.2, 0.8, 0.7]), np.array([False, True, False, True]))
        assert (r.accuracy, r.precision, r.recall) == (0.75, 1.0, 0.5)

    def test_all_real(self):
        r = rtd_metrics(np.full(6, 0.9), np.zeros(6, bool))
        assert r.accuracy == 1.0 and r.recall == 1.0 and r.no_positives

    def test_half_is_majority(self):
        fake = np.array([True, False, False, False, True, False, False, False])
        r = rtd_metrics(np.full(8, 0.5), fake)
        assert r.accuracy == pytest.approx(0.75) and r.no_predicted_positives

    def test_shape_mismatch(self):
        with pytest.raises(EvaluationError):
            rtd_metrics(np.zeros(3), np.zeros(4, bool))


class TestOptimalDiscriminator:
    def test_worked_example(self):
        assert unmasked_ratio(0.15) == pytest.approx(17 / 3)
        d = optimal_discriminator(0.5, 0.25, 0.15)
        assert d == pytest.approx(0.9595, abs=5e-5)
        assert d == pytest.approx(minimize_detection_loss(0.5, 0.25, 0.15), abs=1e-7)

    @given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.floats(0.02, 0.98))
    def test_matches_numerical_minimum(self, p_data, p_G, p_mask):
        assert optimal_discriminator(p_data, p_G, p_mask) == pytest.approx(
            minimize_detection_loss(p_data, p_G, p_mask), abs=1e-6)

    def test_edges(self):
        assert optimal_discriminator(1.0, 1.0, 0.15) == 1.0
        assert optimal_discriminator(0.0, 0.3, 0.15) == 0.0
        with pytest.raises(EvaluationError, match="undefined optimum"):
            optimal_discriminator(0.0, 0.0, 0.15)
        with pytest.raises(EvaluationError):
            optimal_discriminator(0.5, 0.5, 1.0)


class TestInversion:
    def test_worked_example(self):
        assert invert_discriminator(0.9595, 0.25, 0.15) == pytest.approx(0.5, abs=1e-3)
        assert invert_discriminator(optimal_discriminator(0.5, 0.25, 0.15), 0.25, 0.15) == pytest.approx(0.5, abs=1e-12)

    def test_zero(self):
        assert invert_discriminator(0.0, 0.4, 0.15) == 0.0

    def test_denominator(self):
        with pytest.raises(EvaluationError):
            invert_discriminator(1.0, 0.0, 0.15)

    @given(st.floats(0.0, 1.0), st.floats(0.02, 0.98))
    def test_equal_distributions_roundtrip(self, p, p_mask):
        if p == 0:
            p = 0.5
        assert invert_discriminator(optimal_discriminator(p, p, p_mask), p, p_mask) == pytest.approx(p, abs=1e-12)

    def test_random_roundtrip(self):
        rs = np.random.default_rng(0)
        p_data, p_G, p_mask = rs.random(10_000), rs.random(10_000) + 1e-3, rs.uniform(0.01, 0.99, 10_000)
        back = invert_discriminator(optimal_discriminator(p_data, p_G, p_mask), p_G, p_mask)
        assert np.abs(back - p_data).max() <= 1e-12


class TestElectraMLM:
    def test_no_truncation_below_100(self):
        p = np.random.default_rng(0).dirichlet(np.ones(50))
        assert len(top_candidates(p)) == 50

    def test_truncation_keeps_most_probable(self):
        p = np.random.default_rng(1).dirichlet(np.ones(300))
        cand = top_candidates(p, 100)
        assert len(cand) == 100 and p[cand].min() >= np.sort(p)[-100]

    def test_constant_d_gives_generator_argmax(self):
        rs = np.random.default_rng(2)
        for _ in range(50):
            p = rs.dirichlet(np.ones(20))
            assert electra_mlm_choice(np.full(20, rs.uniform(0.05, 0.95)), p, 0.15) == int(np.argmax(p))

    def test_ineligible_candidate_never_wins(self):
        p = np.r_[np.full(150, 0.9 / 150), np.full(50, 0.1 / 50)]
        D = np.full(200, 0.1)
        D[199] = 0.999
        assert electra_mlm_choice(D, p, 0.15, top=100) < 150

    def test_ties_lowest_id(self):
        assert electra_mlm_choice(np.full(4, 0.5), np.full(4, 0.25), 0.15) == 0

    def test_tabular_toy_recovers_data_argmax(self):
        toy = TabularToy.default()
        D = train_tabular_discriminator(toy, n_events=400_000, steps=1500)
        for c in range(3):
            assert electra_mlm_choice(D[c], toy.p_gen[c], toy.p_mask) == int(np.argmax(toy.p_data[c]))

    def test_model_prediction(self, rs):
        m = init_params(tiny_config(), 0)
        ids = rs.integers(3, 11, size=16)
        ids[5] = MASK_ID
        tok = electra_mlm_predict(m, ids, 0.15)
        assert 0 <= tok < 11 and tok == electra_mlm_predict(m, ids, 0.15)
        with pytest.raises(EvaluationError):
            electra_mlm_predict(m, np.full(16, 4), 0.15)


class TestProbe:
    @pytest.fixture(scope="class")
    @staticmethod
    def task():
        return probe_task(RunConfig())

    def test_balance_and_disjoint(self, task):
        for y in (task.train_y, task.test_y):
            assert abs(y.mean() - 0.5) <= 0.05
        train = {tuple(r) for r in task.train_x}
        assert not train & {tuple(r) for r in task.test_x}

    def test_needs_two_regimes(self):
        with pytest.raises(EvaluationError):
            make_probe_task(SyntheticCorpusSpec(regimes=1), 8, 10, 10, 0)

    def test_separable(self):
        rs = np.random.default_rng(0)
        x = np.r_[rs.integers(3, 5, (40, 8)), rs.integers(9, 11, (40, 8))]  # disjoint token sets per class
        y = np.r_[np.zeros(40, int), np.ones(40, int)]
        idx = np.random.default_rng(0).permutation(80)
        task = ProbeTask(x[idx[:60]], y[idx[:60]], x[idx[60:]], y[idx[60:]])
        m = init_params(tiny_config(init_std=0.5), 0)
        assert downstream_probe(m, task, 200) == 1.0

    def test_random_encoder_near_chance(self, task):
        cfg = RunConfig()
        accs = [downstream_probe(init_params(cfg.model_config(cfg.syn_vocab + 3), s), task, 200, seed=s)
                for s in range(10)]
        assert abs(np.mean(accs) - 0.5) <= 0.05

    def test_deterministic_and_leaves_model(self, task):
        m = init_params(tiny_config(vocab=67, max_len=8), 0)
        before = m.tok_emb.clone()
        assert downstream_probe(m, task, 20, seed=1) == downstream_probe(m, task, 20, seed=1)
        assert torch.equal(before, m.tok_emb)

    def test_finetune_runs_on_copy(self):
        x = np.r_[np.full((16, 8), 3), np.full((16, 8), 9)]
        x[:, 0] = np.arange(32) % 8 + 3
        y = np.r_[np.zeros(16, int), np.ones(16, int)]
        task = ProbeTask(x[::2], y[::2], x[1::2], y[1::2], frozen=False)
        m = init_params(tiny_config(), 0)
        before = {n: p.clone() for n, p in m.named_parameters()}
        acc = downstream_probe(m, task, 3, batch=8, tower=GENERATOR)
        assert 0 <= acc <= 1
        assert all(torch.equal(before[n], p) for n, p in m.named_parameters())
