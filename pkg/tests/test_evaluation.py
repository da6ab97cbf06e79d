import dataclasses
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from gref.data import SimulatorConfig, item_affinity, simulate_sessions
from gref.errors import InvalidArgumentError, UndefinedMetricError
from gref.evaluation import (AblationTable, MetricReport, ablation_defaults, auc, exposure_auc, latency_bench,
                             ndcg_at_k, replay_ndcg, reports_to_csv, reports_to_json, run_ablation)
from gref.model import GenRerankerModel, ModelConfig


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


class TestAuc:
    def test_examples(self):
        assert auc([0.9, 0.2, 0.7], [1, 0, 0]) == 1.0
        assert auc([0.9, 0.5, 0.1], [1, 0, 1]) == 0.5
        assert auc([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [1, 1])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=30))
    def test_matches_pair_counting_and_monotone_transform(self, rows):
        scores = [float(s) for s, _ in rows]
        labels = [y for _, y in rows]
        assume(0 < sum(labels) < len(labels))
        expect = pairwise_auc(scores, labels)
        assert auc(scores, labels) == pytest.approx(expect, abs=1e-12)
        assert auc([math.exp(3 * s) - 7 for s in scores], labels) == pytest.approx(expect, abs=1e-12)


class TestNdcg:
    def test_examples(self):
        assert ndcg_at_k([1, 0, 1], 3) == pytest.approx((1 + 0.5) / (1 + 1 / math.log2(3)))
        assert abs(ndcg_at_k([1, 0, 1], 3) - 0.9197) < 1e-4
        assert ndcg_at_k([1, 1, 0], 3) == 1.0
        assert ndcg_at_k([0, 0, 0], 3) == 0.0

    def test_k_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            ndcg_at_k([1, 0], 3)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=1, max_size=12), st.data())
    def test_range_and_prefix_property(self, rel, data):
        k = data.draw(st.integers(1, len(rel)))
        v = ndcg_at_k(rel, k)
        assert 0.0 <= v <= 1.0 + 1e-12
        if sum(rel):
            top = rel[:k]
            ideal_hits = min(sum(rel), k)
            is_prefix = sum(top) == ideal_hits and all(top[i] >= top[i + 1] for i in range(k - 1))
            assert (abs(v - 1.0) < 1e-12) == is_prefix


class TestReports:
    def test_range_check(self):
        with pytest.raises(InvalidArgumentError):
            MetricReport("d", "m", 0, auc=1.2)

    def test_csv_and_json(self):
        reps = [MetricReport("syn", "gref", 3, 0.75, 0.5, None, None, 3.0)]
        text = reports_to_csv(reps)
        assert text.splitlines()[0] == "dataset,model,seed,auc,ndcg,mean_latency_us,p99_latency_us,forward_passes"
        assert text.splitlines()[1] == "syn,gref,3,0.750000,0.500000,,,3.000000"
        assert json.loads(reports_to_json(reps))[0]["auc"] == 0.75


@pytest.fixture(scope="module")
def corpus():
    return simulate_sessions(SimulatorConfig(num_sessions=120, seed=0))


@pytest.fixture(scope="module")
def small_model(corpus):
    cfg = ModelConfig(d_model=16, encoder_layers=1, decoder_layers=1, feature_dim=corpus.config.feature_dim)
    return GenRerankerModel(cfg, seed=0)


def test_exposure_auc_in_range(corpus, small_model):
    a = exposure_auc(small_model, corpus.records[:20])
    assert 0.0 <= a <= 1.0


class TestReplay:
    def test_common_random_numbers(self, corpus):
        recs = corpus.records[:50]
        slates = np.array([r.exposed_indices for r in recs])
        users = corpus.latent_for([r.session_id for r in recs])
        a = replay_ndcg(recs, slates, users, corpus.config, replays=4, seed=3)
        b = replay_ndcg(recs, slates, users, corpus.config, replays=4, seed=3)
        assert a == b and 0.0 < a <= 1.0

    def test_affinity_ordering_beats_its_reverse(self):
        corpus = simulate_sessions(SimulatorConfig(num_sessions=300, seed=4))
        cfg = corpus.config
        feats = np.stack([r.features for r in corpus.records])
        aff = item_affinity(corpus.user_topics, feats, cfg)
        best = np.argsort(-aff, axis=1)[:, :cfg.n]
        worst = best[:, ::-1]
        good = replay_ndcg(corpus.records, best, corpus.user_topics, cfg, replays=4)
        bad = replay_ndcg(corpus.records, worst, corpus.user_topics, cfg, replays=4)
        assert good > bad


def test_latency_bench_shape(corpus):
    cfg = ModelConfig(d_model=8, encoder_layers=1, decoder_layers=1, attention_heads=2,
                      feature_dim=corpus.config.feature_dim, ffn_mult=1)
    model = GenRerankerModel(cfg, seed=0)
    stats = latency_bench(model, corpus.records[:4], ("ar", "omtp"), warmup=1, iters=30)
    assert stats["ar"].forward_passes == 10 and stats["omtp"].forward_passes == 3
    assert stats["ar"].samples == 30 and stats["ratio"] > 0
    assert stats["ar"].p50_us <= stats["ar"].p99_us
    with pytest.raises(InvalidArgumentError):
        latency_bench(model, corpus.records[:4], "ar", iters=10)


def test_ablation_is_deterministic(corpus):
    mc, tc = ablation_defaults()
    mc = dataclasses.replace(mc, d_model=8, encoder_layers=1, decoder_layers=1, attention_heads=2, ffn_mult=1)
    tc = dataclasses.replace(tc, pretrain_epochs=1, dpo_epochs=1)
    a = run_ablation(corpus, [0, 1], mc, tc, replays=2)
    b = run_ablation(corpus, [0, 1], mc, tc, replays=2)
    assert a.to_csv() == b.to_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == "block,pretraining,post_training,l_n,l_o,seed,auc,ndcg"
    assert len(lines) == 1 + 4 * 2
    summary = a.summary()
    assert set(summary["wins"]) == {"pretrain_dpo_over_pretrain_only_ndcg", "pretrain_dpo_over_dpo_only_auc",
                                    "ln_lo_over_ln_only_ndcg"}


def test_ablation_wins_counting():
    cells = {}
    for s, (x, y) in enumerate([(0.5, 0.4), (0.4, 0.5), (0.6, 0.6)]):
        cells[("pretrain_dpo", s)] = MetricReport("d", "a", s, auc=x, ndcg=x)
        cells[("pretrain_only", s)] = MetricReport("d", "b", s, auc=y, ndcg=y)
    table = AblationTable(cells, [0, 1, 2])
    assert table.wins("pretrain_dpo", "pretrain_only", "ndcg") == 1
    assert table.wins("pretrain_dpo", "pretrain_only", "ndcg", strict=False) == 2
