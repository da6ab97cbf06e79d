import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2

from gref import data as D
from gref.data import (PreferencePair, SessionRecord, SimulatorConfig, build_preference_pair, build_pretrain_example,
                       load_sessions, personalization_score, simulate_sessions, split_by_hash)
from gref.errors import ConfigError, InvalidArgumentError, ParseError, SchemaError


def make_record(n=6, m=8, clicks=None, d=3, sid="s"):
    cands = [D.Candidate(f"y{j + 1}", [float(j)] * d) for j in range(m)]
    return SessionRecord(sid, cands, [f"y{j + 1}" for j in range(n)], list(clicks or [0] * n))


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs), encoding="utf-8")


class TestPersonalizationScore:
    @pytest.mark.parametrize("p,u,expect", [(2, 1, 1.5), (1, 0, 1.0), (5, 1, 1.2)])
    def test_examples(self, p, u, expect):
        assert personalization_score(p, u, 1, 1) == pytest.approx(expect)

    def test_position_zero(self):
        with pytest.raises(InvalidArgumentError):
            personalization_score(0, 1)


class TestPreferencePair:
    def test_worked_example(self):
        rec = make_record(n=6, clicks=[0, 1, 0, 0, 1, 0])
        pair = build_preference_pair(rec)
        assert pair.winner == ["y2", "y5", "y1", "y3", "y4", "y6"]
        assert pair.loser == rec.exposed

    def test_no_clicks(self):
        assert build_preference_pair(make_record(n=6)) is None

    def test_click_on_first_only(self):
        assert build_preference_pair(make_record(n=6, clicks=[1, 0, 0, 0, 0, 0])) is None

    def test_invalid_pair(self):
        with pytest.raises(SchemaError):
            PreferencePair(["a", "b"], ["a", "b"])
        with pytest.raises(SchemaError):
            PreferencePair(["a", "b"], ["a", "c"])

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=1, max_size=12))
    def test_clicked_items_never_move_down(self, clicks):
        n = len(clicks)
        rec = make_record(n=n, m=n, clicks=clicks)
        pair = build_preference_pair(rec)
        if pair is None:
            # idempotence: the exposure already is the winner
            assert all(clicks[i] >= clicks[i + 1] for i in range(n - 1)) or sum(clicks) in (0, n)
            return
        assert sorted(pair.winner) == sorted(pair.loser) and pair.winner != pair.loser
        for i, u in enumerate(clicks):
            if u:
                assert pair.winner.index(rec.exposed[i]) <= i
        # applying the construction to the winner's order yields nothing new
        again = SessionRecord(rec.session_id, rec.candidates, pair.winner,
                              [clicks[rec.exposed.index(x)] for x in pair.winner])
        assert build_preference_pair(again) is None


class TestPretrainExample:
    def test_sentinels(self):
        rec = make_record(n=10, m=12)
        cands, target = build_pretrain_example(rec)
        assert len(target) == 12
        assert target[1:-1] == rec.exposed
        assert target[0] == D.BOS_TOKEN and target[-1] == D.EOS_TOKEN
        assert [c.item_id for c in cands] == [c.item_id for c in rec.candidates]


class TestLoad:
    def _obj(self, sid="a", m=3, n=2):
        return {"session_id": sid,
                "candidates": [{"item_id": f"{sid}{j}", "features": [0.1 * j, 1.0]} for j in range(m)],
                "exposed": [f"{sid}1", f"{sid}0"], "feedback": [1, 0]}

    def test_two_lines(self, tmp_path):
        p = tmp_path / "s.jsonl"
        write_lines(p, [self._obj("a"), self._obj("b")])
        recs = list(load_sessions(p))
        assert [r.session_id for r in recs] == ["a", "b"]
        assert recs[0].exposed_indices == [1, 0]

    def test_empty(self, tmp_path):
        p = tmp_path / "s.jsonl"
        p.write_text("")
        assert list(load_sessions(p)) == []

    def test_exposed_not_in_candidates(self, tmp_path):
        o = self._obj()
        o["exposed"] = ["a1", "ghost"]
        p = tmp_path / "s.jsonl"
        write_lines(p, [o])
        with pytest.raises(SchemaError, match="ghost"):
            list(load_sessions(p))

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "s.jsonl"
        p.write_text(json.dumps(self._obj()) + "\n{not json\n")
        with pytest.raises(ParseError) as info:
            list(load_sessions(p))
        assert info.value.line == 2

    def test_unknown_fields_counted(self, tmp_path):
        o = self._obj()
        o["extra"] = 1
        p = tmp_path / "s.jsonl"
        write_lines(p, [o])
        before = D.unknown_field_count
        assert len(list(load_sessions(p))) == 1
        assert D.unknown_field_count == before + 1

    def test_round_trip(self, tmp_path):
        corpus = simulate_sessions(SimulatorConfig(num_sessions=5, seed=3))
        p = tmp_path / "s.jsonl"
        D.dump_sessions(corpus.records, p)
        back = list(load_sessions(p, m=30, n=10))
        assert [r.to_json() for r in back] == [r.to_json() for r in corpus.records]


class TestSimulator:
    def test_deterministic_bytes(self, tmp_path):
        cfg = SimulatorConfig(num_sessions=50, seed=7)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        D.dump_sessions(simulate_sessions(cfg).records, a)
        D.dump_sessions(simulate_sessions(SimulatorConfig(num_sessions=50, seed=7)).records, b)
        assert a.read_bytes() == b.read_bytes()

    def test_n_greater_than_m(self):
        with pytest.raises(ConfigError):
            SimulatorConfig(m=5, n=6)

    def test_records_valid(self):
        corpus = simulate_sessions(SimulatorConfig(num_sessions=40, seed=1))
        for r in corpus.records:
            r.validate(30, 10, corpus.config.feature_dim)
            assert set(r.feedback) <= {0, 1}

    def test_zero_noise_exposes_policy_top_n(self):
        cfg = SimulatorConfig(num_sessions=30, seed=2, exposure_noise=0.0)
        corpus = simulate_sessions(cfg)
        k = cfg.num_topics
        for r, u in zip(corpus.records, corpus.user_topics):
            f = r.features
            policy = D.item_affinity(u, f, cfg) + cfg.policy_popularity * f[:, k + 1]
            top = np.argsort(-policy, kind="stable")[:cfg.n]
            assert r.exposed_indices == top.tolist()

    @staticmethod
    def _adjacent_chi2(coherence, sessions=100_000):
        """Chi-square statistic of next-slot clicks against their base rate, split by the previous click."""
        cfg = SimulatorConfig(num_sessions=sessions, seed=11, topic_coherence=coherence)
        corpus = simulate_sessions(cfg)
        feats = np.stack([r.features for r in corpus.records])
        slates = np.array([r.exposed_indices for r in corpus.records])
        clicks = np.array([r.feedback for r in corpus.records])
        base = D.base_click_probabilities(corpus.user_topics, feats, slates, cfg)
        prev, nxt, p = clicks[:, :-1].ravel(), clicks[:, 1:].ravel(), base[:, 1:].ravel()
        stat = 0.0
        for v in (0, 1):
            sel = prev == v
            stat += (nxt[sel].sum() - p[sel].sum()) ** 2 / (p[sel] * (1 - p[sel])).sum()
        return stat

    def test_clicks_independent_without_coherence(self):
        stat = self._adjacent_chi2(0.0)
        assert chi2.sf(stat, df=2) > 0.01

    def test_coherence_creates_dependence(self):
        stat = self._adjacent_chi2(0.3, sessions=20_000)
        assert chi2.sf(stat, df=2) < 0.01


def test_split_is_stable_and_disjoint():
    recs = simulate_sessions(SimulatorConfig(num_sessions=200, seed=4)).records
    tr, va = split_by_hash(recs, 0.2)
    tr2, va2 = split_by_hash(list(reversed(recs)), 0.2)
    assert {r.session_id for r in va} == {r.session_id for r in va2}
    assert not {r.session_id for r in tr} & {r.session_id for r in va}
    assert 20 < len(va) < 60


def test_latents_round_trip(tmp_path):
    corpus = simulate_sessions(SimulatorConfig(num_sessions=10, seed=5))
    D.dump_latents(corpus, tmp_path / "u.json")
    lat = D.load_latents(tmp_path / "u.json")
    for r, u in zip(corpus.records, corpus.user_topics):
        np.testing.assert_allclose(lat[r.session_id], u, atol=1e-9)
