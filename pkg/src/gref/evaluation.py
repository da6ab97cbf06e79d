"""Ranking metrics, latency benchmarking and the training-stage ablation."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from gref import tensor as T
from gref.data import SessionRecord, SimulatedCorpus, SimulatorConfig, replay_clicks, split_by_hash, stable_hash
from gref.decoding import ar_decode, item_inclusion_scores, omtp_decode
from gref.errors import InvalidArgumentError, UndefinedMetricError
from gref.model import GenRerankerModel, ModelConfig
from gref.training import TrainConfig, run_stage

log = logging.getLogger(__name__)

REPORT_FIELDS = ("dataset", "model", "seed", "auc", "ndcg", "mean_latency_us", "p99_latency_us", "forward_passes")


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s)
    return float((ranks[y].sum() - pos * (pos + 1) / 2) / (pos * neg))


def ndcg_at_k(ranked_relevances: Sequence[float], k: int) -> float:
    rel = np.asarray(ranked_relevances, dtype=np.float64)
    if not 1 <= k <= len(rel):
        raise InvalidArgumentError(f"k={k} outside [1, {len(rel)}]")
    if rel.sum() == 0:
        return 0.0
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    ideal = np.sort(rel)[::-1][:k] @ disc
    return float(rel[:k] @ disc / ideal)


@dataclasses.dataclass
class MetricReport:
    dataset: str
    model: str
    seed: int
    auc: float | None = None
    ndcg: float | None = None
    mean_latency_us: float | None = None
    p99_latency_us: float | None = None
    forward_passes: float | None = None

    def __post_init__(self):
        for name in ("auc", "ndcg"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise InvalidArgumentError(f"{name}={v} outside [0, 1]")

    def row(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.6f}"
            return str(v)
        return [fmt(getattr(self, f)) for f in REPORT_FIELDS]


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def reports_to_json(reports: Sequence[MetricReport]) -> str:
    return json.dumps([dataclasses.asdict(r) for r in reports], indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# offline evaluation
# ---------------------------------------------------------------------------

def _features(model: GenRerankerModel, records: Sequence[SessionRecord]) -> np.ndarray:
    return np.stack([r.features for r in records]).astype(model.params["input_proj.w"].dtype)


def exposure_auc(model: GenRerankerModel, records: Sequence[SessionRecord], chunk: int = 256) -> float:
    """Mean per-session AUC of inclusion scores against exposed membership."""
    vals = []
    for start in range(0, len(records), chunk):
        part = records[start:start + chunk]
        scores = item_inclusion_scores(model, _features(model, part))
        for rec, s in zip(part, scores):
            labels = np.zeros(len(rec.candidates), dtype=int)
            labels[rec.exposed_indices] = 1
            vals.append(auc(s, labels))
    return float(np.mean(vals))


def decode_slates(model: GenRerankerModel, records: Sequence[SessionRecord], mode: str = "omtp",
                  heads: int | None = None, chunk: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(records), chunk):
        feats = _features(model, records[start:start + chunk])
        res = ar_decode(model, feats) if mode == "ar" else omtp_decode(model, feats, heads)
        out.append(res.slates)
    return np.concatenate(out, axis=0)


def replay_ndcg(records: Sequence[SessionRecord], slates: np.ndarray, user_topics: np.ndarray,
                sim: SimulatorConfig, replays: int = 8, seed: int = 0) -> float:
    """NDCG@n of decoded slates under clicks replayed from the simulator.

    Replay randomness depends only on (seed, session, replay), so different
    models are compared under common random numbers.  Replays without any
    click are skipped.
    """
    n = slates.shape[1]
    feats = np.stack([r.features for r in records])
    vals = []
    for rep in range(replays):
        uni = np.stack([
            np.random.default_rng(stable_hash(seed, "replay", r.session_id, rep)).random(n)
            for r in records
        ])
        clicks = replay_clicks(user_topics, feats, slates, sim, uni)
        for row in clicks:
            if row.any():
                vals.append(ndcg_at_k(row, n))
    return float(np.mean(vals)) if vals else 0.0


def evaluate(model: GenRerankerModel, records: Sequence[SessionRecord], user_topics: np.ndarray | None,
             sim: SimulatorConfig | None, dataset: str = "synthetic", name: str = "gref", seed: int = 0,
             mode: str = "omtp", heads: int | None = None, replays: int = 8) -> MetricReport:
    a = exposure_auc(model, records)
    nd = None
    if user_topics is not None and sim is not None:
        slates = decode_slates(model, records, mode, heads)
        nd = replay_ndcg(records, slates, user_topics, sim, replays, seed)
    passes = model.config.slate_length if mode == "ar" else math.ceil(
        model.config.slate_length / (heads or model.config.omtp_heads))
    return MetricReport(dataset, name, seed, a, nd, forward_passes=float(passes))


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class LatencyStats:
    mode: str
    mean_us: float
    p50_us: float
    p99_us: float
    forward_passes: float
    samples: int


def latency_bench(model: GenRerankerModel, records: Sequence[SessionRecord], modes=("ar", "omtp"),
                  heads: int | None = None, warmup: int = 5, iters: int = 50) -> dict:
    """Single-sample wall-clock latency per decode mode.

    Modes are interleaved per iteration so drift affects them alike.  Returns
    {mode: LatencyStats} plus "ratio" (ar mean / omtp mean) when both ran.
    """
    if iters < 30:
        raise InvalidArgumentError("iters must be at least 30")
    if isinstance(modes, str):
        modes = (modes,)
    dtype = model.params["input_proj.w"].dtype
    feats = [r.features[None].astype(dtype) for r in records]
    times = {m: [] for m in modes}
    passes = {m: [] for m in modes}
    for it in range(warmup + iters):
        x = feats[it % len(feats)]
        for mode in modes:
            t0 = time.perf_counter_ns()
            res = ar_decode(model, x) if mode == "ar" else omtp_decode(model, x, heads)
            dt = (time.perf_counter_ns() - t0) / 1000.0
            if it >= warmup:
                times[mode].append(dt)
                passes[mode].append(res.forward_passes)
    out: dict = {}
    for mode in modes:
        t = np.asarray(times[mode])
        out[mode] = LatencyStats(mode, float(t.mean()), float(np.percentile(t, 50)),
                                 float(np.percentile(t, 99)), float(np.mean(passes[mode])), len(t))
    if "ar" in out and "omtp" in out:
        out["ratio"] = out["ar"].mean_us / out["omtp"].mean_us
    return out


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_CELLS = ("pretrain_only", "dpo_only", "pretrain_dpo", "ln_only_dpo")


@dataclasses.dataclass
class AblationTable:
    cells: dict  # (cell, seed) -> MetricReport
    seeds: list

    def wins(self, better: str, worse: str, metric: str, strict: bool = True) -> int:
        count = 0
        for s in self.seeds:
            a = getattr(self.cells[(better, s)], metric)
            b = getattr(self.cells[(worse, s)], metric)
            count += int(a > b if strict else a >= b)
        return count

    def to_csv(self) -> str:
        layout = {
            "pretrain_only": ("stages", 1, 0, "", ""),
            "dpo_only": ("stages", 0, 1, "", ""),
            "pretrain_dpo": ("stages+omtp", 1, 1, 1, 1),
            "ln_only_dpo": ("omtp", 1, 1, 1, 0),
        }
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "pretraining", "post_training", "l_n", "l_o", "seed", "auc", "ndcg"])
        for cell in ABLATION_CELLS:
            for s in self.seeds:
                r = self.cells[(cell, s)]
                w.writerow([*layout[cell], s, f"{r.auc:.6f}", f"{r.ndcg:.6f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        k = len(self.seeds)
        means = {
            cell: {m: float(np.mean([getattr(self.cells[(cell, s)], m) for s in self.seeds]))
                   for m in ("auc", "ndcg")}
            for cell in ABLATION_CELLS
        }
        return {
            "seeds": list(self.seeds),
            "means": means,
            "wins": {
                "pretrain_dpo_over_pretrain_only_ndcg": f"{self.wins('pretrain_dpo', 'pretrain_only', 'ndcg')}/{k}",
                "pretrain_dpo_over_dpo_only_auc": f"{self.wins('pretrain_dpo', 'dpo_only', 'auc')}/{k}",
                "ln_lo_over_ln_only_ndcg": f"{self.wins('pretrain_dpo', 'ln_only_dpo', 'ndcg', strict=False)}/{k}",
            },
        }


def ablation_defaults() -> tuple[ModelConfig, TrainConfig]:
    """Desk-sized model and schedule used for the ablation."""
    model = ModelConfig(d_model=32, encoder_layers=2, decoder_layers=2, attention_heads=4,
                        omtp_heads=4, max_candidates=30, slate_length=10, feature_dim=12, ffn_mult=2)
    train = TrainConfig(learning_rate=2e-3, dpo_learning_rate=3e-5, batch_size=64, beta_dpo=0.1,
                        pretrain_epochs=8, dpo_epochs=2)
    return model, train


def run_ablation(corpus: SimulatedCorpus, seeds: Sequence[int], model_config: ModelConfig | None = None,
                 train_config: TrainConfig | None = None, mode: str = "omtp", replays: int = 8,
                 valid_fraction: float = 0.2) -> AblationTable:
    """Train the four stage/loss configurations per seed and score them.

    pretrain_only: multi-head CE + order loss; pretrain_dpo: that model
    post-trained with preference pairs; dpo_only: preference training from a
    random init; ln_only_dpo: multi-head CE without order loss, then DPO.
    """
    base_model, base_train = ablation_defaults()
    model_config = model_config or dataclasses.replace(
        base_model, feature_dim=corpus.config.feature_dim, max_candidates=corpus.config.m,
        slate_length=corpus.config.n)
    train_config = train_config or base_train
    train, valid = split_by_hash(corpus.records, valid_fraction)
    users = corpus.latent_for([r.session_id for r in valid])
    cells = {}
    for seed in seeds:
        tc = dataclasses.replace(train_config, seed=seed)

        def score(model, name):
            rep = evaluate(model, valid, users, corpus.config, name=name, seed=seed, mode=mode, replays=replays)
            log.info("seed %s %s: auc %.4f ndcg %.4f", seed, name, rep.auc, rep.ndcg)
            return rep

        full = GenRerankerModel(model_config, seed=stable_hash(seed, "init") % 2**32)
        run_stage("pretrain", full, train, tc)
        cells[("pretrain_only", seed)] = score(full, "pretrain_only")
        run_stage("dpo", full, train, tc)
        cells[("pretrain_dpo", seed)] = score(full, "pretrain_dpo")

        scratch = GenRerankerModel(model_config, seed=stable_hash(seed, "init") % 2**32)
        run_stage("dpo", scratch, train, tc, allow_scratch=True)
        cells[("dpo_only", seed)] = score(scratch, "dpo_only")

        ln_only = GenRerankerModel(model_config, seed=stable_hash(seed, "init") % 2**32)
        run_stage("pretrain", ln_only, train, tc, lambda2=0.0)
        run_stage("dpo", ln_only, train, tc)
        cells[("ln_only_dpo", seed)] = score(ln_only, "ln_only_dpo")
    return AblationTable(cells, list(seeds))
