"""Greedy slate generation: single-head autoregressive and multi-head parallel."""

from __future__ import annotations

import dataclasses
import json
import time

import numpy as np

from gref import tensor as T
from gref.errors import ConfigError
from gref.model import EOS, NEG_INF, GenRerankerModel


@dataclasses.dataclass
class DecodeState:
    """Per-request decoding state; ``mask`` marks excluded vocabulary rows (EOS at 0)."""

    chosen: list[int]
    mask: np.ndarray
    step_count: int = 0

    @classmethod
    def start(cls, m: int) -> "DecodeState":
        mask = np.zeros(m + 1, dtype=bool)
        mask[EOS] = True
        return cls([], mask, 0)

    def choose(self, token: int) -> None:
        self.chosen.append(token)
        self.mask[token] = True


@dataclasses.dataclass
class DecodeResult:
    slates: np.ndarray          # (B, n) candidate indices
    forward_passes: int
    step_probs: np.ndarray | None = None  # (B, passes, H, m+1) pre-mask, when requested

    @property
    def slate(self) -> list[int]:
        return self.slates[0].tolist()


def _as_batch(features) -> tuple[np.ndarray, bool]:
    x = np.asarray(features)
    return (x[None], True) if x.ndim == 2 else (x, False)


def _greedy(model: GenRerankerModel, features, heads: int, keep_probs: bool = False) -> DecodeResult:
    c = model.config
    x, _ = _as_batch(features)
    n, m = c.slate_length, x.shape[1]
    if m < n:
        raise ConfigError(f"need at least n={n} candidates, got {m}")
    if not 1 <= heads <= min(n, c.omtp_heads):
        raise ConfigError(f"heads must lie in [1, {min(n, c.omtp_heads)}], got {heads}")
    b = x.shape[0]
    states = [DecodeState.start(m) for _ in range(b)]
    mask = np.stack([s.mask for s in states])
    chosen = np.zeros((b, 0), dtype=np.int64)
    kept = []
    passes = 0
    rows = np.arange(b)
    with T.no_grad():
        projected = model.project(x)
        z = model.encode(None, projected=projected)
        while chosen.shape[1] < n:
            logits = model.logits_from(projected, z, chosen)[:, -1]  # (B, H_model, m+1)
            passes += 1
            if keep_probs:
                kept.append(T.softmax(logits[:, :heads], axis=-1).data)
            for i in range(min(heads, n - chosen.shape[1])):
                scores = np.where(mask, NEG_INF, logits.data[:, i])
                pick = scores.argmax(axis=1)
                mask[rows, pick] = True
                chosen = np.concatenate([chosen, pick[:, None]], axis=1)
    probs = np.stack(kept, axis=1) if keep_probs else None
    return DecodeResult(chosen - 1, passes, probs)


def ar_decode(model: GenRerankerModel, features, keep_probs: bool = False) -> DecodeResult:
    """Next-item greedy decoding with head 0: one decoder pass per item."""
    return _greedy(model, features, 1, keep_probs)


def omtp_decode(model: GenRerankerModel, features, heads: int | None = None) -> DecodeResult:
    """Parallel greedy decoding: each pass places up to ``heads`` items.

    Heads resolve in ascending order, each excluding everything chosen so far
    (including by lower heads of the same pass), so the slate stays
    duplicate-free.  Pass count is ceil(n / heads).
    """
    return _greedy(model, features, model.config.omtp_heads if heads is None else heads)


def item_inclusion_scores(model: GenRerankerModel, features) -> np.ndarray:
    """Sum over the n greedy steps of each candidate's pre-mask probability.

    Returns (m,) for one session or (B, m) for a batch; values in [0, n].
    """
    x, single = _as_batch(features)
    res = ar_decode(model, x, keep_probs=True)
    scores = res.step_probs[:, :, 0, 1:].sum(axis=1)
    return scores[0] if single else scores


def decode_records(model: GenRerankerModel, records, mode: str, heads: int | None = None,
                   timed: bool = True) -> list[dict]:
    """Decode each record alone (batch size 1) into output-record dicts."""
    out = []
    for rec in records:
        feats = rec.features[None].astype(model.params["input_proj.w"].dtype)
        t0 = time.perf_counter_ns()
        res = ar_decode(model, feats) if mode == "ar" else omtp_decode(model, feats, heads)
        elapsed = (time.perf_counter_ns() - t0) // 1000
        out.append({
            "session_id": rec.session_id,
            "slate": [rec.candidates[i].item_id for i in res.slate],
            "mode": mode,
            "forward_passes": res.forward_passes,
            "latency_us": int(elapsed) if timed else 0,
        })
    return out


def write_decode_records(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
