"""Losses, optimizer, the two training stages and checkpoint persistence."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
import struct
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from gref import tensor as T
from gref.data import PreferencePair, SessionRecord, build_preference_pair, stable_hash
from gref.errors import (ConfigError, InvalidBatchError, InvalidSequenceError, SchemaError,
                         UsageError)
from gref.model import EOS, GenRerankerModel, ModelConfig, sequence_log_prob
from gref.tensor import Tensor

log = logging.getLogger(__name__)

STAGES = ("pretrained", "dpo")


@dataclasses.dataclass
class TrainConfig:
    learning_rate: float = 5e-6
    dpo_learning_rate: float = 0.0  # 0 means: same as learning_rate
    batch_size: int = 64
    beta_dpo: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    order_pair_cap: int = 8
    grad_clip_norm: float = 1.0
    pretrain_epochs: int = 5
    dpo_epochs: int = 2
    pref_alpha: float = 1.0
    pref_gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.beta_dpo <= 0:
            raise ConfigError("learning_rate, batch_size and beta_dpo must be positive")
        if self.order_pair_cap < 1 or self.grad_clip_norm <= 0:
            raise ConfigError("order_pair_cap and grad_clip_norm must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.dpo_learning_rate < 0:
            raise ConfigError("lambda1, lambda2 and dpo_learning_rate must be non-negative")
        if self.pretrain_epochs < 0 or self.dpo_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Batch:
    """Teacher-forcing batch: features (B, m, d_in), targets/clicks (B, n)."""

    features: np.ndarray
    targets: np.ndarray
    clicks: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


@dataclasses.dataclass
class PairBatch:
    features: np.ndarray
    winners: np.ndarray
    losers: np.ndarray

    def __len__(self) -> int:
        return len(self.winners)


def make_batch(records: Sequence[SessionRecord]) -> Batch:
    feats = np.stack([r.features for r in records]).astype(T.get_default_dtype())
    targets = np.array([r.exposed_indices for r in records], dtype=np.int64)
    clicks = np.array([r.feedback for r in records], dtype=np.int64)
    return Batch(feats, targets, clicks)


def make_pair_batch(records: Sequence[SessionRecord], pairs: Sequence[PreferencePair]) -> PairBatch:
    feats, win, lose = [], [], []
    for rec, pair in zip(records, pairs):
        pos = {c.item_id: i for i, c in enumerate(rec.candidates)}
        feats.append(rec.features)
        win.append([pos[i] for i in pair.winner])
        lose.append([pos[i] for i in pair.loser])
    return PairBatch(np.stack(feats).astype(T.get_default_dtype()),
                     np.array(win, dtype=np.int64), np.array(lose, dtype=np.int64))


def _check_batch(model: GenRerankerModel, batch: Batch) -> None:
    m = model.config.max_candidates
    if batch.targets.size and (batch.targets.min() < 0 or batch.targets.max() >= m):
        raise InvalidBatchError("target sequence references an item outside the candidate set")
    if batch.targets.shape[1] != model.config.slate_length:
        raise InvalidBatchError(f"targets must have length {model.config.slate_length}")


# ---------------------------------------------------------------------------
# next-item and multi-head cross-entropy
# ---------------------------------------------------------------------------

def _log_probs(model: GenRerankerModel, batch: Batch, heads: int) -> Tensor:
    _check_batch(model, batch)
    logits = model.logits(batch.features, batch.targets + 1)[:, :, :heads, :]
    return T.log_softmax(logits, axis=-1)


def _head_terms(logp: Tensor, targets: np.ndarray, heads: int):
    """Per-(position, head) target log-probs and the validity mask.

    Returns picked (B, n+1, heads) and mask (n+1, heads); head i at decoder
    position p is supervised by target p+i (EOS at index n).
    """
    b, n = targets.shape
    full = np.concatenate([targets + 1, np.full((b, 1), EOS)], axis=1)  # (B, n+1)
    offs = np.arange(n + 1)[:, None] + np.arange(heads)[None, :]
    mask = offs <= n
    idx = full[:, np.minimum(offs, n)]  # (B, n+1, heads)
    picked = T.take_along(logp[:, :, :heads, :], idx[..., None], axis=-1)
    return T.reshape(picked, (b, n + 1, heads)), mask


def _reduce_terms(picked: Tensor, mask: np.ndarray, reduction: str) -> Tensor:
    b = picked.shape[0]
    masked = T.mul(picked, mask.astype(picked.dtype))
    total = T.tsum(masked, accumulate64=True)
    if reduction == "mean":
        return T.neg(total) * (1.0 / (b * int(mask.sum())))
    if reduction == "sum":
        return T.neg(total) * (1.0 / b)
    raise ConfigError(f"unknown reduction {reduction!r}")


def pretrain_loss_single_head(model: GenRerankerModel, batch: Batch, reduction: str = "mean") -> Tensor:
    """Next-item cross-entropy over [y_1..y_n, EOS] with head 0.

    ``reduction="sum"`` sums over steps and averages over the batch;
    ``"mean"`` additionally averages over steps.
    """
    picked, mask = _head_terms(_log_probs(model, batch, 1), batch.targets, 1)
    return _reduce_terms(picked, mask, reduction)


def omtp_ce_loss(model: GenRerankerModel, batch: Batch, reduction: str = "mean") -> Tensor:
    """Cross-entropy of every head against the item it looks ahead to.

    Head offsets running past EOS are dropped from the sum.
    """
    heads = model.config.omtp_heads
    picked, mask = _head_terms(_log_probs(model, batch, heads), batch.targets, heads)
    return _reduce_terms(picked, mask, reduction)


# ---------------------------------------------------------------------------
# order loss
# ---------------------------------------------------------------------------

def dcg(relevances: Sequence[float]) -> float:
    return float(sum(r / math.log2(j + 2) for j, r in enumerate(relevances)))


@lru_cache(maxsize=None)
def _ordered_pairs(rel: tuple) -> tuple:
    """All (better, worse) permutation pairs of a window by DCG of click labels."""
    perms = list(itertools.permutations(range(len(rel))))
    scores = [dcg([rel[i] for i in p]) for p in perms]
    out = []
    for a, pa in enumerate(perms):
        for bb, pb in enumerate(perms):
            if scores[a] > scores[bb] + 1e-12:
                out.append((pa, pb))
    return tuple(out)


def order_pairs(clicks: np.ndarray, heads: int, cap: int, rng: np.random.Generator):
    """Sampled (row, position, positive perm, negative perm) tuples for a batch.

    Decoder position p sees the window of targets p..p+heads-1 (0-based into
    the exposure); windows must fit inside the n items.
    """
    b, n = clicks.shape
    found = []
    for row in range(b):
        for p in range(n - heads + 1):
            window = tuple(int(u) for u in clicks[row, p:p + heads])
            if not any(window):
                continue
            pairs = _ordered_pairs(window)
            if len(pairs) > cap:
                pick = rng.choice(len(pairs), size=cap, replace=False)
                pick.sort()
                pairs = [pairs[i] for i in pick]
            for pos, neg in pairs:
                found.append((row, p, pos, neg))
    return found


def omtp_order_loss(model: GenRerankerModel, batch: Batch, cap: int = 8, seed: int = 0,
                    logp: Tensor | None = None) -> Tensor:
    """Pairwise -log sigmoid(P(Y+) - P(Y-)) over DCG-ranked window permutations.

    P(Y | ctx) sums head i's log-prob of the i-th item of Y at the window's
    decoder position.  Averaged over sampled pairs; 0 if no pair exists.
    """
    heads = model.config.omtp_heads
    if heads < 2:
        raise ConfigError("order loss needs at least two heads")
    _check_batch(model, batch)
    rng = np.random.default_rng(seed)
    pairs = order_pairs(batch.clicks, heads, cap, rng)
    if not pairs:
        return Tensor(np.float64(0.0))
    if logp is None:
        logp = _log_probs(model, batch, heads)
    rows = np.array([r for r, _, _, _ in pairs])
    pos = np.array([p for _, p, _, _ in pairs])
    perm_pos = np.array([pp for _, _, pp, _ in pairs])
    perm_neg = np.array([pn for _, _, _, pn in pairs])
    window = pos[:, None] + np.arange(heads)[None, :]
    items = batch.targets[rows[:, None], window] + 1  # (P, H) vocab ids in exposure order
    tok_pos = np.take_along_axis(items, perm_pos, axis=1)
    tok_neg = np.take_along_axis(items, perm_neg, axis=1)
    head_idx = np.arange(heads)[None, :]
    r, p = rows[:, None], pos[:, None]
    score_pos = T.tsum(logp[r, p, head_idx, tok_pos], axis=1)
    score_neg = T.tsum(logp[r, p, head_idx, tok_neg], axis=1)
    terms = T.log_sigmoid(score_pos - score_neg)
    return T.neg(T.mean(terms, accumulate64=True))


def omtp_loss(model: GenRerankerModel, batch: Batch, lambda1: float = 1.0, lambda2: float = 1.0,
              cap: int = 8, seed: int = 0) -> Tensor:
    """lambda1 * multi-head cross-entropy + lambda2 * order loss."""
    heads = model.config.omtp_heads
    logp = _log_probs(model, batch, heads)
    picked, mask = _head_terms(logp, batch.targets, heads)
    loss = _reduce_terms(picked, mask, "mean") * lambda1
    if lambda2 > 0:
        loss = loss + omtp_order_loss(model, batch, cap, seed, logp=logp) * lambda2
    return loss


# ---------------------------------------------------------------------------
# preference loss
# ---------------------------------------------------------------------------

def pair_log_probs(model: GenRerankerModel, batch: PairBatch) -> tuple[Tensor, Tensor]:
    b = len(batch)
    seqs = np.concatenate([batch.winners, batch.losers], axis=0)
    feats = np.concatenate([batch.features, batch.features], axis=0)
    lp = sequence_log_prob(model, seqs, feats)
    return lp[:b], lp[b:]


def dpo_loss(policy: GenRerankerModel, reference: GenRerankerModel, batch: PairBatch,
             beta: float = 0.1) -> Tensor:
    """Mean -log sigmoid(beta * (policy/reference log-ratio margin of winner over loser))."""
    if np.any(np.all(batch.winners == batch.losers, axis=1)):
        raise InvalidSequenceError("preference pair with identical winner and loser")
    with T.no_grad():
        ref_w, ref_l = pair_log_probs(reference, batch)
    pol_w, pol_l = pair_log_probs(policy, batch)
    margin = (pol_w - ref_w.data) - (pol_l - ref_l.data)
    return T.neg(T.mean(T.log_sigmoid(margin * beta), accumulate64=True))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class AdamState:
    step: int = 0
    m: dict = dataclasses.field(default_factory=dict)
    v: dict = dataclasses.field(default_factory=dict)
    anomalies: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}
    return grads, norm


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, clip_norm: float | None = 1.0) -> bool:
    """One bias-corrected Adam update after global-norm clipping.

    Parameters without a gradient are left alone.  Returns False (and counts
    an anomaly) if any gradient is non-finite; nothing is updated then.
    """
    grads = {k: g for k, g in grads.items() if g is not None}
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        state.anomalies += 1
        log.warning("non-finite gradient; step skipped (anomalies=%d)", state.anomalies)
        return False
    if clip_norm is not None:
        grads, _ = clip_by_global_norm(grads, clip_norm)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return True


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"GREF"
FORMAT_VERSION = 1


@dataclasses.dataclass
class Checkpoint:
    model: GenRerankerModel
    stage: str
    optimizer: AdamState
    epoch: int = 0


def save_checkpoint(path, model: GenRerankerModel, stage: str, optimizer: AdamState | None = None,
                    epoch: int = 0) -> None:
    """Binary layout: magic, u32 version, u32-length JSON header, u32 entry count,
    manifest of (name, shape, offset) entries, then little-endian float32 data."""
    if stage not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}")
    optimizer = optimizer or AdamState()
    header = {
        "model_config": model.config.to_dict(),
        "stage": stage,
        "epoch": epoch,
        "optimizer": {"step": optimizer.step, "anomalies": optimizer.anomalies,
                      "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps},
    }
    tensors = [(name, p.data) for name, p in model.params.items()]
    for name in model.params:
        if name in optimizer.m:
            tensors.append((f"adam.m/{name}", optimizer.m[name]))
            tensors.append((f"adam.v/{name}", optimizer.v[name]))
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    manifest = bytearray()
    blobs = []
    offset = 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        nb = name.encode()
        manifest += struct.pack("<I", len(nb)) + nb
        manifest += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        manifest += struct.pack("<Q", offset)
        blobs.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(tensors)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise SchemaError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12:12 + hlen])
    pos = 12 + hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        entries.append((name, shape, offset))
    arrays = {}
    for name, shape, offset in entries:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos + offset).reshape(shape)
        arrays[name] = arr.astype(np.float32)

    with T.default_dtype(np.float32):
        model = GenRerankerModel(ModelConfig.from_dict(header["model_config"]), seed=0)
    for name, p in model.params.items():
        if name not in arrays:
            raise SchemaError(f"{path}: missing tensor {name}")
        if arrays[name].shape != p.data.shape:
            raise SchemaError(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].copy()
    opt_meta = header.get("optimizer", {})
    opt = AdamState(step=opt_meta.get("step", 0), anomalies=opt_meta.get("anomalies", 0),
                    beta1=opt_meta.get("beta1", 0.9), beta2=opt_meta.get("beta2", 0.999),
                    eps=opt_meta.get("eps", 1e-8))
    for name in model.params:
        if f"adam.m/{name}" in arrays:
            opt.m[name] = arrays[f"adam.m/{name}"].copy()
            opt.v[name] = arrays[f"adam.v/{name}"].copy()
    model.stage = header["stage"]
    return Checkpoint(model, header["stage"], opt, header.get("epoch", 0))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class StageResult:
    model: GenRerankerModel
    optimizer: AdamState
    curve: list[tuple[int, str, float]]
    stage: str
    epoch: int


def _epoch_batches(n_items: int, batch_size: int, seed: int, stage: str, epoch: int):
    rng = np.random.default_rng(stable_hash(seed, stage, "shuffle", epoch))
    order = rng.permutation(n_items)
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]


def run_stage(stage: str, model: GenRerankerModel, records: Sequence[SessionRecord], config: TrainConfig,
              reference: GenRerankerModel | None = None, optimizer: AdamState | None = None,
              start_epoch: int = 0, epochs: int | None = None, allow_scratch: bool = False,
              lambda2: float | None = None, checkpoint_path=None) -> StageResult:
    """Train one stage in place.

    ``stage`` is "pretrain" or "dpo".  The dpo stage needs a pretrained
    model (``model.stage == "pretrained"``) unless ``allow_scratch``; its
    frozen reference is cloned from ``model`` at stage start unless passed
    explicitly (for resumed runs).
    """
    if stage not in ("pretrain", "dpo"):
        raise UsageError(f"unknown stage {stage!r}")
    optimizer = optimizer or AdamState()
    curve: list[tuple[int, str, float]] = []
    total = epochs if epochs is not None else (config.pretrain_epochs if stage == "pretrain" else config.dpo_epochs)
    lam2 = config.lambda2 if lambda2 is None else lambda2
    if model.config.omtp_heads == 1:
        lam2 = 0.0

    if stage == "dpo":
        if getattr(model, "stage", None) not in STAGES and not allow_scratch:
            raise UsageError("dpo stage needs a pretrained checkpoint (or allow_scratch)")
        if reference is None:
            reference = model.clone().freeze()
        usable = []
        for r in records:
            pair = build_preference_pair(r, config.pref_alpha, config.pref_gamma)
            if pair is not None:
                usable.append((r, pair))
        lr = config.dpo_learning_rate or config.learning_rate
        items = usable
        tag = "dpo"
    else:
        items = list(records)
        lr = config.learning_rate
        tag = "pretrain"

    for epoch in range(start_epoch, total):
        first = len(curve)
        for batch_idx in _epoch_batches(len(items), config.batch_size, config.seed, tag, epoch):
            chosen = [items[i] for i in batch_idx]
            model.zero_grad()
            if stage == "pretrain":
                batch = make_batch(chosen)
                loss = omtp_loss(model, batch, config.lambda1, lam2, config.order_pair_cap,
                                 seed=stable_hash(config.seed, tag, "pairs", optimizer.step))
            else:
                pb = make_pair_batch([r for r, _ in chosen], [p for _, p in chosen])
                loss = dpo_loss(model, reference, pb, config.beta_dpo)
            loss.backward()
            grads = {k: p.grad for k, p in model.params.items()}
            adam_step(model.params, grads, optimizer, lr, config.grad_clip_norm)
            curve.append((optimizer.step, tag, float(loss.data)))
        if len(curve) > first:
            log.info("%s epoch %d: mean loss %.5f", tag, epoch, np.mean([c[2] for c in curve[first:]]))
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, "pretrained" if stage == "pretrain" else "dpo",
                            optimizer, epoch + 1)
    model.zero_grad()
    model.stage = "pretrained" if stage == "pretrain" else "dpo"
    return StageResult(model, optimizer, curve, model.stage, total)


def write_loss_curve(path, curve: Sequence[tuple[int, str, float]], append: bool = False) -> None:
    exists = Path(path).exists() and append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not exists:
            w.writerow(["step", "stage", "loss"])
        for step, stage, loss in curve:
            w.writerow([step, stage, repr(float(loss))])
