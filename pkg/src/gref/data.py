"""Session records, JSONL ingestion, the synthetic click simulator, and the
construction of pre-training targets and preference pairs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from gref.errors import ConfigError, InvalidArgumentError, ParseError, SchemaError

log = logging.getLogger(__name__)

#: unknown JSONL fields seen by load_sessions
unknown_field_count = 0

BOS_TOKEN = "[BOS]"
EOS_TOKEN = "[EOS]"


@dataclasses.dataclass
class Candidate:
    item_id: str
    features: list[float]


@dataclasses.dataclass
class SessionRecord:
    session_id: str
    candidates: list[Candidate]
    exposed: list[str]
    feedback: list[int]

    def validate(self, m: int | None = None, n: int | None = None,
                 d_in: int | None = None) -> "SessionRecord":
        ids = [c.item_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"session {self.session_id}: duplicate candidate item_id")
        if len(set(self.exposed)) != len(self.exposed):
            raise SchemaError(f"session {self.session_id}: duplicate exposed item_id")
        known = set(ids)
        for item in self.exposed:
            if item not in known:
                raise SchemaError(f"session {self.session_id}: exposed item {item!r} not among candidates")
        if len(self.feedback) != len(self.exposed):
            raise SchemaError(f"session {self.session_id}: feedback length differs from exposed length")
        if any(u not in (0, 1) for u in self.feedback):
            raise SchemaError(f"session {self.session_id}: feedback must be 0/1")
        if m is not None and len(self.candidates) != m:
            raise SchemaError(f"session {self.session_id}: expected {m} candidates, got {len(self.candidates)}")
        if n is not None and len(self.exposed) != n:
            raise SchemaError(f"session {self.session_id}: expected {n} exposed items, got {len(self.exposed)}")
        widths = {len(c.features) for c in self.candidates}
        if len(widths) > 1:
            raise SchemaError(f"session {self.session_id}: ragged feature widths {sorted(widths)}")
        if d_in is not None and widths and widths != {d_in}:
            raise SchemaError(f"session {self.session_id}: feature width {widths.pop()} != {d_in}")
        return self

    @property
    def features(self) -> np.ndarray:
        return np.array([c.features for c in self.candidates], dtype=np.float64)

    @property
    def exposed_indices(self) -> list[int]:
        """Candidate positions (0-based) of the exposed items, in exposure order."""
        pos = {c.item_id: i for i, c in enumerate(self.candidates)}
        return [pos[i] for i in self.exposed]

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "candidates": [{"item_id": c.item_id, "features": list(c.features)} for c in self.candidates],
            "exposed": list(self.exposed),
            "feedback": list(self.feedback),
        }


@dataclasses.dataclass
class PreferencePair:
    winner: list[str]
    loser: list[str]

    def __post_init__(self):
        if sorted(self.winner) != sorted(self.loser):
            raise SchemaError("preference pair sequences must cover the same items")
        if self.winner == self.loser:
            raise SchemaError("preference pair sequences must differ")


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

_FIELDS = {"session_id", "candidates", "exposed", "feedback"}


def parse_session(obj: dict, line: int | None = None) -> SessionRecord:
    global unknown_field_count
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", line)
    missing = _FIELDS - set(obj)
    if missing:
        raise SchemaError(f"line {line}: missing fields {sorted(missing)}")
    extra = set(obj) - _FIELDS
    if extra:
        unknown_field_count += len(extra)
        log.warning("line %s: ignoring unknown fields %s", line, sorted(extra))
    try:
        cands = [Candidate(str(c["item_id"]), [float(v) for v in c["features"]]) for c in obj["candidates"]]
        rec = SessionRecord(
            session_id=str(obj["session_id"]),
            candidates=cands,
            exposed=[str(i) for i in obj["exposed"]],
            feedback=[int(u) for u in obj["feedback"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"line {line}: {exc}") from exc
    return rec


def load_sessions(path, m: int | None = None, n: int | None = None) -> Iterator[SessionRecord]:
    """Stream validated records from a JSON-Lines file (blank lines skipped)."""
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", lineno) from exc
            rec = parse_session(obj, lineno)
            try:
                rec.validate(m, n)
            except SchemaError as exc:
                raise SchemaError(f"line {lineno}: {exc}") from exc
            yield rec


def dump_sessions(records: Iterable[SessionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# synthetic sessions
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class SimulatorConfig:
    seed: int = 0
    num_sessions: int = 2000
    m: int = 30
    n: int = 10
    num_topics: int = 8
    topic_coherence: float = 0.3
    exposure_noise: float = 0.5
    # weights of the latent click model (the production policy sees a distorted mix)
    click_bias: float = -3.0
    click_affinity: float = 0.5
    click_quality: float = 1.0
    position_decay: float = 0.15
    policy_popularity: float = 2.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n > self.m:
            raise ConfigError(f"slate length n={self.n} exceeds candidate count m={self.m}")
        if self.n < 1 or self.num_sessions < 0 or self.num_topics < 1:
            raise ConfigError("n, num_topics must be positive and num_sessions non-negative")
        if not 0.0 <= self.topic_coherence <= 1.0:
            raise ConfigError("topic_coherence must lie in [0, 1]")
        if self.exposure_noise < 0 or self.position_decay < 0:
            raise ConfigError("exposure_noise and position_decay must be non-negative")

    @property
    def feature_dim(self) -> int:
        return self.num_topics + 4


@dataclasses.dataclass
class SimulatedCorpus:
    """Records plus the latent user preferences needed to replay clicks."""

    config: SimulatorConfig
    records: list[SessionRecord]
    user_topics: np.ndarray  # (S, K)

    def latent_for(self, session_ids: list[str]) -> np.ndarray:
        index = {r.session_id: i for i, r in enumerate(self.records)}
        return self.user_topics[[index[s] for s in session_ids]]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def item_affinity(user_topics: np.ndarray, features: np.ndarray, cfg: SimulatorConfig) -> np.ndarray:
    """Click logit of every candidate (before position and coherence effects)."""
    k = cfg.num_topics
    topics = features[..., :k]
    quality = features[..., k]
    match = np.einsum("...k,...mk->...m", user_topics, topics)
    return cfg.click_bias + cfg.click_affinity * k * match + cfg.click_quality * quality


def base_click_probabilities(user_topics, features, slate, cfg: SimulatorConfig) -> np.ndarray:
    """Click probability per slate slot ignoring coherence: (S, n)."""
    logits = item_affinity(user_topics, features, cfg)
    rows = np.arange(len(slate))[:, None]
    exam = 1.0 / (1.0 + cfg.position_decay * np.arange(slate.shape[1]))
    return _sigmoid(logits[rows, slate]) * exam


def replay_clicks(user_topics, features, slate, cfg: SimulatorConfig, uniforms: np.ndarray) -> np.ndarray:
    """Sample clicks on given slates with the first-order causal click model.

    ``slate`` is (S, n) candidate indices; ``uniforms`` is (S, n) in [0, 1) so
    callers can share random numbers across compared slates.
    """
    slate = np.asarray(slate)
    base = base_click_probabilities(user_topics, features, slate, cfg)
    k = cfg.num_topics
    rows = np.arange(len(slate))
    topics = features[..., :k]
    unit = topics / np.linalg.norm(topics, axis=-1, keepdims=True)
    clicks = np.zeros(slate.shape, dtype=np.int64)
    for j in range(slate.shape[1]):
        p = base[:, j]
        if j > 0 and cfg.topic_coherence > 0:
            sim = np.einsum("sk,sk->s", unit[rows, slate[:, j - 1]], unit[rows, slate[:, j]])
            p = np.clip(p + cfg.topic_coherence * sim * clicks[:, j - 1], 0.0, 1.0)
        clicks[:, j] = uniforms[:, j] < p
    return clicks


def simulate_sessions(config: SimulatorConfig) -> SimulatedCorpus:
    """Draw a synthetic corpus; a pure function of ``config``.

    Each user has a topic preference; candidates are retrieved around it, so
    the candidate set itself carries the user's taste.  The production policy
    orders by a mix of true affinity and popularity and exposes the top n.
    Clicks follow a position-discounted model with a boost for following a
    clicked, topically similar item.
    """
    cfg = config
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    s, m, n, k = cfg.num_sessions, cfg.m, cfg.n, cfg.num_topics

    user = np.round(rng.dirichlet(np.full(k, 0.5), size=s), 9)
    dominant = np.array([rng.choice(k, size=m, p=u) for u in user]).reshape(s, m) if s else np.zeros((0, m), int)
    mix = rng.dirichlet(np.full(k, 0.3), size=(s, m)) if s else np.zeros((0, m, k))
    topics = 0.6 * np.eye(k)[dominant] + 0.4 * mix
    quality = rng.normal(size=(s, m))
    popularity = rng.normal(size=(s, m))
    noise = rng.normal(size=(s, m, 2))
    features = np.concatenate([topics, quality[..., None], popularity[..., None], noise], axis=-1)

    # previous stage: popularity-heavy ranking decides candidate order
    prerank = popularity + 0.5 * quality + rng.normal(size=(s, m))
    order = np.argsort(-prerank, axis=1, kind="stable")
    features = np.take_along_axis(features, order[..., None], axis=1)
    features = np.round(features, 6)

    affinity = item_affinity(user, features, cfg)
    policy = affinity + cfg.policy_popularity * features[..., k + 1]
    if cfg.exposure_noise > 0:
        policy = policy + cfg.exposure_noise * rng.gumbel(size=(s, m))
    slate = np.argsort(-policy, axis=1, kind="stable")[:, :n]
    clicks = replay_clicks(user, features, slate, cfg, rng.random(size=(s, n)))

    records = []
    for i in range(s):
        sid = f"s{cfg.seed}-{i:06d}"
        cands = [Candidate(f"{sid}-i{j:02d}", features[i, j].tolist()) for j in range(m)]
        records.append(SessionRecord(
            session_id=sid,
            candidates=cands,
            exposed=[cands[j].item_id for j in slate[i]],
            feedback=clicks[i].tolist(),
        ))
    return SimulatedCorpus(cfg, records, user)


# ---------------------------------------------------------------------------
# training examples
# ---------------------------------------------------------------------------

def personalization_score(position: int, feedback: int, alpha: float = 1.0, gamma: float = 1.0) -> float:
    """alpha / position + gamma * feedback, position counted from 1."""
    if position < 1:
        raise InvalidArgumentError(f"position must be >= 1, got {position}")
    return alpha * (1.0 / position) + gamma * feedback


def build_preference_pair(record: SessionRecord, alpha: float = 1.0, gamma: float = 1.0) -> PreferencePair | None:
    """Winner = exposure re-sorted by personalization score; loser = exposure."""
    scores = [personalization_score(p, u, alpha, gamma)
              for p, u in enumerate(record.feedback, start=1)]
    # sorted() is stable, so ties keep exposure order
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    winner = [record.exposed[i] for i in order]
    if winner == record.exposed:
        return None
    return PreferencePair(winner=winner, loser=list(record.exposed))


def build_pretrain_example(record: SessionRecord) -> tuple[list[Candidate], list[str]]:
    """(candidates in previous-stage order, [BOS, exposed..., EOS])."""
    return list(record.candidates), [BOS_TOKEN, *record.exposed, EOS_TOKEN]


def stable_hash(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def split_by_hash(records: list[SessionRecord], valid_fraction: float = 0.2, salt: str = "split"):
    train, valid = [], []
    for r in records:
        bucket = stable_hash(salt, r.session_id) % 1000
        (valid if bucket < valid_fraction * 1000 else train).append(r)
    return train, valid


def load_latents(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {k: np.asarray(v, dtype=np.float64) for k, v in raw.items()}


def dump_latents(corpus: SimulatedCorpus, path) -> None:
    payload = {r.session_id: np.round(u, 9).tolist() for r, u in zip(corpus.records, corpus.user_topics)}
    Path(path).write_text(json.dumps(payload, separators=(",", ":"), sort_keys=True) + "\n", encoding="utf-8")
