"""Encoder/decoder reranker with a per-session output vocabulary.

Vocabulary convention used throughout the package: index 0 is the EOS
embedding, indices 1..m are the m candidates in previous-stage rank order.
BOS is never a vocabulary entry; it only exists as the first decoder input.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from collections import OrderedDict

import numpy as np

from gref import tensor as T
from gref.errors import ConfigError, InvalidSequenceError, InvalidStateError, SchemaError
from gref.tensor import Tensor

EOS = 0
NEG_INF = -1e9


@dataclasses.dataclass
class ModelConfig:
    d_model: int = 64
    encoder_layers: int = 4
    decoder_layers: int = 4
    attention_heads: int = 4
    omtp_heads: int = 4
    max_candidates: int = 30
    slate_length: int = 10
    feature_dim: int = 12
    ffn_mult: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if min(self.d_model, self.attention_heads, self.feature_dim, self.ffn_mult) < 1:
            raise ConfigError("model sizes must be positive")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.d_model % self.attention_heads:
            raise ConfigError("d_model must be divisible by attention_heads")
        if not 1 <= self.omtp_heads <= self.slate_length:
            raise ConfigError("need 1 <= omtp_heads <= slate_length")
        if self.slate_length > self.max_candidates:
            raise ConfigError("slate_length must not exceed max_candidates")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class GenRerankerModel:
    """Bidirectional candidate encoder plus causal decoder with H output heads.

    Parameters live in ``self.params`` (an ordered name -> Tensor mapping) so
    that the optimizer and the checkpoint format can treat them uniformly.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        # training-stage tag: None, "pretrained" or "dpo"
        self.stage: str | None = None
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    # -- parameters -----------------------------------------------------------
    def _add(self, name: str, shape, rng, kind: str = "uniform") -> None:
        dtype = T.get_default_dtype()
        if kind == "zeros":
            data = np.zeros(shape, dtype=dtype)
        elif kind == "ones":
            data = np.ones(shape, dtype=dtype)
        else:
            s = 1.0 / math.sqrt(self.config.d_model)
            data = rng.uniform(-s, s, size=shape).astype(dtype)
        self.params[name] = T.parameter(data, name=name)

    def _add_linear(self, prefix: str, d_in: int, d_out: int, rng, bias: bool = True) -> None:
        self._add(f"{prefix}.w", (d_in, d_out), rng)
        if bias:
            self._add(f"{prefix}.b", (d_out,), rng, "zeros")

    def _add_norm(self, prefix: str, rng) -> None:
        d = self.config.d_model
        self._add(f"{prefix}.g", (d,), rng, "ones")
        self._add(f"{prefix}.b", (d,), rng, "zeros")

    def _add_attention(self, prefix: str, rng) -> None:
        d = self.config.d_model
        # no key bias: it shifts every score of a query equally, so softmax ignores it
        for proj in ("q", "k", "v", "o"):
            self._add_linear(f"{prefix}.{proj}", d, d, rng, bias=proj != "k")

    def _init_params(self, rng) -> None:
        c = self.config
        d = c.d_model
        self._add_linear("input_proj", c.feature_dim, d, rng)
        self._add("enc_pos", (c.max_candidates, d), rng)
        for i in range(c.encoder_layers):
            p = f"enc.{i}"
            self._add_norm(f"{p}.ln1", rng)
            self._add_attention(f"{p}.attn", rng)
            self._add_norm(f"{p}.ln2", rng)
            self._add_linear(f"{p}.ff1", d, c.ffn_mult * d, rng)
            self._add_linear(f"{p}.ff2", c.ffn_mult * d, d, rng)
        self._add("dec_pos", (c.slate_length + 1, d), rng)
        self._add("bos", (d,), rng)
        self._add("eos", (d,), rng)
        for i in range(c.decoder_layers):
            p = f"dec.{i}"
            self._add_norm(f"{p}.ln1", rng)
            self._add_attention(f"{p}.self", rng)
            self._add_norm(f"{p}.ln2", rng)
            self._add_attention(f"{p}.cross", rng)
            self._add_norm(f"{p}.ln3", rng)
            self._add_linear(f"{p}.ff1", d, c.ffn_mult * d, rng)
            self._add_linear(f"{p}.ff2", c.ffn_mult * d, d, rng)
        self._add_norm("dec.ln_f", rng)
        # the H heads are stored side by side: (d, H*d)
        self._add_linear("heads", d, c.omtp_heads * d, rng)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "GenRerankerModel":
        twin = copy.copy(self)
        twin.config = copy.deepcopy(self.config)
        twin.params = OrderedDict(
            (k, T.parameter(v.data.copy(), name=k)) for k, v in self.params.items()
        )
        return twin

    def freeze(self) -> "GenRerankerModel":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def astype(self, dtype) -> "GenRerankerModel":
        twin = self.clone()
        for k, v in twin.params.items():
            v.data = v.data.astype(dtype)
        return twin

    def zero_heads(self) -> "GenRerankerModel":
        """Zero the head projections so every head outputs h = 0 (uniform)."""
        self.params["heads.w"].data[...] = 0
        self.params["heads.b"].data[...] = 0
        return self

    # -- building blocks ------------------------------------------------------
    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        y = T.matmul(x, self.params[f"{prefix}.w"])
        bias = self.params.get(f"{prefix}.b")
        return y if bias is None else y + bias

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _split(self, x: Tensor) -> Tensor:
        b, l, d = x.shape
        h = self.config.attention_heads
        return T.transpose(T.reshape(x, (b, l, h, d // h)), (0, 2, 1, 3))

    def _attention(self, x: Tensor, ctx: Tensor, prefix: str, causal: bool) -> Tensor:
        b, lq, d = x.shape
        lk = ctx.shape[1]
        q = self._split(self._linear(x, f"{prefix}.q"))
        k = self._split(self._linear(ctx, f"{prefix}.k"))
        v = self._split(self._linear(ctx, f"{prefix}.v"))
        dh = d // self.config.attention_heads
        scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dh))
        if causal:
            future = np.triu(np.ones((lq, lk), dtype=bool), k=1)
            scores = T.masked_fill(scores, future, NEG_INF)
        att = T.softmax(scores, axis=-1)
        out = T.matmul(att, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, lq, d))
        return self._linear(out, f"{prefix}.o")

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        return self._linear(T.gelu(self._linear(x, f"{prefix}1")), f"{prefix}2")

    # -- public forward pieces -------------------------------------------------
    def _check_features(self, features) -> np.ndarray:
        x = np.asarray(features.data if isinstance(features, Tensor) else features)
        c = self.config
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != c.feature_dim:
            raise SchemaError(f"expected candidate features of width {c.feature_dim}, got shape {x.shape}")
        if x.shape[1] != c.max_candidates:
            raise SchemaError(f"expected {c.max_candidates} candidates, got {x.shape[1]}")
        return x.astype(self.params["input_proj.w"].dtype, copy=False)

    def project(self, features) -> Tensor:
        """Shared item-feature projection used by encoder and decoder inputs."""
        return self._linear(Tensor(self._check_features(features)), "input_proj")

    def encode(self, features, projected: Tensor | None = None) -> Tensor:
        """Candidate embeddings Z of shape (B, m, d_model); accepts (m, d_in) or (B, m, d_in)."""
        x = projected if projected is not None else self.project(features)
        h = x + self.params["enc_pos"]
        for i in range(self.config.encoder_layers):
            p = f"enc.{i}"
            hn = self._norm(h, f"{p}.ln1")
            h = h + self._attention(hn, hn, f"{p}.attn", causal=False)
            h = h + self._ffn(self._norm(h, f"{p}.ln2"), f"{p}.ff")
        return h

    def vocabulary(self, z: Tensor) -> Tensor:
        """Prepend the EOS row: (B, m, d) -> (B, m+1, d)."""
        b, _, d = z.shape
        eos = T.broadcast_to(T.reshape(self.params["eos"], (1, 1, d)), (b, 1, d))
        return T.concat([eos, z], axis=1)

    def decoder_hidden(self, projected: Tensor, z: Tensor, prefix: np.ndarray) -> Tensor:
        """Final decoder states for inputs [BOS, prefix...]; prefix holds vocab ids 1..m."""
        prefix = np.asarray(prefix, dtype=np.int64)
        b = projected.shape[0]
        if prefix.ndim == 1:
            prefix = np.broadcast_to(prefix, (b, prefix.shape[0]))
        if prefix.size and prefix.min() < 1:
            raise InvalidStateError("decoder prefix may not contain EOS")
        if prefix.size and prefix.max() > self.config.max_candidates:
            raise InvalidSequenceError("decoder prefix references a non-candidate")
        length = prefix.shape[1] + 1
        if length > self.config.slate_length + 1:
            raise InvalidStateError(f"prefix longer than slate length {self.config.slate_length}")
        d = self.config.d_model
        bos = T.broadcast_to(T.reshape(self.params["bos"], (1, 1, d)), (b, 1, d))
        parts = [bos]
        if prefix.shape[1]:
            parts.append(T.gather_rows(projected, prefix - 1))
        h = T.concat(parts, axis=1) if len(parts) > 1 else bos
        h = h + self.params["dec_pos"][:length]
        for i in range(self.config.decoder_layers):
            p = f"dec.{i}"
            hn = self._norm(h, f"{p}.ln1")
            h = h + self._attention(hn, hn, f"{p}.self", causal=True)
            h = h + self._attention(self._norm(h, f"{p}.ln2"), z, f"{p}.cross", causal=False)
            h = h + self._ffn(self._norm(h, f"{p}.ln3"), f"{p}.ff")
        return self._norm(h, "dec.ln_f")

    def head_states(self, hidden: Tensor) -> Tensor:
        """(B, L, d) -> (B, L, H, d): one linear projection per head."""
        b, l, d = hidden.shape
        return T.reshape(self._linear(hidden, "heads"), (b, l, self.config.omtp_heads, d))

    def logits(self, features, prefix) -> Tensor:
        """Head logits over the dynamic vocabulary, shape (B, L, H, m+1).

        Position t (0 = BOS) of head i scores the item i+1 slots after the
        input at position t.
        """
        x = self.project(features)
        z = self.encode(None, projected=x)
        return self.logits_from(x, z, prefix)

    def logits_from(self, projected: Tensor, z: Tensor, prefix) -> Tensor:
        hidden = self.decoder_hidden(projected, z, prefix)
        heads = self.head_states(hidden)
        b, l, h, d = heads.shape
        vocab = self.vocabulary(z)
        flat = T.reshape(heads, (b, l * h, d))
        scores = T.matmul(flat, T.swap_last(vocab))
        return T.reshape(scores, (b, l, h, vocab.shape[1]))

    def decode_step(self, features, prefix, z: Tensor | None = None,
                    projected: Tensor | None = None) -> np.ndarray:
        """Head distributions at the last prefix position, shape (H, m+1) or (B, H, m+1)."""
        single = np.asarray(features).ndim == 2 if features is not None else False
        with T.no_grad():
            if projected is None:
                projected = self.project(features)
            if z is None:
                z = self.encode(None, projected=projected)
            logits = self.logits_from(projected, z, prefix)
            probs = T.softmax(logits[:, -1], axis=-1).data
        return probs[0] if single else probs


def dynamic_logits(h, z_aug) -> np.ndarray:
    """Distribution over the m+1 vocabulary rows for one hidden state.

    ``z_aug`` row 0 is the EOS embedding, rows 1..m the candidate embeddings.
    """
    h = T.as_tensor(h)
    z_aug = T.as_tensor(z_aug)
    if h.shape[-1] != z_aug.shape[-1]:
        raise SchemaError("hidden width does not match vocabulary width")
    scores = T.matmul(T.reshape(h, (1, -1)), T.swap_last(z_aug))
    return T.reshape(T.softmax(scores, axis=-1), (z_aug.shape[0],))


def _validate_sequence(items, m: int) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    if items.ndim == 1:
        items = items[None]
    for row in items:
        if len(set(row.tolist())) != len(row):
            raise InvalidSequenceError(f"duplicate items in sequence {row.tolist()}")
    if items.size and (items.min() < 0 or items.max() >= m):
        raise InvalidSequenceError("sequence item outside candidate set")
    return items


def sequence_log_prob(model: GenRerankerModel, items, features, constrained: bool = False) -> Tensor:
    """Teacher-forced log p(Y | X) with head 0, EOS term included.

    ``items`` holds candidate indices (0-based) of one sequence (n,) or a batch
    (B, n).  With ``constrained`` the per-step distributions use the decoding
    mask: chosen items and EOS are excluded until n items are placed, after
    which EOS is forced.  Returns a (B,) tensor.
    """
    c = model.config
    items = _validate_sequence(items, c.max_candidates)
    b, n = items.shape
    feats = np.asarray(features)
    if feats.ndim == 2:
        feats = np.broadcast_to(feats, (b,) + feats.shape)
    tokens = items + 1
    logits = model.logits(feats, tokens)[:, :, 0, :]  # (B, n+1, m+1)
    targets = np.concatenate([tokens, np.full((b, 1), EOS)], axis=1)
    if constrained:
        mask = constrained_mask(tokens, c.max_candidates, n)
        logits = T.masked_fill(logits, mask, NEG_INF)
    logp = T.log_softmax(logits, axis=-1)
    picked = T.take_along(logp, targets[..., None], axis=-1)
    return T.tsum(T.reshape(picked, (b, n + 1)), axis=1, accumulate64=True)


def constrained_mask(tokens: np.ndarray, m: int, n: int) -> np.ndarray:
    """Decode-time exclusion mask for teacher forcing, shape (B, L+1, m+1)."""
    b, length = tokens.shape
    mask = np.zeros((b, length + 1, m + 1), dtype=bool)
    rows = np.arange(b)
    for t in range(length + 1):
        if t < n:
            mask[:, t, EOS] = True
        else:
            mask[:, t, 1:] = True
        for s in range(min(t, length)):
            mask[rows, t, tokens[:, s]] = True
    return mask
