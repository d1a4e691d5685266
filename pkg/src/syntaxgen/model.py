"""Syntax expander and guided text generator built on the attention module."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import attention as attn
from .attention import HeadParams, MultiEncoderParams, SelfAttnParams
from .data import (
    ExpanderBatch,
    GeneratorBatch,
    SyntaxBatch,
    Tokenizer,
    Vocabs,
    collate_syntax,
    encode_syntax,
)
from .tensor import Tensor, add, dropout, embedding_gather, layer_norm, matmul, relu
from .tree import LinearParse

CHECKPOINT_MAGIC = b"SYNTAXGEN-CKPT 1\n"


@dataclass
class ModelConfig:
    d_m: int = 64
    d_k: int = 16
    d_v: int = 16
    h1: int = 2  # decoder heads on encoder 1
    h2: int = 2  # decoder heads on encoder 2
    h_enc: int = 4
    n1: int = 2  # encoder blocks
    n2: int = 2  # decoder blocks
    d_ff: int = 128
    max_len: int = 50
    template_depth: int = 3
    max_tree_depth: int = 8
    node_vocab_size: int = 0
    level_vocab_size: int = 0
    text_vocab_size: int = 0
    positional_encoding: bool = True
    use_path_attention: bool = True
    path_mask_mode: str = attn.KEYS_AND_QUERIES
    path_average: str = attn.UNIFORM
    dropout: float = 0.0
    ln_eps: float = 1e-5
    seed: int = 0

    def validate(self, kind: str = "expander") -> None:
        sizes = {k: getattr(self, k) for k in ("d_m", "d_k", "d_v", "h_enc", "n1", "n2", "d_ff", "max_len",
                                               "template_depth", "max_tree_depth", "node_vocab_size",
                                               "level_vocab_size")}
        if kind == "generator":
            sizes["text_vocab_size"] = self.text_vocab_size
        bad = [k for k, v in sizes.items() if v < 1]
        if bad:
            raise ValueError(f"config values must be positive: {', '.join(bad)}")
        if self.h1 < 0 or self.h2 < 0 or self.h1 + self.h2 < 1:
            raise ValueError(f"need h1, h2 >= 0 and h1 + h2 >= 1, got {self.h1}, {self.h2}")
        if self.path_mask_mode not in (attn.KEYS_AND_QUERIES, attn.KEYS_ONLY):
            raise ValueError(f"unknown path mask mode {self.path_mask_mode!r}")
        if self.path_average not in (attn.UNIFORM, attn.PER_NODE):
            raise ValueError(f"unknown path averaging {self.path_average!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class FeedForwardParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


@dataclass
class SyntaxEmbedding:
    node_table: Tensor
    level_table: Tensor


@dataclass
class EncoderBlock:
    attn: SelfAttnParams
    norm1: LayerNormParams
    ff: FeedForwardParams
    norm2: LayerNormParams


@dataclass
class PathEncoderBlock:
    """Two attention sublayers (path attention in the generator) and a feed-forward."""

    attn_a: SelfAttnParams
    norm_a: LayerNormParams
    attn_b: SelfAttnParams
    norm_b: LayerNormParams
    ff: FeedForwardParams
    norm_ff: LayerNormParams


@dataclass
class DecoderBlock:
    self_attn: SelfAttnParams
    norm1: LayerNormParams
    cross: MultiEncoderParams
    norm2: LayerNormParams
    ff: FeedForwardParams
    norm3: LayerNormParams


@dataclass
class ExpanderParams:
    syntax_emb: SyntaxEmbedding
    src_encoder: list[EncoderBlock]
    tmpl_encoder: list[EncoderBlock]
    decoder: list[DecoderBlock]
    node_head: Tensor
    node_bias: Tensor
    level_head: Tensor
    level_bias: Tensor


@dataclass
class GeneratorParams:
    syntax_emb: SyntaxEmbedding
    text_emb: Tensor
    syntax_encoder: list[PathEncoderBlock]
    text_encoder: list[EncoderBlock]
    decoder: list[DecoderBlock]
    vocab_head: Tensor
    vocab_bias: Tensor


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix.rstrip("."), obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}{f.name}.")
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}{i}.")


class _Init:
    """Deterministic U(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)

    def uniform(self, shape, fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def zeros(self, shape) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True)

    def table(self, n: int) -> Tensor:
        return self.uniform((n, self.cfg.d_m), self.cfg.d_m)

    def heads(self, h: int) -> HeadParams | None:
        if h == 0:
            return None
        c = self.cfg
        return HeadParams(
            self.uniform((h, c.d_m, c.d_k), c.d_m),
            self.uniform((h, c.d_m, c.d_k), c.d_m),
            self.uniform((h, c.d_m, c.d_v), c.d_m),
        )

    def self_attn(self, h: int) -> SelfAttnParams:
        return SelfAttnParams(self.heads(h), self.uniform((h * self.cfg.d_v, self.cfg.d_m), h * self.cfg.d_v))

    def multi_encoder(self, h1: int, h2: int) -> MultiEncoderParams:
        h = h1 + h2
        return MultiEncoderParams(self.heads(h1), self.heads(h2),
                                  self.uniform((h * self.cfg.d_v, self.cfg.d_m), h * self.cfg.d_v))

    def norm(self) -> LayerNormParams:
        d = self.cfg.d_m
        return LayerNormParams(Tensor(np.ones(d), requires_grad=True), self.zeros(d))

    def ff(self) -> FeedForwardParams:
        c = self.cfg
        return FeedForwardParams(self.uniform((c.d_m, c.d_ff), c.d_m), self.zeros(c.d_ff),
                                 self.uniform((c.d_ff, c.d_m), c.d_ff), self.zeros(c.d_m))

    def encoder_block(self) -> EncoderBlock:
        return EncoderBlock(self.self_attn(self.cfg.h_enc), self.norm(), self.ff(), self.norm())

    def path_block(self) -> PathEncoderBlock:
        h = self.cfg.h_enc
        return PathEncoderBlock(self.self_attn(h), self.norm(), self.self_attn(h), self.norm(), self.ff(), self.norm())

    def decoder_block(self) -> DecoderBlock:
        c = self.cfg
        return DecoderBlock(self.self_attn(c.h1 + c.h2), self.norm(), self.multi_encoder(c.h1, c.h2),
                            self.norm(), self.ff(), self.norm())

    def syntax_emb(self) -> SyntaxEmbedding:
        return SyntaxEmbedding(self.table(self.cfg.node_vocab_size), self.table(self.cfg.level_vocab_size))


# ---------------------------------------------------------------------------
# building blocks


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(length: int, d_m: int) -> np.ndarray:
    key = (length, d_m)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        i = np.arange(d_m)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / d_m)
        _PE_CACHE[key] = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return _PE_CACHE[key]


def embed_syntax(nodes, levels, emb: SyntaxEmbedding, use_pe: bool = True) -> Tensor:
    """Node embedding plus level embedding (plus sinusoidal position) per position."""
    x = add(embedding_gather(emb.node_table, nodes), embedding_gather(emb.level_table, levels))
    if use_pe:
        x = add(x, positional_encoding(x.shape[-2], x.shape[-1]))
    return x


def embed_text(ids, table: Tensor, use_pe: bool = True) -> Tensor:
    x = embedding_gather(table, ids)
    if use_pe:
        x = add(x, positional_encoding(x.shape[-2], x.shape[-1]))
    return x


def _norm(x: Tensor, p: LayerNormParams, eps: float) -> Tensor:
    return layer_norm(x, p.gamma, p.beta, eps)


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    return add(matmul(relu(add(matmul(x, p.W1), p.b1)), p.W2), p.b2)


def _key_mask(pad_mask):
    # [B, m] -> [B, 1, m]: the same keys for every query
    if pad_mask is None:
        return None
    pad_mask = np.asarray(pad_mask, dtype=bool)
    return pad_mask[..., None, :]


def _sub(x: Tensor, y: Tensor, norm: LayerNormParams, cfg: ModelConfig, rng) -> Tensor:
    # post-norm residual sublayer
    return _norm(add(x, dropout(y, cfg.dropout, rng)), norm, cfg.ln_eps)


def encoder_forward(X: Tensor, blocks: list[EncoderBlock], pad_mask, cfg: ModelConfig, rng=None) -> Tensor:
    """Self-attention -> add&norm -> feed-forward -> add&norm, per block."""
    km = _key_mask(pad_mask)
    for b in blocks:
        X = _sub(X, attn.multi_head_self_attention(X, b.attn, key_mask=km), b.norm1, cfg, rng)
        X = _sub(X, feed_forward(X, b.ff), b.norm2, cfg, rng)
    return X


def syntax_encoder_forward(X: Tensor, blocks: list[PathEncoderBlock], syn: SyntaxBatch, cfg: ModelConfig,
                           rng=None) -> Tensor:
    """Generator syntax encoder: two path-attention sublayers then feed-forward, per block.

    Path masks come from the batch and are reused by every sublayer.  With
    ``use_path_attention`` off the same layout runs plain self-attention.
    """
    km = _key_mask(syn.mask)

    def sublayer(x, params):
        if cfg.use_path_attention:
            return attn.path_attention(x, syn.path_masks, params, syn.path_valid,
                                       mode=cfg.path_mask_mode, average=cfg.path_average)
        return attn.multi_head_self_attention(x, params, key_mask=km)

    for b in blocks:
        X = _sub(X, sublayer(X, b.attn_a), b.norm_a, cfg, rng)
        X = _sub(X, sublayer(X, b.attn_b), b.norm_b, cfg, rng)
        X = _sub(X, feed_forward(X, b.ff), b.norm_ff, cfg, rng)
    return X


@dataclass
class EncoderState:
    H1: Tensor | None
    mask1: np.ndarray | None
    H2: Tensor | None
    mask2: np.ndarray | None


def decoder_forward(Y: Tensor, enc: EncoderState, blocks: list[DecoderBlock], pad_mask, cfg: ModelConfig,
                    rng=None) -> Tensor:
    """Causal self-attention -> add&norm -> multi-encoder attention -> add&norm -> FFN -> add&norm."""
    T = Y.shape[-2]
    self_mask = attn.causal_mask(T)
    if pad_mask is not None:
        self_mask = np.logical_and(self_mask, _key_mask(pad_mask))
    m1, m2 = _key_mask(enc.mask1), _key_mask(enc.mask2)
    for b in blocks:
        Y = _sub(Y, attn.multi_head_attention(Y, Y, b.self_attn, self_mask), b.norm1, cfg, rng)
        Y = _sub(Y, attn.multi_encoder_attention(Y, enc.H1, enc.H2, b.cross, m1, m2), b.norm2, cfg, rng)
        Y = _sub(Y, feed_forward(Y, b.ff), b.norm3, cfg, rng)
    return Y


# ---------------------------------------------------------------------------
# models


class _Model:
    kind = ""
    params: ExpanderParams | GeneratorParams

    def __init__(self, config: ModelConfig, vocabs: Vocabs, tokenizer: Tokenizer | None = None):
        self.config = config
        self.vocabs = vocabs
        self.tokenizer = tokenizer or Tokenizer()
        self.training = False
        self._rng = np.random.default_rng(config.seed + 1)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(named_tensors(self.params))
        for name, t in out:
            t.name = name
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = set(own) - set(state), set(state) - set(own)
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, t in own.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {n}: checkpoint shape {arr.shape}, config expects {t.shape}")
            t.data = arr.copy()

    def _drop_rng(self):
        return self._rng if (self.training and self.config.dropout > 0) else None

    def _check_len(self, n: int, what: str, limit: int | None = None) -> None:
        limit = self.config.max_len if limit is None else limit
        if n > limit:
            raise ValueError(f"{what} length {n} exceeds maximum {limit}")


class ExpanderModel(_Model):
    """Source-parse encoder + template encoder -> decoder emitting (node, level) pairs."""

    kind = "expander"

    def __init__(self, config: ModelConfig, vocabs: Vocabs, tokenizer: Tokenizer | None = None):
        config = config.replace(node_vocab_size=len(vocabs.node), level_vocab_size=len(vocabs.level))
        config.validate("expander")
        super().__init__(config, vocabs, tokenizer)
        init = _Init(config, config.seed)
        c = config
        self.params = ExpanderParams(
            syntax_emb=init.syntax_emb(),
            src_encoder=[init.encoder_block() for _ in range(c.n1)],
            tmpl_encoder=[init.encoder_block() for _ in range(c.n1)],
            decoder=[init.decoder_block() for _ in range(c.n2)],
            node_head=init.uniform((c.d_m, c.node_vocab_size), c.d_m),
            node_bias=init.zeros(c.node_vocab_size),
            level_head=init.uniform((c.d_m, c.level_vocab_size), c.d_m),
            level_bias=init.zeros(c.level_vocab_size),
        )

    def encode(self, src: SyntaxBatch, tmpl: SyntaxBatch) -> EncoderState:
        p, c = self.params, self.config
        self._check_len(src.nodes.shape[1], "source parse")
        self._check_len(tmpl.nodes.shape[1], "template parse")
        rng = self._drop_rng()
        H1 = H2 = None
        if c.h1 > 0:
            X = embed_syntax(src.nodes, src.levels, p.syntax_emb, c.positional_encoding)
            H1 = encoder_forward(X, p.src_encoder, src.mask, c, rng)
        if c.h2 > 0:
            X = embed_syntax(tmpl.nodes, tmpl.levels, p.syntax_emb, c.positional_encoding)
            H2 = encoder_forward(X, p.tmpl_encoder, tmpl.mask, c, rng)
        return EncoderState(H1, src.mask, H2, tmpl.mask)

    def decode(self, enc: EncoderState, in_nodes, in_levels, pad_mask=None) -> tuple[Tensor, Tensor]:
        p, c = self.params, self.config
        self._check_len(np.shape(in_nodes)[-1], "decoder input", c.max_len + 1)
        Y = embed_syntax(in_nodes, in_levels, p.syntax_emb, c.positional_encoding)
        Y = decoder_forward(Y, enc, p.decoder, pad_mask, c, self._drop_rng())
        return add(matmul(Y, p.node_head), p.node_bias), add(matmul(Y, p.level_head), p.level_bias)

    def logits(self, batch: ExpanderBatch) -> tuple[Tensor, Tensor]:
        enc = self.encode(batch.src, batch.tmpl)
        return self.decode(enc, batch.in_nodes, batch.in_levels, batch.out_mask)


class GeneratorModel(_Model):
    """Path-attention syntax encoder + text encoder -> text decoder."""

    kind = "generator"

    def __init__(self, config: ModelConfig, vocabs: Vocabs, tokenizer: Tokenizer | None = None):
        config = config.replace(node_vocab_size=len(vocabs.node), level_vocab_size=len(vocabs.level),
                                text_vocab_size=len(vocabs.text))
        config.validate("generator")
        super().__init__(config, vocabs, tokenizer)
        init = _Init(config, config.seed)
        c = config
        self.params = GeneratorParams(
            syntax_emb=init.syntax_emb(),
            text_emb=init.table(c.text_vocab_size),
            syntax_encoder=[init.path_block() for _ in range(c.n1)],
            text_encoder=[init.encoder_block() for _ in range(c.n1)],
            decoder=[init.decoder_block() for _ in range(c.n2)],
            vocab_head=init.uniform((c.d_m, c.text_vocab_size), c.d_m),
            vocab_bias=init.zeros(c.text_vocab_size),
        )

    def encode(self, guide: SyntaxBatch, src_ids, src_mask) -> EncoderState:
        p, c = self.params, self.config
        self._check_len(guide.nodes.shape[1], "syntax guidance")
        self._check_len(np.shape(src_ids)[-1], "source text")
        rng = self._drop_rng()
        H1 = H2 = None
        if c.h1 > 0:
            X = embed_syntax(guide.nodes, guide.levels, p.syntax_emb, c.positional_encoding)
            H1 = syntax_encoder_forward(X, p.syntax_encoder, guide, c, rng)
        if c.h2 > 0:
            X = embed_text(src_ids, p.text_emb, c.positional_encoding)
            H2 = encoder_forward(X, p.text_encoder, src_mask, c, rng)
        return EncoderState(H1, guide.mask, H2, src_mask)

    def decode(self, enc: EncoderState, in_ids, pad_mask=None) -> Tensor:
        p, c = self.params, self.config
        self._check_len(np.shape(in_ids)[-1], "decoder input", c.max_len + 1)
        Y = embed_text(in_ids, p.text_emb, c.positional_encoding)
        Y = decoder_forward(Y, enc, p.decoder, pad_mask, c, self._drop_rng())
        return add(matmul(Y, p.vocab_head), p.vocab_bias)

    def logits(self, batch: GeneratorBatch) -> Tensor:
        enc = self.encode(batch.guide, batch.src_ids, batch.src_mask)
        return self.decode(enc, batch.in_ids, batch.out_mask)


# single-example conveniences


def expander_forward(model: ExpanderModel, x_src: LinearParse, x_tmpl: LinearParse,
                     tgt_prefix: LinearParse) -> tuple[Tensor, Tensor]:
    """Teacher-forced logits [t x V_node], [t x V_level] with t = len(tgt_prefix) + 1."""
    v = model.vocabs
    nodes, levels = encode_syntax(tgt_prefix, v)
    in_nodes = np.concatenate([[v.node.bos_id], nodes])[None]
    in_levels = np.concatenate([[v.level.bos_id], levels])[None]
    enc = model.encode(collate_syntax([x_src], v), collate_syntax([x_tmpl], v))
    node_logits, level_logits = model.decode(enc, in_nodes, in_levels)
    return node_logits.reshape(node_logits.shape[1:]), level_logits.reshape(level_logits.shape[1:])


def generator_forward(model: GeneratorModel, x_guide: LinearParse, s_src: list[str],
                      tgt_prefix: list[str]) -> Tensor:
    """Teacher-forced vocabulary logits [t x V_text] with t = len(tgt_prefix) + 1."""
    tv = model.vocabs.text
    src = np.array(tv.encode(s_src), dtype=np.int64)[None]
    ids = np.array([tv.bos_id, *tv.encode(tgt_prefix)], dtype=np.int64)[None]
    enc = model.encode(collate_syntax([x_guide], model.vocabs, with_paths=True), src, np.ones_like(src, dtype=bool))
    logits = model.decode(enc, ids)
    return logits.reshape(logits.shape[1:])


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: the magic line, one line of canonical JSON (sorted keys) holding
# the model kind, full config, vocabularies, tokenizer and an ordered
# parameter table (name, shape, byte offset), then the parameters as raw
# little-endian float64 in table order.


def save_checkpoint(model: _Model, path) -> None:
    table, blobs, offset = [], [], 0
    for name, t in model.named_parameters():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "kind": model.kind,
        "config": model.config.to_dict(),
        "vocabs": model.vocabs.to_dict(),
        "tokenizer": model.tokenizer.to_dict(),
        "params": table,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> ExpanderModel | GeneratorModel:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic line)")
    rest = blob[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    body = rest[nl + 1:]
    cls = {"expander": ExpanderModel, "generator": GeneratorModel}.get(header["kind"])
    if cls is None:
        raise ValueError(f"{path}: unknown model kind {header['kind']!r}")
    model = cls(ModelConfig.from_dict(header["config"]), Vocabs.from_dict(header["vocabs"]),
                Tokenizer.from_dict(header["tokenizer"]))
    state = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"]))
        start = entry["offset"]
        if start + 8 * n > len(body):
            raise ValueError(f"{path}: truncated data for parameter {entry['name']}")
        state[entry["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=start).reshape(entry["shape"])
    model.load_state_dict(state)
    return model
