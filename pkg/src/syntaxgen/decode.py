"""Greedy decoding for both models and the two-stage paraphrase pipeline."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import collate_syntax
from .model import ExpanderModel, GeneratorModel
from .tensor import no_grad
from .tree import LinearParse


def _level_values(model: ExpanderModel) -> np.ndarray:
    # numeric level per level-vocab id, 0 for special tokens
    return np.array([int(t) if t.isdigit() else 0 for t in model.vocabs.level.tokens])


def expand_syntax_batch(model: ExpanderModel, srcs: Sequence[LinearParse], tmpls: Sequence[LinearParse],
                        max_len: int | None = None) -> list[LinearParse]:
    """Greedy joint (node, level) decoding.

    At every step the level head is restricted to values that keep the
    sequence a valid preorder depth list: 1 at the first step, then
    2..min(prev + 1, max_tree_depth).  The node head may emit EOS from the
    second step on.
    """
    v, c = model.vocabs, model.config
    max_len = c.max_len if max_len is None else max_len
    B = len(srcs)
    level_vals = _level_values(model)
    node_ban = np.zeros(len(v.node), dtype=bool)
    node_ban[[v.node.pad_id, v.node.bos_id]] = True

    in_nodes = np.full((B, 1), v.node.bos_id, dtype=np.int64)
    in_levels = np.full((B, 1), v.level.bos_id, dtype=np.int64)
    out_nodes: list[list[int]] = [[] for _ in range(B)]
    out_levels: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    prev = np.zeros(B, dtype=np.int64)
    with no_grad():
        enc = model.encode(collate_syntax(srcs, v), collate_syntax(tmpls, v))
        for step in range(max_len):
            nl, ll = model.decode(enc, in_nodes, in_levels)
            node_scores = nl.data[:, -1].copy()
            level_scores = ll.data[:, -1].copy()
            node_scores[:, node_ban] = -np.inf
            if step == 0:
                node_scores[:, v.node.eos_id] = -np.inf
                lo = np.ones(B, dtype=np.int64)
                hi = np.ones(B, dtype=np.int64)
            else:
                lo = np.full(B, 2, dtype=np.int64)
                hi = np.minimum(prev + 1, c.max_tree_depth)
            allowed = (level_vals[None] >= lo[:, None]) & (level_vals[None] <= hi[:, None]) & (level_vals[None] > 0)
            level_scores[~allowed] = -np.inf
            nodes = node_scores.argmax(-1)
            levels = level_scores.argmax(-1)
            stop = (nodes == v.node.eos_id) | ~allowed.any(-1)
            for i in range(B):
                if done[i]:
                    continue
                if stop[i]:
                    done[i] = True
                    continue
                out_nodes[i].append(int(nodes[i]))
                out_levels[i].append(int(levels[i]))
            prev = np.where(done, prev, level_vals[levels])
            if done.all():
                break
            feed_n = np.where(done, v.node.pad_id, nodes)
            feed_l = np.where(done, v.level.pad_id, levels)
            in_nodes = np.concatenate([in_nodes, feed_n[:, None]], axis=1)
            in_levels = np.concatenate([in_levels, feed_l[:, None]], axis=1)
    return [
        LinearParse(tuple(v.node.decode(n)), tuple(int(level_vals[x]) for x in lv))
        for n, lv in zip(out_nodes, out_levels)
    ]


def expand_syntax(model: ExpanderModel, x_src: LinearParse, x_tmpl: LinearParse,
                  max_len: int | None = None) -> LinearParse:
    return expand_syntax_batch(model, [x_src], [x_tmpl], max_len)[0]


def generate_text_batch(model: GeneratorModel, guides: Sequence[LinearParse], srcs: Sequence[Sequence[str]],
                        max_len: int | None = None) -> list[list[str]]:
    """Greedy decoding until EOS or ``max_len`` tokens; BOS/EOS are stripped."""
    v, c = model.vocabs, model.config
    tv = v.text
    max_len = c.max_len if max_len is None else max_len
    B = len(srcs)
    width = max(1, max(len(s) for s in srcs))
    src_ids = np.full((B, width), tv.pad_id, dtype=np.int64)
    src_mask = np.zeros((B, width), dtype=bool)
    for i, s in enumerate(srcs):
        src_ids[i, : len(s)] = tv.encode(s)
        src_mask[i, : len(s)] = True
    src_mask[:, 0] = True  # an empty source still needs one attendable key
    ban = np.zeros(len(tv), dtype=bool)
    ban[[tv.pad_id, tv.bos_id]] = True

    ids = np.full((B, 1), tv.bos_id, dtype=np.int64)
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with no_grad():
        enc = model.encode(collate_syntax(guides, v, with_paths=True), src_ids, src_mask)
        for _ in range(max_len):
            scores = model.decode(enc, ids).data[:, -1].copy()
            scores[:, ban] = -np.inf
            nxt = scores.argmax(-1)
            for i in range(B):
                if done[i]:
                    continue
                if nxt[i] == tv.eos_id:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            ids = np.concatenate([ids, np.where(done, tv.pad_id, nxt)[:, None]], axis=1)
    return [tv.decode(o) for o in out]


def generate_text(model: GeneratorModel, x_guide: LinearParse, s_src: Sequence[str],
                  max_len: int | None = None) -> list[str]:
    return generate_text_batch(model, [x_guide], [s_src], max_len)[0]


def pipeline_paraphrase_batch(expander: ExpanderModel, generator: GeneratorModel, s_srcs: Sequence[str],
                              x_srcs: Sequence[LinearParse], x_tmpls: Sequence[LinearParse],
                              max_len: int | None = None) -> list[tuple[str, LinearParse]]:
    expanded = expand_syntax_batch(expander, x_srcs, x_tmpls, max_len)
    tok = generator.tokenizer
    texts = generate_text_batch(generator, expanded, [tok(s) for s in s_srcs], max_len)
    return [(tok.detokenize(t), x) for t, x in zip(texts, expanded)]


def pipeline_paraphrase(expander: ExpanderModel, generator: GeneratorModel, s_src: str,
                        x_src: LinearParse, x_tmpl: LinearParse) -> tuple[str, LinearParse]:
    """Expand the template against the source parse, then generate from the expansion."""
    return pipeline_paraphrase_batch(expander, generator, [s_src], [x_src], [x_tmpl])[0]
