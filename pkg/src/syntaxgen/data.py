"""Corpus ingestion, tokenization, vocabularies, templates and batching."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .tree import (
    LinearParse,
    ParseTree,
    TreeSyntaxError,
    enumerate_paths,
    linearize,
    parse_bracketed,
    path_mask_matrix,
    to_bracketed,
    truncate,
)

log = logging.getLogger(__name__)

MAX_LEN = 50
MAX_TREE_DEPTH = 8
TEMPLATE_DEPTH = 3

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
TEXT_SPECIALS = (PAD, BOS, EOS, UNK)
SYNTAX_SPECIALS = (PAD, BOS, EOS)

VOCAB_HEADER = "#syntaxgen-vocab v1"
BPE_HEADER = "#syntaxgen-bpe v1"
EOW = "</w>"


# ---------------------------------------------------------------------------
# vocabularies


class Vocab:
    """Token/id bijection; specials take the lowest ids."""

    def __init__(self, tokens: Iterable[str] = (), specials: Sequence[str] = TEXT_SPECIALS, frozen: bool = False):
        self.specials = tuple(specials)
        self.frozen = False
        self._tokens: list[str] = []
        self._ids: dict[str, int] = {}
        for tok in self.specials:
            self.add(tok)
        for tok in tokens:
            self.add(tok)
        self.frozen = frozen

    @classmethod
    def build(cls, counts: Counter, specials: Sequence[str]) -> "Vocab":
        ordered = sorted((t for t in counts if t not in specials), key=lambda t: (-counts[t], t))
        return cls(ordered, specials, frozen=True)

    def add(self, token: str) -> int:
        if token in self._ids:
            return self._ids[token]
        if self.frozen:
            raise KeyError(f"vocab is frozen; cannot add {token!r}")
        self._ids[token] = len(self._tokens)
        self._tokens.append(token)
        return self._ids[token]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens and self.specials == other.specials

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def id(self, token: str) -> int:
        if token in self._ids:
            return self._ids[token]
        if UNK in self._ids:
            return self._ids[UNK]
        raise KeyError(f"unknown token {token!r}")

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    @property
    def unk_id(self) -> int | None:
        return self._ids.get(UNK)

    def to_lines(self, kind: str) -> list[str]:
        return [f"{VOCAB_HEADER} {kind} specials={len(self.specials)}"] + self._tokens

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "Vocab":
        if not lines or not lines[0].startswith(VOCAB_HEADER):
            raise ValueError("not a vocab listing (missing header)")
        n_special = int(lines[0].rsplit("specials=", 1)[1])
        body = list(lines[1:])
        return cls(body[n_special:], body[:n_special], frozen=True)

    def save(self, path, kind: str) -> None:
        Path(path).write_text("\n".join(self.to_lines(kind)) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_lines(Path(path).read_text().splitlines())


@dataclass
class Vocabs:
    text: Vocab
    node: Vocab
    level: Vocab

    def to_dict(self) -> dict:
        return {k: {"specials": list(v.specials), "tokens": v.tokens[len(v.specials):]}
                for k, v in (("text", self.text), ("node", self.node), ("level", self.level))}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabs":
        return cls(**{k: Vocab(v["tokens"], v["specials"], frozen=True) for k, v in d.items()})


# ---------------------------------------------------------------------------
# BPE


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    base_symbols: list[str]

    def __post_init__(self):
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}

    def encode_word(self, word: str) -> list[str]:
        symbols = _word_symbols(word)
        while len(symbols) > 1:
            best = None
            for i in range(len(symbols) - 1):
                r = self._ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best is None or r < best[0]):
                    best = (r, i)
            if best is None:
                break
            pair = (symbols[best[1]], symbols[best[1] + 1])
            symbols = _merge_pair(symbols, pair)
        return symbols

    def to_lines(self) -> list[str]:
        return [f"{BPE_HEADER} merges={len(self.merges)}", " ".join(self.base_symbols)] + [
            f"{a} {b}" for a, b in self.merges
        ]

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "BpeModel":
        if not lines or not lines[0].startswith(BPE_HEADER):
            raise ValueError("not a BPE listing (missing header)")
        base = lines[1].split()
        merges = [tuple(line.split(" ")) for line in lines[2:] if line]
        return cls([(a, b) for a, b in merges], base)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")

    @classmethod
    def load(cls, path) -> "BpeModel":
        return cls.from_lines(Path(path).read_text().splitlines())


def _word_symbols(word: str) -> list[str]:
    chars = list(word)
    chars[-1] = chars[-1] + EOW
    return chars


def _merge_pair(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    out = []
    i = 0
    while i < len(symbols):
        if i < len(symbols) - 1 and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def bpe_train(texts: Iterable[str], target_vocab_size: int) -> BpeModel:
    """Greedy pair merging; ties go to the lexicographically smallest pair."""
    word_counts = Counter(w for t in texts for w in t.split())
    if not word_counts:
        raise ValueError("bpe_train: empty corpus")
    words = {w: _word_symbols(w) for w in word_counts}
    base = sorted({s for syms in words.values() for s in syms})
    if target_vocab_size < len(base):
        raise ValueError(f"target vocab size {target_vocab_size} below base inventory {len(base)}")
    merges = []
    while len(base) + len(merges) < target_vocab_size:
        pairs: Counter = Counter()
        for w, syms in words.items():
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] += word_counts[w]
        if not pairs:
            break
        top = max(pairs.values())
        if top < 2:
            break
        pair = min(p for p, c in pairs.items() if c == top)
        merges.append(pair)
        words = {w: _merge_pair(syms, pair) for w, syms in words.items()}
    return BpeModel(merges, base)


# ---------------------------------------------------------------------------
# tokenization


WHITESPACE = "whitespace"
BPE = "bpe"


def tokenize(text: str, mode: str = WHITESPACE, model: BpeModel | None = None) -> list[str]:
    if mode == WHITESPACE:
        return text.split()
    if mode == BPE:
        if model is None:
            raise ValueError("bpe tokenization needs a BpeModel")
        return [s for w in text.split() for s in model.encode_word(w)]
    raise ValueError(f"unknown tokenizer mode {mode!r}")


def detokenize(tokens: Sequence[str], mode: str = WHITESPACE) -> str:
    if mode == WHITESPACE:
        return " ".join(tokens)
    if mode == BPE:
        return "".join(tokens).replace(EOW, " ").strip()
    raise ValueError(f"unknown tokenizer mode {mode!r}")


@dataclass
class Tokenizer:
    mode: str = WHITESPACE
    bpe: BpeModel | None = None

    def __call__(self, text: str) -> list[str]:
        return tokenize(text, self.mode, self.bpe)

    def detokenize(self, tokens: Sequence[str]) -> str:
        return detokenize(tokens, self.mode)

    def to_dict(self) -> dict:
        d = {"mode": self.mode}
        if self.bpe is not None:
            d["bpe"] = self.bpe.to_lines()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        bpe = BpeModel.from_lines(d["bpe"]) if "bpe" in d else None
        return cls(d["mode"], bpe)


# ---------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class ParaphraseRecord:
    src_text: str
    tgt_text: str
    src_parse: str
    tgt_parse: str

    @property
    def src_tree(self) -> ParseTree:
        return parse_bracketed(self.src_parse)

    @property
    def tgt_tree(self) -> ParseTree:
        return parse_bracketed(self.tgt_parse)

    def to_json(self) -> str:
        return json.dumps(
            {"src": self.src_text, "tgt": self.tgt_text, "src_parse": self.src_parse, "tgt_parse": self.tgt_parse}
        )


@dataclass
class FilterReport:
    total: int = 0
    kept: int = 0
    reasons: Counter = field(default_factory=Counter)
    rejected: list[tuple[int, str, str]] = field(default_factory=list)

    def reject(self, line_no: int, reason: str, detail: str = "") -> None:
        self.reasons[reason] += 1
        self.rejected.append((line_no, reason, detail))

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "kept": self.kept,
            "rejected_by_reason": dict(sorted(self.reasons.items())),
            "rejected": [{"line": n, "reason": r, "detail": d} for n, r, d in self.rejected],
        }


def _is_ascii(s: str) -> bool:
    return all(ord(c) < 128 for c in s)


def filter_record(
    raw: dict,
    tokenizer: Callable[[str], list[str]] = str.split,
    max_len: int = MAX_LEN,
    max_tree_depth: int = MAX_TREE_DEPTH,
) -> tuple[ParaphraseRecord | None, str, str]:
    """Apply the corpus filters to one raw record; returns (record, reason, detail)."""
    try:
        src, tgt, sp, tp = (raw[k] for k in ("src", "tgt", "src_parse", "tgt_parse"))
    except (KeyError, TypeError):
        return None, "malformed", "missing one of src, tgt, src_parse, tgt_parse"
    if not all(isinstance(v, str) for v in (src, tgt, sp, tp)) or not src.strip() or not tgt.strip():
        return None, "malformed", "fields must be non-empty strings"
    if not all(_is_ascii(v) for v in (src, tgt, sp, tp)):
        return None, "non-ASCII", ""
    try:
        src_tree = truncate(parse_bracketed(sp), max_tree_depth)
        tgt_tree = truncate(parse_bracketed(tp), max_tree_depth)
    except (TreeSyntaxError, ValueError) as e:
        return None, "malformed", str(e)
    lengths = (len(tokenizer(src)), len(tokenizer(tgt)), src_tree.size, tgt_tree.size)
    if max(lengths) > max_len:
        return None, "length", f"lengths {lengths} exceed {max_len}"
    record = ParaphraseRecord(" ".join(src.split()), " ".join(tgt.split()), to_bracketed(src_tree), to_bracketed(tgt_tree))
    return record, "", ""


def load_corpus(
    path,
    tokenizer: Callable[[str], list[str]] = str.split,
    max_len: int = MAX_LEN,
    max_tree_depth: int = MAX_TREE_DEPTH,
) -> tuple[list[ParaphraseRecord], FilterReport]:
    """Read line-delimited JSON records, dropping and reporting bad ones."""
    report = FilterReport()
    records = []
    with open(path, encoding="utf-8", errors="surrogateescape") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            report.total += 1
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                report.reject(line_no, "malformed", f"bad JSON: {e}")
                continue
            rec, reason, detail = filter_record(raw, tokenizer, max_len, max_tree_depth)
            if rec is None:
                report.reject(line_no, reason, detail)
                continue
            records.append(rec)
    report.kept = len(records)
    log.info("loaded %d of %d records from %s", report.kept, report.total, path)
    return records, report


def write_corpus(records: Iterable[ParaphraseRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def split_corpus(records: Sequence, valid_fraction: float, seed: int) -> tuple[list, list]:
    order = np.random.default_rng(seed).permutation(len(records))
    n_valid = int(round(valid_fraction * len(records)))
    return [records[i] for i in order[n_valid:]], [records[i] for i in order[:n_valid]]


def build_vocabs(records: Sequence[ParaphraseRecord], tokenizer: Callable[[str], list[str]] = str.split) -> Vocabs:
    text, nodes, levels = Counter(), Counter(), Counter()
    for r in records:
        text.update(tokenizer(r.src_text))
        text.update(tokenizer(r.tgt_text))
        for tree in (r.src_tree, r.tgt_tree):
            lp = linearize(tree)
            nodes.update(lp.nodes)
            levels.update(str(v) for v in lp.levels)
    return Vocabs(
        Vocab.build(text, TEXT_SPECIALS),
        Vocab.build(nodes, SYNTAX_SPECIALS),
        Vocab.build(levels, SYNTAX_SPECIALS),
    )


def make_template(x_tgt: ParseTree, depth: int = TEMPLATE_DEPTH) -> LinearParse:
    return linearize(truncate(x_tgt, depth))


# ---------------------------------------------------------------------------
# id encoding and batching


def encode_syntax(lp: LinearParse, vocabs: Vocabs) -> tuple[np.ndarray, np.ndarray]:
    """Node and level ids; the syntax vocabularies are closed."""
    try:
        nodes = [vocabs.node._ids[p] for p in lp.nodes]
    except KeyError as e:
        raise KeyError(f"parse node {e.args[0]!r} not in node vocabulary") from None
    try:
        levels = [vocabs.level._ids[str(v)] for v in lp.levels]
    except KeyError as e:
        raise KeyError(f"level {e.args[0]} not in level vocabulary") from None
    return np.array(nodes, dtype=np.int64), np.array(levels, dtype=np.int64)


@dataclass
class ExpanderExample:
    src: LinearParse
    tmpl: LinearParse
    tgt: LinearParse


@dataclass
class GeneratorExample:
    guide: LinearParse
    src_tokens: list[str]
    tgt_tokens: list[str]


def expander_examples(records, template_depth: int = TEMPLATE_DEPTH) -> list[ExpanderExample]:
    out = []
    for r in records:
        tgt = r.tgt_tree
        out.append(ExpanderExample(linearize(r.src_tree), make_template(tgt, template_depth), linearize(tgt)))
    return out


def generator_examples(records, tokenizer: Callable[[str], list[str]] = str.split,
                       guidance: str = "target", template_depth: int = TEMPLATE_DEPTH) -> list[GeneratorExample]:
    out = []
    for r in records:
        tree = r.tgt_tree
        guide = linearize(tree) if guidance == "target" else make_template(tree, template_depth)
        out.append(GeneratorExample(guide, tokenizer(r.src_text), tokenizer(r.tgt_text)))
    return out


def _pad(seqs: Sequence[Sequence[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


@dataclass
class SyntaxBatch:
    nodes: np.ndarray  # [B, N]
    levels: np.ndarray
    mask: np.ndarray  # true at real positions
    path_masks: np.ndarray | None = None  # [B, P, N]
    path_valid: np.ndarray | None = None  # [B, P]


def collate_syntax(parses: Sequence[LinearParse], vocabs: Vocabs, with_paths: bool = False) -> SyntaxBatch:
    enc = [encode_syntax(lp, vocabs) for lp in parses]
    nodes, mask = _pad([e[0] for e in enc], vocabs.node.pad_id)
    levels, _ = _pad([e[1] for e in enc], vocabs.level.pad_id)
    batch = SyntaxBatch(nodes, levels, mask)
    if with_paths:
        path_sets = [enumerate_paths(lp) for lp in parses]
        P = max(len(ps) for ps in path_sets)
        N = nodes.shape[1]
        pm = np.zeros((len(parses), P, N), dtype=bool)
        pv = np.zeros((len(parses), P), dtype=bool)
        for i, ps in enumerate(path_sets):
            pm[i, : len(ps)] = path_mask_matrix(ps, N)
            pv[i, : len(ps)] = True
        batch.path_masks, batch.path_valid = pm, pv
    return batch


@dataclass
class ExpanderBatch:
    src: SyntaxBatch
    tmpl: SyntaxBatch
    in_nodes: np.ndarray  # BOS + target, [B, T]
    in_levels: np.ndarray
    out_nodes: np.ndarray  # target + EOS
    out_levels: np.ndarray
    out_mask: np.ndarray

    def __len__(self) -> int:
        return self.in_nodes.shape[0]


@dataclass
class GeneratorBatch:
    guide: SyntaxBatch
    src_ids: np.ndarray
    src_mask: np.ndarray
    in_ids: np.ndarray
    out_ids: np.ndarray
    out_mask: np.ndarray

    def __len__(self) -> int:
        return self.in_ids.shape[0]


def collate_expander(examples: Sequence[ExpanderExample], vocabs: Vocabs) -> ExpanderBatch:
    nv, lv = vocabs.node, vocabs.level
    tgt = [encode_syntax(e.tgt, vocabs) for e in examples]
    in_nodes, _ = _pad([[nv.bos_id, *n] for n, _ in tgt], nv.pad_id)
    in_levels, _ = _pad([[lv.bos_id, *lvl] for _, lvl in tgt], lv.pad_id)
    out_nodes, out_mask = _pad([[*n, nv.eos_id] for n, _ in tgt], nv.pad_id)
    out_levels, _ = _pad([[*lvl, lv.eos_id] for _, lvl in tgt], lv.pad_id)
    return ExpanderBatch(
        collate_syntax([e.src for e in examples], vocabs),
        collate_syntax([e.tmpl for e in examples], vocabs),
        in_nodes, in_levels, out_nodes, out_levels, out_mask,
    )


def collate_generator(examples: Sequence[GeneratorExample], vocabs: Vocabs) -> GeneratorBatch:
    tv = vocabs.text
    src_ids, src_mask = _pad([tv.encode(e.src_tokens) for e in examples], tv.pad_id)
    tgt = [tv.encode(e.tgt_tokens) for e in examples]
    in_ids, _ = _pad([[tv.bos_id, *t] for t in tgt], tv.pad_id)
    out_ids, out_mask = _pad([[*t, tv.eos_id] for t in tgt], tv.pad_id)
    return GeneratorBatch(
        collate_syntax([e.guide for e in examples], vocabs, with_paths=True),
        src_ids, src_mask, in_ids, out_ids, out_mask,
    )


def make_batches(examples: Sequence, vocabs: Vocabs, batch_size: int, seed: int, epoch: int = 0) -> list:
    """One epoch of padded batches, shuffled deterministically by (seed, epoch)."""
    if not examples:
        raise ValueError("no examples to batch")
    collate = collate_expander if isinstance(examples[0], ExpanderExample) else collate_generator
    order = np.random.default_rng([seed, epoch]).permutation(len(examples))
    return [
        collate([examples[i] for i in order[k : k + batch_size]], vocabs)
        for k in range(0, len(examples), batch_size)
    ]


# ---------------------------------------------------------------------------
# synthetic paraphrase corpus


_NOUNS = ("cat dog fox bird horse teacher doctor farmer child king queen pilot "
          "driver singer baker artist student lawyer nurse soldier").split()
_ADJS = "big small old young quick lazy happy angry tall brave".split()
_VERBS = [("chased", "chased"), ("saw", "seen"), ("helped", "helped"), ("followed", "followed"),
          ("called", "called"), ("found", "found"), ("met", "met"), ("pushed", "pushed"),
          ("watched", "watched"), ("thanked", "thanked"), ("visited", "visited"), ("blamed", "blamed")]


def _np(det: str, adj: str | None, noun: str) -> tuple[list[str], str]:
    words = [det] + ([adj] if adj else []) + [noun]
    tree = "(NP(DT)" + ("(JJ)" if adj else "") + "(NN))"
    return words, tree


def _render(form: str, agent, verb, patient, adverb: bool) -> tuple[str, str]:
    a_words, a_tree = _np(*agent)
    p_words, p_tree = _np(*patient)
    past, participle = verb
    adv_w = ["yesterday"] if adverb else []
    adv_t = "(ADVP(RB))" if adverb else ""
    if form == "active":
        words = a_words + [past] + p_words + adv_w + ["."]
        tree = f"(S{a_tree}(VP(VBD){p_tree}{adv_t})(.))"
    elif form == "passive":
        words = p_words + ["was", participle, "by"] + a_words + adv_w + ["."]
        tree = f"(S{p_tree}(VP(VBD)(VP(VBN)(PP(IN){a_tree}){adv_t}))(.))"
    elif form == "topicalized":
        words = p_words + [","] + a_words + [past] + adv_w + ["."]
        tree = f"(S{p_tree}(,){a_tree}(VP(VBD){adv_t})(.))"
    else:
        raise ValueError(form)
    return " ".join(words), tree


FORMS = ("active", "passive", "topicalized")


def synthetic_corpus(n_sources: int = 32, seed: int = 0) -> list[ParaphraseRecord]:
    """Paraphrase pairs from a toy grammar: each source yields two targets
    in the two other constructions, so one source carries two templates."""
    rng = np.random.default_rng(seed)
    seen = set()
    records = []
    while len(seen) < n_sources:
        def entity():
            adj = _ADJS[rng.integers(len(_ADJS))] if rng.random() < 0.5 else None
            return ("the" if rng.random() < 0.7 else "a", adj, _NOUNS[rng.integers(len(_NOUNS))])

        agent, patient = entity(), entity()
        if agent[2] == patient[2]:
            continue
        verb = _VERBS[rng.integers(len(_VERBS))]
        adverb = bool(rng.random() < 0.3)
        src_form = FORMS[rng.integers(len(FORMS))]
        key = (agent, patient, verb, adverb, src_form)
        if key in seen:
            continue
        seen.add(key)
        src_text, src_parse = _render(src_form, agent, verb, patient, adverb)
        for form in FORMS:
            if form == src_form:
                continue
            tgt_text, tgt_parse = _render(form, agent, verb, patient, adverb)
            records.append(ParaphraseRecord(src_text, tgt_text, src_parse, tgt_parse))
    return records
