"""Command-line entry point: ``syntaxgen <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attention as attn
from . import checks, metrics
from .data import (
    BpeModel,
    ParaphraseRecord,
    Tokenizer,
    Vocab,
    Vocabs,
    bpe_train,
    build_vocabs,
    expander_examples,
    generator_examples,
    load_corpus,
    make_template,
    split_corpus,
    synthetic_corpus,
    write_corpus,
)
from .decode import expand_syntax_batch, generate_text_batch
from .model import ExpanderModel, GeneratorModel, ModelConfig, load_checkpoint
from .train import TrainConfig, train_model
from .tree import LinearParse, delinearize, linearize, parse_bracketed, to_bracketed

log = logging.getLogger("syntaxgen")

GUIDANCE = ("target", "expanded", "template-direct", "none-syntax", "none-text")
ABLATIONS = ("none", "no-syntax", "no-text", "no-path-attention")
VOCAB_FILES = {"text": "text.vocab", "node": "node.vocab", "level": "level.vocab"}
BPE_FILE = "bpe.merges"


class CliError(Exception):
    """Operational failure reported with exit status 1."""


# ---------------------------------------------------------------------------
# argument parsing


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    g.add_argument("--config", type=Path, help="flat key=value file of model/training hyperparameters")
    g.add_argument("--path-mask-mode", choices=(attn.KEYS_AND_QUERIES, attn.KEYS_ONLY), default=None)
    g.add_argument("--path-average", choices=(attn.UNIFORM, attn.PER_NODE), default=None)
    g.add_argument("--nted-denominator", choices=(metrics.REFERENCE, metrics.HYPOTHESIS, metrics.MAX),
                   default=metrics.REFERENCE)
    g.add_argument("--template-depth", type=int, default=3)
    g.add_argument("--max-len", type=int, default=50)
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="syntaxgen", description="Syntax-guided paraphrase generation.")
    sub = parser.add_subparsers(dest="command", metavar="<command>")
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    p = add("preprocess", "filter a raw corpus, split it and build vocabularies")
    p.add_argument("--input", type=Path, required=True, help="raw line-delimited JSON corpus")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--valid-fraction", type=float, default=0.0)
    p.add_argument("--bpe-vocab-size", type=int, default=0, help="train BPE to this size (0: whitespace tokens)")

    for kind in ("expander", "generator"):
        p = add(f"train-{kind}", f"train the {kind} with teacher forcing")
        p.add_argument("--train", type=Path, required=True, help="preprocessed training corpus")
        p.add_argument("--vocab-dir", type=Path, help="directory written by preprocess (default: build from --train)")
        p.add_argument("--out-dir", type=Path, required=True, help="checkpoints and training log go here")
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--checkpoint-every", type=int)
        if kind == "generator":
            p.add_argument("--ablation", choices=ABLATIONS, default="none")
            p.add_argument("--no-path-attention", action="store_true", help="same as --ablation no-path-attention")

    p = add("expand", "expand a template parse into a full parse")
    p.add_argument("--expander", type=Path, required=True)
    p.add_argument("--src-parse", help="bracketed source parse")
    p.add_argument("--template", help="bracketed template parse")
    p.add_argument("--input", type=Path, help="JSON lines with src_parse and template or tgt_parse")

    p = add("generate", "generate text from a full parse and a source sentence")
    p.add_argument("--generator", type=Path, required=True)
    p.add_argument("--parse", help="bracketed guiding parse")
    p.add_argument("--src", help="source sentence")
    p.add_argument("--input", type=Path, help="JSON lines with src and parse or tgt_parse")

    p = add("paraphrase", "expand a template then generate a paraphrase")
    p.add_argument("--expander", type=Path, required=True)
    p.add_argument("--generator", type=Path, required=True)
    p.add_argument("--src", help="source sentence")
    p.add_argument("--src-parse", help="bracketed source parse")
    p.add_argument("--template", help="bracketed template parse")
    p.add_argument("--input", type=Path, help="JSON lines with src, src_parse and template or tgt_parse")

    p = add("evaluate", "score generated paraphrases against references")
    p.add_argument("--test", type=Path, required=True, help="corpus with references")
    p.add_argument("--guidance", choices=GUIDANCE, default="target")
    p.add_argument("--generator", type=Path)
    p.add_argument("--expander", type=Path)
    p.add_argument("--hypotheses", type=Path, help="score this corpus-format file instead of running models")
    p.add_argument("--output", type=Path, help="write the JSON report here instead of stdout")

    p = add("gradcheck", "finite-difference check of every op and both models")
    p.add_argument("--tol", type=float, default=1e-4)

    p = add("selftest", "oracle-equivalence checks")
    p.add_argument("--fast", action="store_true", help="smaller instances")

    p = add("make-synthetic", "write the synthetic paraphrase corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-sources", type=int, default=32)
    parser.set_defaults(_subparsers=sub.choices)
    return parser


def _validate(parser: argparse.ArgumentParser, a: argparse.Namespace) -> None:
    parser = a._subparsers[a.command]
    if a.template_depth < 1:
        parser.error("--template-depth must be >= 1")
    if a.max_len < 1:
        parser.error("--max-len must be >= 1")
    cmd = a.command
    if cmd == "preprocess" and not 0.0 <= a.valid_fraction < 1.0:
        parser.error("--valid-fraction must be in [0, 1)")
    if cmd in ("expand", "generate", "paraphrase"):
        single = {"expand": ("src_parse", "template"), "generate": ("parse", "src"),
                  "paraphrase": ("src", "src_parse", "template")}[cmd]
        given = [getattr(a, k) is not None for k in single]
        if a.input is not None and any(given):
            parser.error("use either --input or the single-example flags, not both")
        if a.input is None and not all(given):
            flags = ", ".join("--" + k.replace("_", "-") for k in single)
            parser.error(f"need --input or all of {flags}")
    if cmd == "train-generator" and a.no_path_attention:
        if a.ablation not in ("none", "no-path-attention"):
            parser.error("--no-path-attention conflicts with --ablation " + a.ablation)
        a.ablation = "no-path-attention"
    if cmd == "evaluate":
        if a.hypotheses is None:
            if a.generator is None:
                parser.error("evaluate needs --generator (or --hypotheses)")
            if a.guidance == "expanded" and a.expander is None:
                parser.error("--guidance expanded needs --expander")
        elif a.generator is not None or a.expander is not None:
            parser.error("--hypotheses cannot be combined with --generator/--expander")


# ---------------------------------------------------------------------------
# helpers


def _convert(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if value.lower() == "none":
        return None
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float) or default is None:
        return float(value)
    return value


def read_config(path: Path | None) -> tuple[dict, dict]:
    """Split a key=value file into ModelConfig and TrainConfig overrides."""
    if path is None:
        return {}, {}
    model_defaults = ModelConfig().to_dict()
    train_defaults = dataclasses.asdict(TrainConfig())
    model_kw, train_kw = {}, {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        try:
            if key in model_defaults:
                model_kw[key] = _convert(value, model_defaults[key])
            elif key in train_defaults:
                train_kw[key] = _convert(value, train_defaults[key])
            else:
                raise CliError(f"{path}:{n}: unknown key {key!r}")
        except ValueError as e:
            raise CliError(f"{path}:{n}: {e}") from None
    return model_kw, train_kw


def _load_vocab_dir(d: Path) -> tuple[Vocabs, Tokenizer]:
    vocabs = Vocabs(**{k: Vocab.load(d / f) for k, f in VOCAB_FILES.items()})
    bpe_path = d / BPE_FILE
    tok = Tokenizer("bpe", BpeModel.load(bpe_path)) if bpe_path.exists() else Tokenizer()
    return vocabs, tok


def _read_jsonl(path: Path) -> list[dict]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise CliError(f"{path}:{n}: bad JSON ({e})") from None
    return out


def _field(row: dict, key: str, where: str):
    if key not in row:
        raise CliError(f"{where}: missing field {key!r}")
    return row[key]


def _template_of(row: dict, depth: int, where: str) -> LinearParse:
    if "template" in row:
        return linearize(parse_bracketed(row["template"]))
    return make_template(parse_bracketed(_field(row, "tgt_parse", where)), depth)


def _load_model(path: Path, kind: str):
    model = load_checkpoint(path)
    if model.kind != kind:
        raise CliError(f"{path}: is a {model.kind} checkpoint, not {kind}")
    return model


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(a) -> int:
    if a.bpe_vocab_size:
        with open(a.input) as fh:
            texts = []
            for line in fh:
                try:
                    row = json.loads(line)
                    texts += [row["src"], row["tgt"]]
                except (json.JSONDecodeError, KeyError, TypeError):
                    continue  # counted by load_corpus below
        tok = Tokenizer("bpe", bpe_train(texts, a.bpe_vocab_size))
    else:
        tok = Tokenizer()
    records, report = load_corpus(a.input, tok, a.max_len)
    if not records:
        raise CliError(f"{a.input}: no records survived filtering")
    train, valid = split_corpus(records, a.valid_fraction, a.seed)
    a.out_dir.mkdir(parents=True, exist_ok=True)
    write_corpus(train, a.out_dir / "train.jsonl")
    if valid:
        write_corpus(valid, a.out_dir / "valid.jsonl")
    vocabs = build_vocabs(train, tok)
    for kind, name in VOCAB_FILES.items():
        getattr(vocabs, kind).save(a.out_dir / name, kind)
    if tok.bpe is not None:
        tok.bpe.save(a.out_dir / BPE_FILE)
    rep = report.to_dict()
    rep.update(train=len(train), valid=len(valid))
    (a.out_dir / "filter_report.json").write_text(json.dumps(rep, indent=2) + "\n")
    _emit({k: rep[k] for k in ("total", "kept", "rejected_by_reason", "train", "valid")})
    return 0


def _model_config(a, extra: dict) -> ModelConfig:
    model_kw, _ = read_config(a.config)
    model_kw.setdefault("seed", a.seed)
    model_kw.setdefault("template_depth", a.template_depth)
    model_kw.setdefault("max_len", a.max_len)
    if a.path_mask_mode:
        model_kw["path_mask_mode"] = a.path_mask_mode
    if a.path_average:
        model_kw["path_average"] = a.path_average
    model_kw.update(extra)
    return ModelConfig(**model_kw)


def _train_config(a) -> TrainConfig:
    _, kw = read_config(a.config)
    kw.setdefault("seed", a.seed)
    for flag, key in (("steps", "steps"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
                      ("checkpoint_every", "checkpoint_every")):
        if getattr(a, flag) is not None:
            kw[key] = getattr(a, flag)
    return TrainConfig(**kw)


def _train_setup(a):
    train_cfg = _train_config(a)
    if a.vocab_dir:
        vocabs, tok = _load_vocab_dir(a.vocab_dir)
        records, report = load_corpus(a.train, tok, a.max_len)
    else:
        tok = Tokenizer()
        records, report = load_corpus(a.train, tok, a.max_len)
        vocabs = build_vocabs(records, tok)
    if not records:
        raise CliError(f"{a.train}: no usable records")
    return train_cfg, vocabs, tok, records


def _finish_training(a, model, examples, train_cfg) -> int:
    a.out_dir.mkdir(parents=True, exist_ok=True)
    recs = train_model(model, examples, train_cfg, a.out_dir / f"{model.kind}_log.jsonl", a.out_dir)
    last = recs[-1] if recs else None
    _emit({"checkpoint": str(a.out_dir / f"{model.kind}.ckpt"), "steps": len(recs),
           "parameters": model.parameter_count(),
           "final_loss": last.loss if last else None, "final_accuracy": last.accuracy if last else None})
    return 0


def cmd_train_expander(a) -> int:
    cfg = _model_config(a, {})
    train_cfg, vocabs, tok, records = _train_setup(a)
    model = ExpanderModel(cfg, vocabs, tok)
    return _finish_training(a, model, expander_examples(records, cfg.template_depth), train_cfg)


def ablation_overrides(ablation: str, base: ModelConfig) -> dict:
    """Head reassignment for the generator ablations; total decoder heads stay fixed."""
    h = base.h1 + base.h2
    if ablation == "no-syntax":
        return {"h1": 0, "h2": h}
    if ablation == "no-text":
        return {"h1": h, "h2": 0}
    if ablation == "no-path-attention":
        return {"use_path_attention": False}
    return {}


def cmd_train_generator(a) -> int:
    base = _model_config(a, {})
    cfg = base.replace(**ablation_overrides(a.ablation, base))
    train_cfg, vocabs, tok, records = _train_setup(a)
    model = GeneratorModel(cfg, vocabs, tok)
    return _finish_training(a, model, generator_examples(records, tok), train_cfg)


def cmd_expand(a) -> int:
    model = _load_model(a.expander, "expander")
    if a.input:
        rows = _read_jsonl(a.input)
        srcs = [linearize(parse_bracketed(_field(r, "src_parse", f"{a.input}:{i + 1}"))) for i, r in enumerate(rows)]
        tmpls = [_template_of(r, a.template_depth, f"{a.input}:{i + 1}") for i, r in enumerate(rows)]
    else:
        srcs = [linearize(parse_bracketed(a.src_parse))]
        tmpls = [linearize(parse_bracketed(a.template))]
    for x in expand_syntax_batch(model, srcs, tmpls, a.max_len):
        print(to_bracketed(delinearize(x)))
    return 0


def cmd_generate(a) -> int:
    model = _load_model(a.generator, "generator")
    tok = model.tokenizer
    if a.input:
        rows = _read_jsonl(a.input)
        guides = [linearize(parse_bracketed(r.get("parse") or _field(r, "tgt_parse", f"{a.input}:{i + 1}")))
                  for i, r in enumerate(rows)]
        srcs = [tok(_field(r, "src", f"{a.input}:{i + 1}")) for i, r in enumerate(rows)]
    else:
        guides, srcs = [linearize(parse_bracketed(a.parse))], [tok(a.src)]
    for t in generate_text_batch(model, guides, srcs, a.max_len):
        print(tok.detokenize(t))
    return 0


def cmd_paraphrase(a) -> int:
    expander = _load_model(a.expander, "expander")
    generator = _load_model(a.generator, "generator")
    if a.input:
        rows = _read_jsonl(a.input)
        where = [f"{a.input}:{i + 1}" for i in range(len(rows))]
        texts = [_field(r, "src", w) for r, w in zip(rows, where)]
        srcs = [linearize(parse_bracketed(_field(r, "src_parse", w))) for r, w in zip(rows, where)]
        tmpls = [_template_of(r, a.template_depth, w) for r, w in zip(rows, where)]
    else:
        texts, srcs = [a.src], [linearize(parse_bracketed(a.src_parse))]
        tmpls = [linearize(parse_bracketed(a.template))]
    expanded = expand_syntax_batch(expander, srcs, tmpls, a.max_len)
    tok = generator.tokenizer
    outs = generate_text_batch(generator, expanded, [tok(t) for t in texts], a.max_len)
    for t in outs:
        print(tok.detokenize(t))
    return 0


def evaluation_report(refs: Sequence[ParaphraseRecord], hyp_texts: Sequence[list[str]],
                      hyp_trees: Sequence | None, tokenizer: Tokenizer, denominator: str,
                      template_pairs: Sequence[tuple[LinearParse, LinearParse]] | None = None,
                      template_depth: int = 3) -> dict:
    """Per-pair and corpus-mean scores.

    ``hyp_trees`` are the parses the hypotheses are scored with for TED; when
    absent only text metrics are reported.
    """
    rows = []
    for i, ref in enumerate(refs):
        hyp_tree = None if hyp_trees is None else hyp_trees[i]
        ref_tokens = tokenizer(ref.tgt_text)
        hyp_tokens = list(hyp_texts[i])
        row = metrics.pair_scores(hyp_tokens, ref_tokens, hyp_tree,
                                  ref.tgt_tree if hyp_tree is not None else None, denominator)
        row["hypothesis"] = tokenizer.detokenize(hyp_tokens)
        row["reference"] = ref.tgt_text
        if template_pairs is not None:
            x, t = template_pairs[i]
            row["template_match"] = metrics.template_match_rate(x, t, template_depth)
        rows.append(row)
    corpus = metrics.corpus_means(rows)
    if template_pairs is not None:
        corpus["template_match_rate"] = corpus.pop("template_match")
    return {"n": len(rows), "nted_denominator": denominator, "corpus": corpus, "pairs": rows}


def cmd_evaluate(a) -> int:
    if a.hypotheses is not None:
        refs, _ = load_corpus(a.test, max_len=a.max_len)
        hyps, _ = load_corpus(a.hypotheses, max_len=a.max_len)
        if len(hyps) != len(refs):
            raise CliError(f"{len(hyps)} hypotheses for {len(refs)} references")
        tok = Tokenizer()
        report = evaluation_report(refs, [tok(h.tgt_text) for h in hyps], [h.tgt_tree for h in hyps], tok,
                                   a.nted_denominator)
        report["guidance"] = "hypotheses-file"
    else:
        generator = _load_model(a.generator, "generator")
        c = generator.config
        if a.guidance == "none-syntax" and c.h1 != 0:
            raise CliError("--guidance none-syntax needs a generator trained with --ablation no-syntax")
        if a.guidance == "none-text" and c.h2 != 0:
            raise CliError("--guidance none-text needs a generator trained with --ablation no-text")
        if a.guidance in ("target", "expanded", "template-direct") and (c.h1 == 0 or c.h2 == 0):
            raise CliError(f"--guidance {a.guidance} needs a generator using both encoders")
        tok = generator.tokenizer
        refs, _ = load_corpus(a.test, tok, a.max_len)
        if not refs:
            raise CliError(f"{a.test}: no usable records")
        tmpls = [make_template(r.tgt_tree, a.template_depth) for r in refs]
        hyp_trees = template_pairs = None
        if a.guidance == "expanded":
            expander = _load_model(a.expander, "expander")
            guides = expand_syntax_batch(expander, [linearize(r.src_tree) for r in refs], tmpls, a.max_len)
            hyp_trees = [delinearize(x) for x in guides]
            template_pairs = list(zip(guides, tmpls))
        elif a.guidance == "template-direct":
            guides = tmpls
        else:
            guides = [linearize(r.tgt_tree) for r in refs]
        texts = generate_text_batch(generator, guides, [tok(r.src_text) for r in refs], a.max_len)
        report = evaluation_report(refs, texts, hyp_trees, tok, a.nted_denominator, template_pairs,
                                   a.template_depth)
        report["guidance"] = a.guidance
    text = json.dumps(report, indent=2, sort_keys=True)
    if a.output:
        a.output.write_text(text + "\n")
        _emit({"guidance": report["guidance"], "n": report["n"], "corpus": report["corpus"]})
    else:
        print(text)
    return 0


def _print_results(results) -> bool:
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return all(r.passed for r in results)


def cmd_gradcheck(a) -> int:
    start = time.perf_counter()
    ok = _print_results(checks.run_gradcheck(tol=a.tol, seed=a.seed))
    print(f"{time.perf_counter() - start:.1f}s")
    return 0 if ok else 1


def cmd_selftest(a) -> int:
    return 0 if _print_results(checks.run_selftest(fast=a.fast)) else 1


def cmd_make_synthetic(a) -> int:
    if a.n_sources < 1:
        raise CliError("--n-sources must be >= 1")
    records = synthetic_corpus(a.n_sources, seed=a.seed)
    write_corpus(records, a.out)
    _emit({"records": len(records), "path": str(a.out)})
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train-expander": cmd_train_expander,
    "train-generator": cmd_train_generator,
    "expand": cmd_expand,
    "generate": cmd_generate,
    "paraphrase": cmd_paraphrase,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
    "make-synthetic": cmd_make_synthetic,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        _validate(parser, a)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(a.seed)
    try:
        return COMMANDS[a.command](a)
    except (CliError, OSError, ValueError, KeyError, IndexError, FloatingPointError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"syntaxgen {a.command}: error: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
