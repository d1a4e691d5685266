import json
import subprocess
import sys

import pytest

from syntaxgen.cli import ablation_overrides, build_parser, read_config, run
from syntaxgen.data import make_template, write_corpus
from syntaxgen.model import ModelConfig, load_checkpoint, save_checkpoint
from syntaxgen.tree import delinearize, parse_bracketed, to_bracketed

SUBCOMMANDS = ["preprocess", "train-expander", "train-generator", "expand", "generate", "paraphrase",
               "evaluate", "gradcheck", "selftest", "make-synthetic"]
TINY_CONFIG = "d_m = 16\nd_k=8\nd_v=8\nh1=1\nh2=1\nh_enc=2\nn1=1\nn2=1\nd_ff=32\n# training\nsteps=3\nbatch_size=4\n"


def run_out(capsys, *argv):
    code = run(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """make-synthetic -> preprocess -> tiny training of both models."""
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY_CONFIG)
    assert run(["make-synthetic", "--out", str(d / "raw.jsonl"), "--n-sources", "4"]) == 0
    assert run(["preprocess", "--input", str(d / "raw.jsonl"), "--out-dir", str(d / "prep")]) == 0
    for kind in ("expander", "generator"):
        assert run([f"train-{kind}", "--train", str(d / "prep/train.jsonl"), "--vocab-dir", str(d / "prep"),
                    "--out-dir", str(d / "models"), "--config", str(d / "tiny.cfg")]) == 0
    return d


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_every_subcommand_has_help(cmd, capsys):
    code, out, _ = run_out(capsys, cmd, "--help")
    assert code == 0 and "--seed" in out and "--max-len" in out


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["gradcheck", "--bogus"],
    ["expand", "--expander", "x.ckpt"],
    ["expand", "--expander", "x.ckpt", "--input", "a.jsonl", "--template", "(S)"],
    ["evaluate", "--test", "t.jsonl"],
    ["evaluate", "--test", "t.jsonl", "--hypotheses", "h.jsonl", "--generator", "g.ckpt"],
    ["evaluate", "--test", "t.jsonl", "--generator", "g.ckpt", "--guidance", "expanded"],
    ["train-generator", "--train", "t", "--out-dir", "o", "--no-path-attention", "--ablation", "no-text"],
    ["preprocess", "--input", "x", "--out-dir", "y", "--valid-fraction", "1.5"],
    ["make-synthetic", "--out", "x", "--template-depth", "0"],
])
def test_usage_errors_exit_2_before_touching_files(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run_out(capsys, *argv)
    assert code == 2 and "usage:" in err
    assert not any(tmp_path.iterdir())


def test_operational_errors_exit_1(capsys, tmp_path):
    code, _, err = run_out(capsys, "expand", "--expander", str(tmp_path / "missing.ckpt"),
                           "--src-parse", "(S)", "--template", "(S)")
    assert code == 1 and err.startswith("syntaxgen expand: error:")
    (tmp_path / "bad.cfg").write_text("d_m=sixteen\n")
    (tmp_path / "x").write_text("")
    code, _, err = run_out(capsys, "train-expander", "--train", str(tmp_path / "x"),
                           "--out-dir", str(tmp_path / "o"), "--config", str(tmp_path / "bad.cfg"))
    assert code == 1 and "bad.cfg:1" in err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "syntaxgen", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "paraphrase" in res.stdout


def test_read_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("d_m = 32\nuse_path_attention=false\nlearning_rate=0.01\nclip_norm=none\n# comment\n\n")
    model_kw, train_kw = read_config(p)
    assert model_kw == {"d_m": 32, "use_path_attention": False}
    assert train_kw == {"learning_rate": 0.01, "clip_norm": None}
    p.write_text("nonsense=1\n")
    with pytest.raises(Exception, match="unknown key"):
        read_config(p)


def test_ablation_overrides_keep_total_heads():
    base = ModelConfig(h1=2, h2=2)
    assert ablation_overrides("no-syntax", base) == {"h1": 0, "h2": 4}
    assert ablation_overrides("no-text", base) == {"h1": 4, "h2": 0}
    assert ablation_overrides("no-path-attention", base) == {"use_path_attention": False}
    assert ablation_overrides("none", base) == {}


def test_parser_lists_all_subcommands():
    assert set(build_parser().parse_args(["gradcheck"])._subparsers) == set(SUBCOMMANDS)


# end-to-end on tiny models


def test_preprocess_outputs(workspace):
    prep = workspace / "prep"
    for name in ("train.jsonl", "text.vocab", "node.vocab", "level.vocab", "filter_report.json"):
        assert (prep / name).exists()
    rep = json.loads((prep / "filter_report.json").read_text())
    assert rep["total"] == 8 and rep["kept"] == 8


def test_preprocess_with_bpe_and_split(workspace, capsys):
    code, out, _ = run_out(capsys, "preprocess", "--input", str(workspace / "raw.jsonl"), "--out-dir",
                           str(workspace / "bpe"), "--bpe-vocab-size", "60", "--valid-fraction", "0.25")
    assert code == 0 and json.loads(out)["valid"] == 2
    assert (workspace / "bpe/bpe.merges").exists() and (workspace / "bpe/valid.jsonl").exists()


def test_training_outputs(workspace):
    for kind in ("expander", "generator"):
        lines = (workspace / f"models/{kind}_log.jsonl").read_text().splitlines()
        assert len(lines) == 3
        m = load_checkpoint(workspace / f"models/{kind}.ckpt")
        assert m.kind == kind and m.config.d_m == 16


def test_expand_generate_paraphrase_run(workspace, capsys):
    m = workspace / "models"
    rec = json.loads((workspace / "prep/train.jsonl").read_text().splitlines()[0])
    tmpl = to_bracketed(delinearize(make_template(parse_bracketed(rec["tgt_parse"]))))
    code, out, _ = run_out(capsys, "expand", "--expander", str(m / "expander.ckpt"),
                           "--src-parse", rec["src_parse"], "--template", tmpl)
    assert code == 0 and out.startswith("(")
    code, out, _ = run_out(capsys, "generate", "--generator", str(m / "generator.ckpt"),
                           "--parse", rec["tgt_parse"], "--src", rec["src"])
    assert code == 0
    code, out, _ = run_out(capsys, "paraphrase", "--expander", str(m / "expander.ckpt"),
                           "--generator", str(m / "generator.ckpt"), "--input", str(workspace / "prep/train.jsonl"))
    assert code == 0 and len(out.splitlines()) == 8
    code, _, err = run_out(capsys, "expand", "--expander", str(m / "generator.ckpt"),
                           "--src-parse", "(S)", "--template", "(S)")
    assert code == 1 and "is a generator checkpoint, not expander" in err


def test_evaluate_identical_hypotheses(workspace, capsys):
    test = str(workspace / "prep/train.jsonl")
    code, out, _ = run_out(capsys, "evaluate", "--test", test, "--hypotheses", test)
    assert code == 0
    rep = json.loads(out)
    assert rep["corpus"]["bleu"] == pytest.approx(1.0) and rep["corpus"]["ted"] == 0
    assert rep["corpus"]["n_ted"] == 0 and rep["n"] == 8


def test_evaluate_guidance_modes(workspace, capsys, tmp_path):
    m, test = workspace / "models", str(workspace / "prep/train.jsonl")
    code, out, _ = run_out(capsys, "evaluate", "--test", test, "--generator", str(m / "generator.ckpt"),
                           "--expander", str(m / "expander.ckpt"), "--guidance", "expanded",
                           "--output", str(tmp_path / "r.json"))
    assert code == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert {"bleu", "ted", "n_ted", "n_ted_3", "template_match_rate"} <= set(rep["corpus"])
    for g in ("target", "template-direct"):
        code, out, _ = run_out(capsys, "evaluate", "--test", test, "--generator", str(m / "generator.ckpt"),
                               "--guidance", g)
        assert code == 0 and json.loads(out)["guidance"] == g
    code, _, err = run_out(capsys, "evaluate", "--test", test, "--generator", str(m / "generator.ckpt"),
                           "--guidance", "none-syntax")
    assert code == 1 and "no-syntax" in err


def test_no_syntax_ablation_end_to_end(workspace, capsys):
    out_dir = workspace / "ablate"
    code, _, _ = run_out(capsys, "train-generator", "--train", str(workspace / "prep/train.jsonl"),
                         "--vocab-dir", str(workspace / "prep"), "--out-dir", str(out_dir),
                         "--config", str(workspace / "tiny.cfg"), "--ablation", "no-syntax")
    assert code == 0
    g = load_checkpoint(out_dir / "generator.ckpt")
    assert (g.config.h1, g.config.h2) == (0, 2)
    code, out, _ = run_out(capsys, "evaluate", "--test", str(workspace / "prep/train.jsonl"),
                           "--generator", str(out_dir / "generator.ckpt"), "--guidance", "none-syntax")
    assert code == 0 and "bleu" in json.loads(out)["corpus"]


def test_training_is_deterministic_under_seed(workspace, capsys, tmp_path):
    args = ["train-expander", "--train", str(workspace / "prep/train.jsonl"), "--config",
            str(workspace / "tiny.cfg"), "--seed", "7"]
    assert run(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert run(args + ["--out-dir", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    assert (tmp_path / "a/expander.ckpt").read_bytes() == (tmp_path / "b/expander.ckpt").read_bytes()
    assert run(args[:-1] + ["8", "--out-dir", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a/expander.ckpt").read_bytes() != (tmp_path / "c/expander.ckpt").read_bytes()


def test_make_synthetic_is_seeded(tmp_path):
    for name, seed in (("a", "1"), ("b", "1"), ("c", "2")):
        assert run(["make-synthetic", "--out", str(tmp_path / name), "--n-sources", "5", "--seed", seed]) == 0
    assert (tmp_path / "a").read_text() == (tmp_path / "b").read_text() != (tmp_path / "c").read_text()


def test_gradcheck_command(capsys):
    code, out, _ = run_out(capsys, "gradcheck")
    assert code == 0
    lines = [x for x in out.splitlines() if x.startswith(("PASS", "FAIL"))]
    assert lines and all(x.startswith("PASS") for x in lines)


def test_selftest_fast(capsys):
    code, out, _ = run_out(capsys, "selftest", "--fast")
    assert code == 0 and "FAIL" not in out


def test_paraphrase_on_overfit_models_reproduces_targets(overfit, tmp_path, capsys):
    save_checkpoint(overfit.expander, tmp_path / "e.ckpt")
    save_checkpoint(overfit.generator, tmp_path / "g.ckpt")
    write_corpus(overfit.records, tmp_path / "train.jsonl")
    code, out, _ = run_out(capsys, "paraphrase", "--expander", str(tmp_path / "e.ckpt"),
                           "--generator", str(tmp_path / "g.ckpt"), "--input", str(tmp_path / "train.jsonl"))
    assert code == 0
    outs = out.splitlines()
    hits = sum(o == r.tgt_text for o, r in zip(outs, overfit.records))
    assert len(outs) == len(overfit.records) and hits / len(outs) >= 0.90
