import json
import math

import numpy as np
import pytest

from syntaxgen.data import build_vocabs, expander_examples, generator_examples, synthetic_corpus
from syntaxgen.model import ExpanderModel, GeneratorModel, ModelConfig, load_checkpoint
from syntaxgen.tensor import Tensor, backward, grad_check
from syntaxgen.train import (
    OptimizerState,
    TrainConfig,
    adam_step,
    batch_loss,
    global_grad_norm,
    loss_syntax,
    loss_text,
    per_token_loss,
    train_model,
)

TINY = ModelConfig(d_m=16, d_k=8, d_v=8, h1=1, h2=1, h_enc=2, n1=1, n2=1, d_ff=32)


@pytest.fixture(scope="module")
def corpus():
    records = synthetic_corpus(4, seed=2)
    return records, build_vocabs(records)


def one_hot_logits(targets, v, big=1e3):
    out = np.zeros((len(targets), v))
    out[np.arange(len(targets)), targets] = big
    return Tensor(out)


# losses


def test_loss_syntax_uniform_example():
    loss = loss_syntax(Tensor(np.zeros((1, 74))), Tensor(np.zeros((1, 12))), [5], [3], 0.5, 0.5)
    assert loss.item() == pytest.approx(0.5 * math.log(74) + 0.5 * math.log(12), abs=1e-12)
    assert loss.item() == pytest.approx(3.3945, abs=1e-4)


def test_loss_syntax_node_only():
    rng = np.random.default_rng(0)
    nl, ll = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(3, 4)))
    node_only = loss_syntax(nl, ll, [0, 1, 2], [1, 1, 1], 1.0, 0.0).item()
    assert node_only == pytest.approx(loss_text(nl, [0, 1, 2]).item(), abs=1e-12)


def test_loss_syntax_is_linear_in_weights():
    rng = np.random.default_rng(1)
    nl, ll = Tensor(rng.normal(size=(2, 4, 7))), Tensor(rng.normal(size=(2, 4, 5)))
    nt, lt = rng.integers(0, 7, (2, 4)), rng.integers(0, 5, (2, 4))
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], bool)
    for a, b in [(0.5, 0.5), (0.2, 1.3), (2.0, 0.0)]:
        full = loss_syntax(nl, ll, nt, lt, a, b, mask).item()
        parts = a * loss_syntax(nl, ll, nt, lt, 1, 0, mask).item() + b * loss_syntax(nl, ll, nt, lt, 0, 1, mask).item()
        assert full == pytest.approx(parts, abs=1e-12)


def test_perfect_predictions_have_zero_loss():
    nt, lt = [2, 0, 1], [0, 1, 1]
    assert loss_syntax(one_hot_logits(nt, 3), one_hot_logits(lt, 2), nt, lt).item() == pytest.approx(0.0, abs=1e-12)
    assert loss_text(one_hot_logits(nt, 3), nt).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_text_uniform_example():
    assert loss_text(Tensor(np.zeros((1, 16000))), [42]).item() == pytest.approx(math.log(16000), abs=1e-9)
    assert math.log(16000) == pytest.approx(9.6803, abs=1e-4)


def test_loss_text_doubles_with_sequence_length():
    row = np.random.default_rng(2).normal(size=(1, 9))
    one = loss_text(Tensor(row), [4]).item()
    two = loss_text(Tensor(np.repeat(row, 2, 0)), [4, 4]).item()
    assert two == pytest.approx(2 * one, rel=1e-12)


def test_padding_is_excluded_and_batch_is_averaged():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    ta, tb = [1, 2, 3], [0, 4, 0]
    la, lb = loss_text(Tensor(a), ta).item(), loss_text(Tensor(b[:2]), tb[:2]).item()
    mask = np.array([[1, 1, 1], [1, 1, 0]], bool)
    both = loss_text(Tensor(np.stack([a, b])), [ta, tb], mask).item()
    assert both == pytest.approx((la + lb) / 2, rel=1e-12)


def test_loss_rejects_out_of_range_targets():
    with pytest.raises(IndexError):
        loss_text(Tensor(np.zeros((1, 3))), [3])


# optimizer


def _param(values, grad):
    t = Tensor(np.asarray(values, float), requires_grad=True)
    t.grad = np.asarray(grad, float)
    return t


def test_adam_zero_gradient_leaves_parameters():
    p = _param([1.0, -2.0], [0.0, 0.0])
    adam_step([("p", p)], OptimizerState(), TrainConfig())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr_sign():
    cfg = TrainConfig(learning_rate=0.01, clip_norm=None)
    p = _param([1.0, -2.0, 0.5], [0.3, -7.0, 1e-3])
    state = OptimizerState()
    adam_step([("p", p)], state, cfg)
    np.testing.assert_allclose(p.data - [1.0, -2.0, 0.5], -0.01 * np.sign([0.3, -7.0, 1e-3]), rtol=1e-4)
    assert state.m["p"].shape == p.data.shape and state.v["p"].shape == p.data.shape and state.step == 1


def test_adam_non_finite_gradient_names_parameter():
    p = _param([1.0], [np.nan])
    with pytest.raises(FloatingPointError, match="decoder.W"):
        adam_step([("decoder.W", p)], OptimizerState(), TrainConfig())
    np.testing.assert_array_equal(p.data, [1.0])


def test_adam_is_deterministic():
    def run():
        p = Tensor(np.linspace(-1, 1, 5), requires_grad=True)
        state = OptimizerState()
        for k in range(5):
            p.grad = np.sin(p.data * (k + 1))
            adam_step([("p", p)], state, TrainConfig())
        return p.data
    assert np.array_equal(run(), run())


def test_global_norm_clipping():
    cfg = TrainConfig(learning_rate=1.0, clip_norm=1.0, beta1=0.0, beta2=0.0, adam_eps=0.0)
    p = _param([0.0, 0.0], [30.0, 40.0])
    assert global_grad_norm([("p", p)]) == pytest.approx(50.0)
    # with beta1=beta2=0 the update is g/|g| elementwise, so clipping must not change the direction
    adam_step([("p", p)], OptimizerState(), cfg)
    np.testing.assert_allclose(p.data, [-1.0, -1.0])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(alpha=0, beta=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# full-model gradients


@pytest.mark.parametrize("kind", ["expander", "generator"])
def test_model_loss_gradients(corpus, kind):
    records, vocabs = corpus
    from syntaxgen.data import collate_expander, collate_generator

    if kind == "expander":
        model = ExpanderModel(TINY, vocabs)
        batch = collate_expander(expander_examples(records[:2]), vocabs)
    else:
        model = GeneratorModel(TINY, vocabs)
        batch = collate_generator(generator_examples(records[:2]), vocabs)
    params = [t for _, t in model.named_parameters()]
    picks = params[:: max(1, len(params) // 8)]  # a spread from embeddings to the output head
    rep = grad_check(lambda: batch_loss(model, batch, TrainConfig())[0], picks, tol=1e-4, step=1e-5, max_elements=3)
    assert rep.passed, rep


# training loop


def test_empty_corpus_raises(corpus):
    _, vocabs = corpus
    with pytest.raises(ValueError, match="empty"):
        train_model(GeneratorModel(TINY, vocabs), [], TrainConfig(steps=1))


def test_fresh_model_loss_near_uniform_baseline(corpus):
    records, vocabs = corpus
    exp = ExpanderModel(TINY, vocabs)
    base = 0.5 * math.log(len(vocabs.node)) + 0.5 * math.log(len(vocabs.level))
    assert abs(per_token_loss(exp, expander_examples(records), vocabs) - base) <= 0.1 * base
    gen = GeneratorModel(TINY, vocabs)
    base = math.log(len(vocabs.text))
    assert abs(per_token_loss(gen, generator_examples(records), vocabs) - base) <= 0.1 * base


def test_training_log_and_checkpoints(corpus, tmp_path):
    records, vocabs = corpus
    model = GeneratorModel(TINY, vocabs)
    cfg = TrainConfig(steps=6, batch_size=3, checkpoint_every=3)
    log = train_model(model, generator_examples(records), cfg, tmp_path / "log.jsonl", tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(lines) == len(log) == 6
    assert set(lines[0]) == {"step", "loss", "accuracy", "wall_time"}
    assert [r["step"] for r in lines] == list(range(6))
    assert (tmp_path / "generator-step3.ckpt").exists() and (tmp_path / "generator-step6.ckpt").exists()
    loaded = load_checkpoint(tmp_path / "generator.ckpt")
    for (n, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert np.array_equal(a.data, b.data), n


def test_training_is_deterministic(corpus):
    records, vocabs = corpus
    runs = []
    for _ in range(2):
        m = ExpanderModel(TINY, vocabs)
        log = train_model(m, expander_examples(records), TrainConfig(steps=4, batch_size=4))
        runs.append(([r.loss for r in log], m.state_dict()))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_training_reduces_loss(corpus):
    records, vocabs = corpus
    m = GeneratorModel(TINY, vocabs)
    log = train_model(m, generator_examples(records), TrainConfig(steps=40, batch_size=8, learning_rate=3e-3))
    assert np.mean([r.loss for r in log[-5:]]) < 0.7 * np.mean([r.loss for r in log[:5]])


def test_overfit_loss_block_means_decrease(overfit):
    for log in (overfit.expander_log, overfit.generator_log):
        losses = np.array([r.loss for r in log])
        blocks = losses.reshape(-1, 100).mean(1)
        assert np.all(np.diff(blocks) < 0), blocks


def test_backward_through_batch_loss_populates_all_parameters(corpus):
    records, vocabs = corpus
    from syntaxgen.data import collate_expander

    m = ExpanderModel(TINY, vocabs)
    loss, _, _ = batch_loss(m, collate_expander(expander_examples(records[:3]), vocabs), TrainConfig())
    backward(loss)
    missing = [n for n, t in m.named_parameters() if t.grad is None]
    assert not missing
