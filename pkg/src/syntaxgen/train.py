"""Losses, Adam and the teacher-forced training loop for both models."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ExpanderBatch, GeneratorBatch, Vocabs, make_batches
from .model import ExpanderModel, GeneratorModel, save_checkpoint
from .tensor import Tensor, add, backward, log_softmax, nll_loss, no_grad, scale

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    alpha: float = 0.5  # node loss weight
    beta: float = 0.5  # level loss weight
    clip_norm: float | None = 1.0
    warmup_steps: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"loss weights need alpha, beta >= 0 and alpha + beta > 0, got {self.alpha}, {self.beta}")
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("steps >= 0, batch_size >= 1 and learning_rate > 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# losses


def _sequence_nll(logits: Tensor, targets, pad_mask) -> Tensor:
    # summed over real steps of each sequence, averaged over the batch
    mask = np.ones(np.shape(targets), dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    n_seq = mask.shape[0] if mask.ndim > 1 else 1
    return scale(nll_loss(log_softmax(logits), targets, "sum", mask), 1.0 / n_seq)


def loss_syntax(node_logits: Tensor, level_logits: Tensor, node_targets, level_targets,
                alpha: float = 0.5, beta: float = 0.5, pad_mask=None) -> Tensor:
    """alpha * NLL(nodes) + beta * NLL(levels), summed over steps, mean over the batch."""
    parts = []
    if alpha:
        parts.append(scale(_sequence_nll(node_logits, node_targets, pad_mask), alpha))
    if beta:
        parts.append(scale(_sequence_nll(level_logits, level_targets, pad_mask), beta))
    return parts[0] if len(parts) == 1 else add(parts[0], parts[1])


def loss_text(logits: Tensor, targets, pad_mask=None) -> Tensor:
    return _sequence_nll(logits, targets, pad_mask)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_grad_norm(params: Sequence[tuple[str, Tensor]]) -> float:
    return math.sqrt(sum(float((t.grad * t.grad).sum()) for _, t in params if t.grad is not None))


def adam_step(params: Sequence[tuple[str, Tensor]], state: OptimizerState, config: TrainConfig,
              lr: float | None = None) -> None:
    """Bias-corrected Adam update, after optional global-norm clipping.

    Parameters without a gradient are left untouched.
    """
    for name, t in params:
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
    factor = 1.0
    if config.clip_norm:
        norm = global_grad_norm(params)
        if norm > config.clip_norm:
            factor = config.clip_norm / norm
    state.step += 1
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params:
        if t.grad is None:
            continue
        g = t.grad * factor
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


# ---------------------------------------------------------------------------
# training


def batch_loss(model, batch, config: TrainConfig) -> tuple[Tensor, int, int]:
    """Loss plus (correct, total) teacher-forced predictions on the batch.

    An expander step counts as correct only if both node and level are right.
    """
    if isinstance(model, ExpanderModel):
        assert isinstance(batch, ExpanderBatch)
        nl, ll = model.logits(batch)
        loss = loss_syntax(nl, ll, batch.out_nodes, batch.out_levels, config.alpha, config.beta, batch.out_mask)
        hit = (nl.data.argmax(-1) == batch.out_nodes) & (ll.data.argmax(-1) == batch.out_levels)
    else:
        assert isinstance(batch, GeneratorBatch)
        logits = model.logits(batch)
        loss = loss_text(logits, batch.out_ids, batch.out_mask)
        hit = logits.data.argmax(-1) == batch.out_ids
    mask = batch.out_mask
    return loss, int((hit & mask).sum()), int(mask.sum())


def teacher_forced_accuracy(model, examples, vocabs: Vocabs, batch_size: int = 64) -> float:
    correct = total = 0
    cfg = TrainConfig()
    with no_grad():
        for batch in make_batches(examples, vocabs, batch_size, seed=0):
            _, c, n = batch_loss(model, batch, cfg)
            correct += c
            total += n
    return correct / total


def per_token_loss(model, examples, vocabs: Vocabs, config: TrainConfig | None = None) -> float:
    """Mean loss per target step (the scale of the uniform-prediction baselines)."""
    config = config or TrainConfig()
    total = steps = 0.0
    with no_grad():
        for batch in make_batches(examples, vocabs, 64, seed=0):
            loss, _, n = batch_loss(model, batch, config)
            total += loss.item() * len(batch)
            steps += n
    return total / steps


@dataclass
class LogRecord:
    step: int
    loss: float
    accuracy: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


def train_model(model: ExpanderModel | GeneratorModel, examples: Sequence, config: TrainConfig,
                log_path=None, checkpoint_dir=None) -> list[LogRecord]:
    """Teacher-forced Adam training; returns one record per step."""
    if not examples:
        raise ValueError("cannot train on an empty corpus")
    params = model.named_parameters()
    state = OptimizerState()
    records: list[LogRecord] = []
    log_fh = open(log_path, "w") if log_path else None
    start = time.perf_counter()
    epoch, queue = 0, []
    model.training = True
    try:
        for step in range(config.steps):
            if not queue:
                queue = make_batches(examples, model.vocabs, config.batch_size, config.seed, epoch)
                epoch += 1
            batch = queue.pop(0)
            model.zero_grad()
            loss, correct, total = batch_loss(model, batch, config)
            backward(loss)
            lr = config.learning_rate
            if config.warmup_steps:
                lr *= min(1.0, (step + 1) / config.warmup_steps)
            adam_step(params, state, config, lr)
            rec = LogRecord(step, loss.item(), correct / total, time.perf_counter() - start)
            records.append(rec)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
            if step % 100 == 0:
                log.info("step %d loss %.4f acc %.3f", step, rec.loss, rec.accuracy)
            if checkpoint_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, Path(checkpoint_dir) / f"{model.kind}-step{step + 1}.ckpt")
    finally:
        model.training = False
        model.zero_grad()
        if log_fh:
            log_fh.close()
    if checkpoint_dir:
        save_checkpoint(model, Path(checkpoint_dir) / f"{model.kind}.ckpt")
    return records
