"""Self-distillation training loop.

The teacher is the same network one optimizer step behind the student (or one
epoch behind, under ``per_epoch``). The loss per example is

    CE(student(x), y) + lambda * MSE(student(x), teacher(x))

with the teacher output held constant.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from cvet.checkpoint import Checkpoint, config_digest
from cvet.model import ModelConfig, ModelState, backward, forward_batch, init_model, predict_batch
from cvet.numerics import LossValue, cross_entropy, derive_seed, log_softmax, make_rng, mse, softmax
from cvet.optimizer import AdamConfig, AdamState, adam_step
from cvet.text_pipeline import N_CLASSES, TokenSequence, Vocabulary, stack_sequences

PER_BATCH = "per_batch"
PER_EPOCH = "per_epoch"


class NumericError(FloatingPointError):
    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"step {step}: {message}")


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 1.0
    teacher_granularity: str = PER_BATCH
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    mse_space: str = "logits"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and >= 0")
        if self.teacher_granularity not in (PER_BATCH, PER_EPOCH):
            raise ValueError(f"teacher_granularity must be {PER_BATCH} or {PER_EPOCH}")
        if self.mse_space not in ("logits", "probs"):
            raise ValueError("mse_space must be 'logits' or 'probs'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainingExample:
    x: TokenSequence
    y: int

    def __post_init__(self):
        if not 0 <= self.y < N_CLASSES:
            raise ValueError(f"label {self.y} outside [0, {N_CLASSES})")


@dataclass
class TrainerState:
    student: ModelState
    teacher: ModelState
    optimizer: AdamState
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


# --- loss ------------------------------------------------------------------------


def _probs_mse(student_logits: np.ndarray, teacher_logits: np.ndarray):
    p, q = softmax(student_logits), softmax(teacher_logits)
    diff = p - q
    n = diff.shape[-1]
    value = (diff * diff).mean(axis=-1)
    u = 2.0 * diff / n
    grad = p * (u - (p * u).sum(axis=-1, keepdims=True))
    return value, grad


def distill_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, y: int, lam: float,
                 mse_space: str = "logits") -> LossValue:
    """Combined loss and its gradient w.r.t. the student logits only."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    ce = cross_entropy(student_logits, y)
    if mse_space == "logits":
        term = mse(student_logits, teacher_logits)
        term_value, term_grad = term.value, term.gradient
    else:
        term_value, term_grad = _probs_mse(np.asarray(student_logits, float), np.asarray(teacher_logits, float))
        term_value = float(term_value)
    return LossValue(ce.value + lam * term_value, ce.gradient + lam * term_grad)


def _batch_ce(logits: np.ndarray, y: np.ndarray):
    values = -log_softmax(logits)[np.arange(len(y)), y]
    grad = softmax(logits)
    grad[np.arange(len(y)), y] -= 1.0
    return values, grad


def batch_loss(student_logits: np.ndarray, y: np.ndarray, teacher_logits: np.ndarray | None = None,
               lam: float = 0.0, mse_space: str = "logits") -> tuple[float, np.ndarray, np.ndarray]:
    """Mean loss over the batch, its gradient w.r.t. the logits, and per-example values.

    With ``teacher_logits=None`` this is plain cross-entropy fine-tuning.
    """
    values, grad = _batch_ce(student_logits, y)
    if teacher_logits is not None:
        if mse_space == "logits":
            diff = student_logits - teacher_logits
            term_values = (diff * diff).mean(axis=-1)
            term_grad = 2.0 * diff / diff.shape[-1]
        else:
            term_values, term_grad = _probs_mse(student_logits, teacher_logits)
        values = values + lam * term_values
        grad = grad + lam * term_grad
    n = len(y)
    return float(values.mean()), grad / n, values


# --- training --------------------------------------------------------------------

StepHook = Callable[[int, ModelState, ModelState, ModelState], None]


def as_arrays(data) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(data, tuple):
        ids, mask, y = data
        return np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=bool), np.asarray(y, dtype=np.int64)
    ids, mask = stack_sequences([ex.x for ex in data])
    return ids, mask, np.array([ex.y for ex in data], dtype=np.int64)


def snapshot_teacher(state: TrainerState) -> TrainerState:
    return dataclasses.replace(state, teacher=state.student.copy())


def train_epoch(state: TrainerState, data, adam_config: AdamConfig, config: DistillConfig,
                distillation: bool = True, hook: StepHook | None = None) -> tuple[TrainerState, dict]:
    """Run one shuffled pass over ``data``.

    ``distillation=False`` is the plain fine-tuning path: no teacher forward,
    cross-entropy only. ``hook(step, teacher, student_before, student_after)``
    is called after every optimizer step.
    """
    ids, mask, y = as_arrays(data)
    if len(y) == 0:
        raise ValueError("training data is empty")
    order = make_rng(config.seed, "shuffle", state.epoch).permutation(len(y))
    student, teacher, opt, step = state.student, state.teacher, state.optimizer, state.step
    total_loss = 0.0
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        b_ids, b_mask, b_y = ids[idx], mask[idx], y[idx]
        step += 1
        teacher_logits = forward_batch(b_ids, b_mask, teacher).logits if distillation else None
        out = forward_batch(b_ids, b_mask, student, training=True, seed=derive_seed(config.seed, "dropout", step))
        loss, dlogits, _ = batch_loss(out.logits, b_y, teacher_logits, config.lam, config.mse_space)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss}", step)
        grads = backward(out.trace, dlogits)
        try:
            params, opt = adam_step(opt, student.params, grads, adam_config)
        except FloatingPointError as exc:
            raise NumericError(str(exc), step) from exc
        before, student = student, ModelState(student.config, params, student.positional)
        if hook is not None:
            hook(step, teacher, before, student)
        if config.teacher_granularity == PER_BATCH:
            teacher = student.copy()
        total_loss += loss * len(idx)
    if config.teacher_granularity == PER_EPOCH:
        teacher = student.copy()
    predictions = predict_batch(ids, mask, student).argmax(axis=-1)
    record = {
        "epoch": state.epoch + 1,
        "mean_loss": total_loss / len(y),
        "train_accuracy": float(np.mean(predictions == y)),
        "lambda": config.lam,
        "seed": config.seed,
    }
    new_state = TrainerState(student, teacher, opt, step, state.epoch + 1, [*state.history, record])
    return new_state, record


def run_header(model_config: ModelConfig, adam_config: AdamConfig, config: DistillConfig) -> dict:
    return {
        "seed": config.seed,
        "config_digest": config_digest(model_config.to_dict(), adam_config.to_dict(), config.to_dict()),
        "adam_config": adam_config.to_dict(),
        "distill_config": config.to_dict(),
    }


def initial_state(model_config: ModelConfig, seed: int) -> TrainerState:
    student = init_model(model_config, derive_seed(seed, "init"))
    return TrainerState(student, student.copy(), AdamState.zeros_like(student.params))


def state_from_checkpoint(ckpt: Checkpoint) -> TrainerState:
    if ckpt.teacher is None or ckpt.optimizer is None:
        raise ValueError("checkpoint lacks teacher/optimizer state needed to resume")
    meta = ckpt.meta
    return TrainerState(ckpt.model.copy(), ckpt.teacher.copy(), ckpt.optimizer.copy(),
                        meta["step"], meta["epoch"], list(meta["history"]))


def to_checkpoint(state: TrainerState, vocab: Vocabulary, adam_config: AdamConfig, config: DistillConfig) -> Checkpoint:
    meta = run_header(state.student.config, adam_config, config)
    meta.update(step=state.step, epoch=state.epoch, history=state.history)
    return Checkpoint(state.student, vocab, state.teacher, state.optimizer, meta)


def train(data, vocab: Vocabulary, model_config: ModelConfig, adam_config: AdamConfig, config: DistillConfig,
          distillation: bool = True, resume: Checkpoint | None = None, hook: StepHook | None = None,
          on_epoch: Callable[[TrainerState], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Train from a seeded initialization (or resume) up to ``config.epochs`` epochs."""
    arrays = as_arrays(data)
    if len(arrays[2]) == 0:
        raise ValueError("training data is empty")
    if model_config.vocab_size != vocab.size:
        raise ValueError("model vocab_size does not match the vocabulary")
    state = initial_state(model_config, config.seed) if resume is None else state_from_checkpoint(resume)
    while state.epoch < config.epochs:
        state, _ = train_epoch(state, arrays, adam_config, config, distillation, hook)
        if on_epoch is not None:
            on_epoch(state)
    return to_checkpoint(state, vocab, adam_config, config), state.history


def examples_from(seqs: Sequence[TokenSequence], labels: Sequence[int]) -> list[TrainingExample]:
    return [TrainingExample(s, int(y)) for s, y in zip(seqs, labels)]
