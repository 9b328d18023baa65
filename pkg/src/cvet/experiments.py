"""Glue between records, the models and the cross-validation driver."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from cvet import baselines
from cvet.distill import DistillConfig, train
from cvet.evaluation import FoldReport, Trainer, cross_validate, paired_t_test, METRICS, SignificanceResult
from cvet.model import ModelConfig, predict_batch
from cvet.optimizer import AdamConfig
from cvet.text_pipeline import (
    DEFAULT_MAX_LEN,
    DEFAULT_MIN_FREQUENCY,
    CVERecord,
    FoldAssignment,
    Vocabulary,
    build_vocabulary,
    encode,
    preprocess,
    stack_sequences,
)

VARIANTS = ("cvet", "lambda0", "no_bias_correction", "naive_bayes", "logreg")


@dataclass(frozen=True)
class TransformerSettings:
    """Architecture knobs; vocab_size is filled in once a vocabulary exists."""

    max_len: int = DEFAULT_MAX_LEN
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    dropout_rate: float = 0.1

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **dataclasses.asdict(self))


@dataclass(frozen=True)
class BaselineSettings:
    nb_smoothing: float = 1.0
    logreg_learning_rate: float = 0.5
    logreg_l2: float = 1e-4
    logreg_iterations: int = 300


@dataclass
class Corpus:
    """Preprocessed records: tokens computed once, labels as codes."""

    records: list[CVERecord]
    tokens: list[list[str]] = field(init=False)
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.tokens = [preprocess(r.description) for r in self.records]
        if any(r.tactic is None for r in self.records):
            raise ValueError("every record needs a tactic label")
        self.labels = np.array([int(r.tactic) for r in self.records], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def empty_count(self) -> int:
        return sum(1 for t in self.tokens if not t)

    def vocabulary(self, indices: Sequence[int] | None = None, min_frequency: int = DEFAULT_MIN_FREQUENCY) -> Vocabulary:
        idx = range(len(self)) if indices is None else indices
        return build_vocabulary((self.tokens[i] for i in idx), min_frequency)

    def arrays(self, vocab: Vocabulary, max_len: int, indices: Sequence[int] | None = None):
        idx = range(len(self)) if indices is None else indices
        ids, mask = stack_sequences([encode(self.tokens[i], vocab, max_len) for i in idx])
        return ids, mask, self.labels[np.asarray(list(idx), dtype=np.int64)]


def train_transformer(corpus: Corpus, indices: Sequence[int], settings: TransformerSettings,
                      adam: AdamConfig, distill: DistillConfig, min_frequency: int = DEFAULT_MIN_FREQUENCY,
                      distillation: bool = True):
    vocab = corpus.vocabulary(indices, min_frequency)
    data = corpus.arrays(vocab, settings.max_len, indices)
    return train(data, vocab, settings.model_config(vocab.size), adam, distill, distillation)


def transformer_trainer(corpus: Corpus, settings: TransformerSettings, adam: AdamConfig, distill: DistillConfig,
                        min_frequency: int = DEFAULT_MIN_FREQUENCY) -> Trainer:
    def fit(train_idx: np.ndarray, seed: int):
        ckpt, _ = train_transformer(corpus, train_idx, settings, adam, dataclasses.replace(distill, seed=seed),
                                    min_frequency)

        def predictor(test_idx: np.ndarray) -> np.ndarray:
            ids, mask, _ = corpus.arrays(ckpt.vocab, settings.max_len, test_idx)
            return predict_batch(ids, mask, ckpt.model).argmax(axis=-1)

        return predictor

    return fit


def _bow(corpus: Corpus, vocab: Vocabulary, indices) -> list[dict[int, int]]:
    return [baselines.bow_features(vocab.id_of(t) for t in corpus.tokens[i]) for i in indices]


def naive_bayes_trainer(corpus: Corpus, settings: BaselineSettings = BaselineSettings(),
                        min_frequency: int = DEFAULT_MIN_FREQUENCY) -> Trainer:
    def fit(train_idx: np.ndarray, seed: int):
        vocab = corpus.vocabulary(train_idx, min_frequency)
        model = baselines.nb_train(_bow(corpus, vocab, train_idx), corpus.labels[train_idx], vocab.size,
                                   settings.nb_smoothing)

        def predictor(test_idx):
            X = baselines.bow_matrix(_bow(corpus, vocab, test_idx), vocab.size)
            return baselines.nb_log_posteriors(model, X).argmax(axis=1)

        return predictor

    return fit


def logreg_trainer(corpus: Corpus, settings: BaselineSettings = BaselineSettings(),
                   min_frequency: int = DEFAULT_MIN_FREQUENCY) -> Trainer:
    def fit(train_idx: np.ndarray, seed: int):
        vocab = corpus.vocabulary(train_idx, min_frequency)
        model = baselines.logreg_train(_bow(corpus, vocab, train_idx), corpus.labels[train_idx], vocab.size,
                                       settings.logreg_learning_rate, settings.logreg_l2,
                                       settings.logreg_iterations, seed)

        def predictor(test_idx):
            X = baselines.bow_matrix(_bow(corpus, vocab, test_idx), vocab.size)
            return baselines.logreg_probabilities(model, X).argmax(axis=1)

        return predictor

    return fit


def external_trainer(corpus: Corpus, predictions: dict[str, int]) -> Trainer:
    """Harness-only variant: replays predictions produced outside this package."""
    missing = [r.cve_id for r in corpus.records if r.cve_id not in predictions]
    if missing:
        raise ValueError(f"external predictions missing {len(missing)} records, e.g. {missing[0]}")

    def fit(train_idx, seed):
        return lambda test_idx: np.array([predictions[corpus.records[i].cve_id] for i in test_idx])

    return fit


def variant_trainers(corpus: Corpus, variants: Sequence[str], settings: TransformerSettings, adam: AdamConfig,
                     distill: DistillConfig, baseline: BaselineSettings = BaselineSettings(),
                     min_frequency: int = DEFAULT_MIN_FREQUENCY) -> dict[str, Trainer]:
    out = {}
    for name in variants:
        if name == "cvet":
            out[name] = transformer_trainer(corpus, settings, adam, distill, min_frequency)
        elif name == "lambda0":
            out[name] = transformer_trainer(corpus, settings, adam, dataclasses.replace(distill, lam=0.0),
                                            min_frequency)
        elif name == "no_bias_correction":
            out[name] = transformer_trainer(corpus, settings, dataclasses.replace(adam, bias_correction=False),
                                            distill, min_frequency)
        elif name == "naive_bayes":
            out[name] = naive_bayes_trainer(corpus, baseline, min_frequency)
        elif name == "logreg":
            out[name] = logreg_trainer(corpus, baseline, min_frequency)
        else:
            raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")
    return out


def run_variants(corpus: Corpus, folds: FoldAssignment, trainers: dict[str, Trainer], seed: int,
                 progress: Callable[[str, int], None] | None = None) -> dict[str, list[FoldReport]]:
    """Every variant sees the same folds and the same per-fold seeds."""
    reports = {}
    for name, fit in trainers.items():
        cb = None if progress is None else (lambda fold, name=name: progress(name, fold))
        reports[name] = cross_validate(corpus.labels, folds, fit, seed, cb)
    return reports


def significance(reports: dict[str, list[FoldReport]], reference: str = "cvet") -> list[SignificanceResult | tuple]:
    """Paired t-tests of ``reference`` against every other variant, per metric."""
    rows = []
    if reference not in reports:
        return rows
    for other, other_reports in reports.items():
        if other == reference:
            continue
        for metric in METRICS:
            a = [r.metric(metric) for r in reports[reference]]
            b = [r.metric(metric) for r in other_reports]
            rows.append((metric, paired_t_test(a, b, reference, other)))
    return rows


def mean_metric(reports: Sequence[FoldReport], metric: str) -> float:
    return float(np.mean([r.metric(metric) for r in reports]))
