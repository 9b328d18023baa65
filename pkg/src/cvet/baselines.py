"""Bag-of-words multinomial naive Bayes and softmax logistic regression."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from cvet.numerics import softmax
from cvet.text_pipeline import N_CLASSES, PAD_ID, UNK_ID, Tactic


def bow_features(ids: Iterable[int], count_unk: bool = False) -> dict[int, int]:
    """Term counts over token ids; PAD never counts, UNK only on request."""
    skip = {PAD_ID} if count_unk else {PAD_ID, UNK_ID}
    return dict(Counter(int(i) for i in ids if int(i) not in skip))


def bow_matrix(vectors: Sequence[dict[int, int]], vocab_size: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for r, vec in enumerate(vectors):
        for c, n in vec.items():
            if not 0 <= c < vocab_size:
                raise ValueError(f"token id {c} outside vocabulary of size {vocab_size}")
            rows.append(r)
            cols.append(c)
            vals.append(n)
    return sp.csr_matrix((np.asarray(vals, dtype=np.float64), (rows, cols)), shape=(len(vectors), vocab_size))


@dataclass(frozen=True)
class NaiveBayesModel:
    log_prior: np.ndarray
    log_likelihood: np.ndarray  # (n_classes, vocab_size)
    smoothing: float


def nb_train(vectors: Sequence[dict[int, int]], labels: Sequence[int], vocab_size: int,
             smoothing: float = 1.0, n_classes: int = N_CLASSES) -> NaiveBayesModel:
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    y = np.asarray(labels, dtype=np.int64)
    class_counts = np.bincount(y, minlength=n_classes)
    if np.any(class_counts == 0):
        missing = [int(c) for c in np.flatnonzero(class_counts == 0)]
        raise ValueError(f"classes absent from training data: {missing}")
    X = bow_matrix(vectors, vocab_size)
    onehot = sp.csr_matrix((np.ones(len(y)), (y, np.arange(len(y)))), shape=(n_classes, len(y)))
    token_counts = np.asarray((onehot @ X).todense()) + smoothing
    log_likelihood = np.log(token_counts) - np.log(token_counts.sum(axis=1, keepdims=True))
    return NaiveBayesModel(np.log(class_counts / class_counts.sum()), log_likelihood, smoothing)


def nb_log_posteriors(model: NaiveBayesModel, X: sp.csr_matrix) -> np.ndarray:
    joint = X @ model.log_likelihood.T + model.log_prior
    return joint - np.logaddexp.reduce(joint, axis=1, keepdims=True)


def nb_predict(model: NaiveBayesModel, vector: dict[int, int]) -> tuple[int, np.ndarray]:
    post = nb_log_posteriors(model, bow_matrix([vector], model.log_likelihood.shape[1]))[0]
    return int(np.argmax(post)), post


@dataclass(frozen=True)
class LogRegModel:
    weights: np.ndarray  # (vocab_size, n_classes)
    bias: np.ndarray
    losses: tuple[float, ...] = ()


def logreg_objective(W: np.ndarray, b: np.ndarray, X, y: np.ndarray, l2: float):
    """Mean softmax cross-entropy plus ``l2/2 * ||W||^2`` and its gradients."""
    n = X.shape[0]
    logits = np.asarray(X @ W) + b
    P = softmax(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(n), y]) + 0.5 * l2 * np.sum(W * W))
    P[np.arange(n), y] -= 1.0
    P /= n
    return loss, np.asarray(X.T @ P) + l2 * W, P.sum(axis=0)


def logreg_train(vectors: Sequence[dict[int, int]], labels: Sequence[int], vocab_size: int,
                 learning_rate: float = 0.5, l2: float = 1e-4, iterations: int = 300,
                 seed: int = 0, n_classes: int = N_CLASSES) -> LogRegModel:
    """Full-batch gradient descent from zero weights (``seed`` is accepted for a
    uniform trainer signature; zero initialization leaves nothing random)."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    X = bow_matrix(vectors, vocab_size)
    y = np.asarray(labels, dtype=np.int64)
    W = np.zeros((vocab_size, n_classes))
    b = np.zeros(n_classes)
    losses = []
    for _ in range(iterations):
        loss, dW, db = logreg_objective(W, b, X, y, l2)
        losses.append(loss)
        W = W - learning_rate * dW
        b = b - learning_rate * db
    return LogRegModel(W, b, tuple(losses))


def logreg_probabilities(model: LogRegModel, X) -> np.ndarray:
    return softmax(np.asarray(X @ model.weights) + model.bias)


def logreg_predict(model: LogRegModel, vector: dict[int, int]) -> tuple[int, np.ndarray]:
    probs = logreg_probabilities(model, bow_matrix([vector], model.weights.shape[0]))[0]
    return int(np.argmax(probs)), probs


def load_external_predictions(path: str) -> dict[str, int]:
    """Read ``cve_id,predicted_tactic`` rows produced by an outside model."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["cve_id"]] = int(Tactic.parse(row["predicted_tactic"]))
    return out
