"""Track logit scale and per-class accuracy while training with and without self-distillation.

With a per-batch teacher in inference mode and a dropout-active student, the
logit-space MSE term has a component along the all-ones logit direction,
which softmax (and so cross-entropy) ignores. Nothing pulls it back, and Adam
turns the small persistent gradient into full-size steps. This script makes
the resulting drift visible and compares the settings that remove it.

    python scripts/logit_drift.py --docs 1800 --epochs 20
"""

import argparse
import itertools

import numpy as np

from cvet.distill import DistillConfig, train
from cvet.experiments import Corpus, TransformerSettings
from cvet.model import forward_batch
from cvet.optimizer import AdamConfig
from cvet.synthetic import keyword_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--docs", type=int, default=1800)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--alpha", type=float, default=1e-3)
    ap.add_argument("--dropout", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    settings = TransformerSettings(max_len=16, d_model=32, n_heads=2, n_layers=2, d_ff=64,
                                   dropout_rate=args.dropout)
    corpus = Corpus(keyword_corpus(args.docs, seed=args.seed + 1))
    vocab = corpus.vocabulary()
    ids, mask, y = corpus.arrays(vocab, settings.max_len)
    runs = [(0.0, "logits", "per_batch")]
    runs += [(1.0, space, gran) for space, gran in itertools.product(("logits", "probs"), ("per_batch", "per_epoch"))]

    for lam, space, gran in runs:
        print(f"\nlambda={lam} mse_space={space} teacher={gran}")
        print(f"{'epoch':>5} {'loss':>9} {'train_acc':>9} {'mean|z|':>9} {'min class acc':>13}")

        def report(state):
            logits = forward_batch(ids, mask, state.student).logits
            pred = logits.argmax(axis=1)
            per_class = [float(np.mean(pred[y == c] == c)) for c in np.unique(y)]
            rec = state.history[-1]
            print(f"{state.epoch:>5} {rec['mean_loss']:>9.4f} {rec['train_accuracy']:>9.4f} "
                  f"{np.abs(logits).mean():>9.2f} {min(per_class):>13.2f}", flush=True)

        config = DistillConfig(lam=lam, teacher_granularity=gran, epochs=args.epochs, mse_space=space,
                               seed=args.seed)
        train((ids, mask, y), vocab, settings.model_config(vocab.size), AdamConfig(alpha=args.alpha), config,
              on_epoch=report)


if __name__ == "__main__":
    main()
