"""``cvet`` command line: ingest, train, eval, classify, benchmark.

Exit codes: 0 ok, 1 bad configuration, 2 parse failure, 3 unknown tactic,
4 numeric failure, 5 checkpoint/vocabulary mismatch.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from cvet import experiments
from cvet.baselines import load_external_predictions
from cvet.checkpoint import Checkpoint, CheckpointError
from cvet.distill import DistillConfig, NumericError
from cvet.evaluation import METRICS, FoldError, FoldReport
from cvet.experiments import BaselineSettings, Corpus, TransformerSettings
from cvet.model import forward_batch
from cvet.numerics import softmax
from cvet.optimizer import AdamConfig
from cvet.synthetic import keyword_corpus
from cvet.text_pipeline import (
    GOLD_STANDARD_COUNTS,
    GOLD_STANDARD_TOTAL,
    RecordError,
    Tactic,
    UnknownTacticError,
    encode,
    preprocess,
    read_records,
    stack_sequences,
    stratified_folds,
)

log = logging.getLogger("cvet")

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_LABEL, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str | None = None
    format: str | None = None
    out: str = "runs/default"
    seed: int = 0
    folds: int = 10
    # text pipeline
    min_frequency: int = 2
    max_len: int = 128
    # model
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    dropout: float = 0.1
    # optimizer
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    bias_correction: bool = True
    correction_form: str = "standard"
    # self-distillation
    lam: float = 1.0
    teacher_granularity: str = "per_batch"
    mse_space: str = "logits"
    epochs: int = 10
    batch_size: int = 32
    # evaluation
    variants: list[str] = field(default_factory=lambda: list(experiments.VARIANTS))
    external: dict[str, str] = field(default_factory=dict)
    nb_smoothing: float = 1.0
    logreg_learning_rate: float = 0.5
    logreg_l2: float = 1e-4
    logreg_iterations: int = 300

    def transformer(self) -> TransformerSettings:
        return TransformerSettings(self.max_len, self.d_model, self.n_heads, self.n_layers, self.d_ff, self.dropout)

    def adam(self) -> AdamConfig:
        return AdamConfig(self.alpha, self.beta1, self.beta2, self.adam_epsilon, self.bias_correction,
                          self.correction_form)

    def distill(self) -> DistillConfig:
        return DistillConfig(self.lam, self.teacher_granularity, self.epochs, self.batch_size, self.seed,
                             self.mse_space)

    def baselines(self) -> BaselineSettings:
        return BaselineSettings(self.nb_smoothing, self.logreg_learning_rate, self.logreg_l2,
                                self.logreg_iterations)

    def validate(self, need_data: bool = True) -> None:
        if need_data:
            if not self.data:
                raise ConfigError("no data path given (config key 'data' or --data)")
            if not Path(self.data).is_file():
                raise ConfigError(f"data file {self.data} does not exist")
        for path in self.external.values():
            if not Path(path).is_file():
                raise ConfigError(f"external prediction file {path} does not exist")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        unknown = set(self.variants) - set(experiments.VARIANTS)
        if unknown:
            raise ConfigError(f"unknown variants {sorted(unknown)}")
        try:
            self.transformer().model_config(2)
            self.adam()
            self.distill()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_ALIASES = {"lambda": "lam", "lr": "alpha", "learning_rate": "alpha", "dropout_rate": "dropout"}


def _normalize_key(key: str) -> str:
    key = key.replace("-", "_")
    return _ALIASES.get(key, key)


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    """Config file values first, then non-None flag overrides."""
    values: dict = {}
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must be a flat key: value mapping")
        values.update({_normalize_key(str(k)): v for k, v in loaded.items()})
    values.update({_normalize_key(k): v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**values)


def _write_config_echo(cfg: RunConfig, out: Path, command: str) -> None:
    echo = {"command": command, **dataclasses.asdict(cfg)}
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_corpus(cfg: RunConfig) -> Corpus:
    return Corpus(read_records(cfg.data, cfg.format))


# --- ingest ------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    records = read_records(args.input, args.format)
    counts = {t: 0 for t in Tactic}
    unlabeled = 0
    empty = 0
    for rec in records:
        if rec.tactic is None:
            unlabeled += 1
        else:
            counts[rec.tactic] += 1
        if not preprocess(rec.description):
            empty += 1
    total = len(records)
    if total == 0:
        log.warning("input %s contains no records", args.input)
    lines = [f"{'ATT&CK tactic':<22}{'count':>8}"]
    lines += [f"{t.display_name:<22}{counts[t]:>8}" for t in Tactic]
    lines.append(f"{'Total':<22}{total:>8}")
    if unlabeled:
        lines.append(f"{'Unlabeled':<22}{unlabeled:>8}")
    lines.append(f"{'Empty after preprocessing':<26}{empty:>4}")
    matches = total == GOLD_STANDARD_TOTAL and all(counts[t] == n for t, n in GOLD_STANDARD_COUNTS.items())
    lines.append(f"Matches gold-standard distribution: {'yes' if matches else 'no'}")
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = {"counts": {t.name: counts[t] for t in Tactic}, "total": total, "unlabeled": unlabeled,
                  "empty_after_preprocessing": empty, "matches_gold_standard": matches}
        (out / "ingest.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


# --- train -------------------------------------------------------------------------


def write_history(history: Sequence[dict], path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "mean_loss", "train_accuracy", "lambda", "seed"])
    for rec in history:
        writer.writerow([rec["epoch"], repr(rec["mean_loss"]), repr(rec["train_accuracy"]), repr(rec["lambda"]),
                         rec["seed"]])
    path.write_text(buf.getvalue(), encoding="utf-8")


def cmd_train(args, cfg: RunConfig) -> int:
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_echo(cfg, out, "train")
    corpus = _load_corpus(cfg)
    if len(corpus) == 0:
        raise ConfigError("training data is empty")
    started = time.perf_counter()
    try:
        ckpt, history = experiments.train_transformer(
            corpus, range(len(corpus)), cfg.transformer(), cfg.adam(), cfg.distill(), cfg.min_frequency,
            distillation=not args.no_distill)
    except NumericError as exc:
        (out / "failure.json").write_text(json.dumps({"step": exc.step, "error": str(exc)}) + "\n", encoding="utf-8")
        log.error("numeric failure at step %d: %s", exc.step, exc)
        return EXIT_NUMERIC
    ckpt.save(out / "checkpoint.bin")
    write_history(history, out / "history.csv")
    last = history[-1]
    log.info("trained %d epochs in %.1fs; final loss %.4f, train accuracy %.4f",
             len(history), time.perf_counter() - started, last["mean_loss"], last["train_accuracy"])
    return EXIT_OK


# --- eval --------------------------------------------------------------------------

TABLE_GROUPS = {
    "naive_bayes": ("Classical Machine Learning", "Naive Bayes"),
    "logreg": ("Classical Machine Learning", "Logistic Regression"),
    "lambda0": ("Ablation", "Fine-tuning only (lambda=0)"),
    "no_bias_correction": ("Ablation", "No bias correction"),
    "cvet": ("Self-Distillation", "CVET"),
}


def _stars(p: float) -> str:
    return "***" if p < 0.001 else "**" if p < 0.01 else "*" if p < 0.05 else ""


def summary_table(reports: dict[str, list[FoldReport]], tests: list, reference: str = "cvet") -> str:
    pvals = {(res.label_b, metric): res.p_value for metric, res in tests}
    header = f"{'Model Type':<28}{'Model':<30}{'Accuracy':>13}{'Precision':>13}{'Recall':>13}{'F1-score':>13}"
    lines = [header, "-" * len(header)]
    order = sorted(reports, key=lambda n: (list(TABLE_GROUPS).index(n) if n in TABLE_GROUPS else -1, n))
    for name in order:
        group, label = TABLE_GROUPS.get(name, ("External", name))
        cells = []
        for metric in METRICS:
            value = experiments.mean_metric(reports[name], metric)
            stars = "" if name == reference else _stars(pvals.get((name, metric), 1.0))
            cells.append(f"{100 * value:.2f}% {stars:<3}")
        lines.append(f"{group:<28}{label:<30}" + "".join(f"{c:>13}" for c in cells))
    lines.append("(*: p < 0.05, **: p < 0.01, ***: p < 0.001; paired t-tests against "
                 f"{reference} over {len(next(iter(reports.values())))} folds)")
    return "\n".join(lines)


def write_fold_reports(reports: dict[str, list[FoldReport]], path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "fold", "accuracy", "macro_p", "macro_r", "macro_f1"])
    for name, reps in reports.items():
        for r in reps:
            writer.writerow([name, r.fold_index, repr(r.accuracy), repr(r.macro_precision), repr(r.macro_recall),
                             repr(r.macro_f1)])
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_significance(tests: list, path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model_a", "model_b", "metric", "t", "df", "p"])
    for metric, res in tests:
        writer.writerow([res.label_a, res.label_b, metric, repr(res.t_statistic), res.degrees_of_freedom,
                         repr(res.p_value)])
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_confusions(reports: dict[str, list[FoldReport]], path: Path) -> None:
    payload = {name: [r.confusion.tolist() for r in reps] for name, reps in reports.items()}
    path.write_text(json.dumps(payload) + "\n", encoding="utf-8")


def cmd_eval(args, cfg: RunConfig) -> int:
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_echo(cfg, out, "eval")
    corpus = _load_corpus(cfg)
    if len(corpus) == 0:
        raise ConfigError("evaluation data is empty")
    if corpus.empty_count:
        log.warning("%d records are empty after preprocessing (encoded as all-PAD)", corpus.empty_count)
    folds = stratified_folds(corpus.labels, cfg.folds, cfg.seed)
    trainers = experiments.variant_trainers(corpus, cfg.variants, cfg.transformer(), cfg.adam(), cfg.distill(),
                                            cfg.baselines(), cfg.min_frequency)
    for name, path in cfg.external.items():
        trainers[name] = experiments.external_trainer(corpus, load_external_predictions(path))
    started = time.perf_counter()
    try:
        reports = experiments.run_variants(
            corpus, folds, trainers, cfg.seed,
            progress=lambda name, fold: log.info("%s fold %d done (%.0fs)", name, fold,
                                                 time.perf_counter() - started))
    except FoldError as exc:
        if isinstance(exc.__cause__, NumericError):
            log.error("numeric failure: %s", exc)
            return EXIT_NUMERIC
        raise
    reference = "cvet" if "cvet" in reports else next(iter(reports))
    tests = experiments.significance(reports, reference)
    write_fold_reports(reports, out / "folds.csv")
    write_significance(tests, out / "significance.csv")
    write_confusions(reports, out / "confusion.json")
    table = summary_table(reports, tests, reference)
    (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


# --- classify ----------------------------------------------------------------------


def classify_records(ckpt: Checkpoint, records) -> list[dict]:
    seqs = [encode(preprocess(r.description), ckpt.vocab, ckpt.model.config.max_len) for r in records]
    if not seqs:
        return []
    ids, mask = stack_sequences(seqs)
    rows = []
    for start in range(0, len(seqs), 256):
        out = forward_batch(ids[start:start + 256], mask[start:start + 256], ckpt.model)
        probs = softmax(out.logits)
        for rec, p, degenerate in zip(records[start:start + 256], probs, out.degenerate):
            code = int(np.argmax(p))
            rows.append({"cve_id": rec.cve_id, "tactic": Tactic(code).name, "code": code,
                         "probabilities": [float(x) for x in p], "degenerate": bool(degenerate)})
    return rows


def cmd_classify(args) -> int:
    try:
        ckpt = Checkpoint.load(args.checkpoint)
    except CheckpointError as exc:
        log.error("cannot use checkpoint %s: %s", args.checkpoint, exc)
        return EXIT_CHECKPOINT
    if args.vocab_digest and args.vocab_digest != ckpt.vocab.digest():
        log.error("vocabulary digest %s does not match the checkpoint (%s)", args.vocab_digest, ckpt.vocab.digest())
        return EXIT_CHECKPOINT
    records = read_records(args.input, args.format, allow_empty=True)
    text = "".join(json.dumps(row, sort_keys=True) + "\n" for row in classify_records(ckpt, records))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- benchmark ---------------------------------------------------------------------


def cmd_benchmark(args, cfg: RunConfig) -> int:
    """Synthetic-corpus experiments: a small overfit run and a k-fold lambda sweep."""
    cfg.validate(need_data=False)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_echo(cfg, out, "benchmark")
    settings = cfg.transformer()

    overfit = Corpus(keyword_corpus(32, seed=cfg.seed))
    _, history = experiments.train_transformer(
        overfit, range(len(overfit)), dataclasses.replace(settings, dropout_rate=0.0), cfg.adam(),
        dataclasses.replace(cfg.distill(), epochs=args.overfit_epochs, batch_size=8), min_frequency=1)
    write_history(history, out / "overfit_history.csv")
    reached = next((r["epoch"] for r in history if r["train_accuracy"] >= 0.99), None)
    print(f"overfit: 32 docs, final train accuracy {history[-1]['train_accuracy']:.4f}, "
          f">=99% first reached at epoch {reached}")

    corpus = Corpus(keyword_corpus(args.docs, seed=cfg.seed + 1))
    folds = stratified_folds(corpus.labels, cfg.folds, cfg.seed)
    trainers = {}
    for lam in args.lambdas:
        name = "cvet" if lam == cfg.lam else f"lambda={lam:g}"
        trainers[name] = experiments.transformer_trainer(
            corpus, settings, cfg.adam(), dataclasses.replace(cfg.distill(), lam=lam), cfg.min_frequency)
    trainers["naive_bayes"] = experiments.naive_bayes_trainer(corpus, cfg.baselines(), cfg.min_frequency)
    trainers["logreg"] = experiments.logreg_trainer(corpus, cfg.baselines(), cfg.min_frequency)
    reports = experiments.run_variants(corpus, folds, trainers, cfg.seed)
    reference = "cvet" if "cvet" in reports else next(iter(reports))
    tests = experiments.significance(reports, reference)
    write_fold_reports(reports, out / "folds.csv")
    write_significance(tests, out / "significance.csv")
    table = summary_table(reports, tests, reference)
    (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


# --- entry point -------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file of key: value settings (flags win)")
    p.add_argument("--data", help="labeled JSON-lines or CSV input")
    p.add_argument("--format", choices=["jsonl", "csv"])
    p.add_argument("--lambda", dest="lam", type=float, help="distillation weight")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", help="output directory")


RUN_FLAGS = ("data", "format", "lam", "seed", "folds", "epochs", "batch_size", "max_len", "out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvet", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a dataset and print per-tactic counts")
    p.add_argument("input")
    p.add_argument("--format", choices=["jsonl", "csv"])
    p.add_argument("--out", help="directory for ingest.json")

    p = sub.add_parser("train", help="train a classifier and write a checkpoint")
    _add_run_flags(p)
    p.add_argument("--no-distill", action="store_true", help="plain fine-tuning path (no teacher)")

    p = sub.add_parser("eval", help="k-fold cross-validation of all configured variants")
    _add_run_flags(p)

    p = sub.add_parser("classify", help="label records with a trained checkpoint (JSON-lines out)")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--format", choices=["jsonl", "csv"])
    p.add_argument("--vocab-digest", help="expected vocabulary digest")
    p.add_argument("--out", help="write JSON-lines here instead of stdout")

    p = sub.add_parser("benchmark", help="synthetic overfit run and k-fold lambda sweep")
    _add_run_flags(p)
    p.add_argument("--docs", type=int, default=2000)
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.1, 0.5, 1.0])
    p.add_argument("--overfit-epochs", type=int, default=200)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "ingest":
            return cmd_ingest(args)
        if args.command == "classify":
            return cmd_classify(args)
        cfg = load_run_config(args.config, {k: getattr(args, k) for k in RUN_FLAGS})
        if args.command == "train":
            return cmd_train(args, cfg)
        if args.command == "eval":
            return cmd_eval(args, cfg)
        return cmd_benchmark(args, cfg)
    except UnknownTacticError as exc:
        log.error("%s", exc)
        return EXIT_LABEL
    except RecordError as exc:
        log.error("%s", exc)
        return EXIT_PARSE
    except FoldError as exc:
        if isinstance(exc.__cause__, UnknownTacticError):
            return EXIT_LABEL
        raise
    except (ConfigError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
