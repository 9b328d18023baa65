"""CVE record parsing, text normalization, vocabulary and fold assignment."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import IO, Iterable, Sequence

import numpy as np

from cvet.numerics import make_rng

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

DEFAULT_MIN_FREQUENCY = 2
DEFAULT_MAX_LEN = 128


class Tactic(enum.IntEnum):
    DefenseEvasion = 0
    Discovery = 1
    PrivilegeEscalation = 2
    Collection = 3
    LateralMovement = 4
    Impact = 5
    CredentialAccess = 6
    InitialAccess = 7
    Exfiltration = 8
    Execution = 9

    @property
    def display_name(self) -> str:
        return re.sub(r"(?<!^)(?=[A-Z])", " ", self.name)

    @classmethod
    def parse(cls, text: str) -> "Tactic":
        key = re.sub(r"[^a-z]", "", text.lower())
        for tactic in cls:
            if tactic.name.lower() == key:
                return tactic
        raise UnknownTacticError(text)


N_CLASSES = len(Tactic)
TACTIC_NAMES = [t.name for t in Tactic]

# Per-class counts of the gold-standard dataset (the prose elsewhere quotes
# 8,452 for Defense Evasion; the table figure is the one checked).
GOLD_STANDARD_COUNTS = {
    Tactic.DefenseEvasion: 8482,
    Tactic.Discovery: 6647,
    Tactic.PrivilegeEscalation: 5779,
    Tactic.Collection: 1748,
    Tactic.LateralMovement: 715,
    Tactic.Impact: 594,
    Tactic.CredentialAccess: 427,
    Tactic.InitialAccess: 309,
    Tactic.Exfiltration: 137,
    Tactic.Execution: 25,
}
GOLD_STANDARD_TOTAL = 24863


class RecordError(ValueError):
    """Malformed input row."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


class UnknownTacticError(ValueError):
    def __init__(self, value: str, row: int | None = None):
        self.value = value
        self.row = row
        where = "" if row is None else f"row {row}: "
        super().__init__(
            f"{where}unknown tactic {value!r}; valid names are: " + ", ".join(TACTIC_NAMES)
        )


@dataclass(frozen=True)
class CVERecord:
    cve_id: str
    description: str
    tactic: Tactic | None = None

    def __post_init__(self):
        if not self.cve_id:
            raise RecordError("empty cve_id")
        if not isinstance(self.description, str):
            raise RecordError(f"{self.cve_id}: description must be text")


def _record_from_row(row: dict, rownum: int, allow_empty: bool = False) -> CVERecord:
    if not isinstance(row, dict):
        raise RecordError("expected an object", rownum)
    cve_id = row.get("cve_id")
    description = row.get("description")
    if not isinstance(cve_id, str) or not cve_id.strip():
        raise RecordError("missing cve_id", rownum)
    if not isinstance(description, str) or not (allow_empty or description.strip()):
        raise RecordError("missing description", rownum)
    raw_tactic = row.get("tactic")
    tactic = None
    if raw_tactic not in (None, ""):
        try:
            tactic = Tactic.parse(str(raw_tactic))
        except UnknownTacticError:
            raise UnknownTacticError(str(raw_tactic), rownum) from None
    return CVERecord(cve_id.strip(), description, tactic)


def parse_cve_records(source: IO[bytes] | bytes, format: str = "jsonl", allow_empty: bool = False) -> list[CVERecord]:
    """Parse JSON-lines or CSV (header row) input into records, in input order.

    Row numbers in errors are 1-based; for CSV the header is row 1. Blank
    descriptions are rejected unless ``allow_empty`` (inference inputs).
    """
    data = source if isinstance(source, bytes) else source.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise RecordError(f"input is not valid UTF-8 ({exc})") from exc
    if format == "jsonl":
        records = []
        for rownum, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"invalid JSON ({exc.msg})", rownum) from exc
            records.append(_record_from_row(row, rownum, allow_empty))
        return records
    if format == "csv":
        reader = csv.DictReader(io.StringIO(text, newline=""))
        if reader.fieldnames is None:
            return []
        missing = {"cve_id", "description"} - set(reader.fieldnames)
        if missing:
            raise RecordError(f"CSV header lacks {sorted(missing)}", 1)
        records = []
        for row in reader:
            if None in row:
                raise RecordError("too many fields", reader.line_num)
            records.append(_record_from_row(row, reader.line_num, allow_empty))
        return records
    raise ValueError(f"unknown format {format!r} (expected jsonl or csv)")


def read_records(path: str, format: str | None = None, allow_empty: bool = False) -> list[CVERecord]:
    if format is None:
        format = "csv" if str(path).lower().endswith(".csv") else "jsonl"
    with open(path, "rb") as fh:
        return parse_cve_records(fh, format, allow_empty)


# --- normalization -----------------------------------------------------------


@lru_cache(maxsize=None)
def default_stopwords() -> frozenset[str]:
    text = resources.files("cvet").joinpath("data/stopwords.txt").read_text("utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip() and not w.startswith("#"))


@dataclass(frozen=True)
class LemmaRule:
    suffix: str
    replacement: str
    double: bool = False
    vowel: bool = False
    unless: tuple[str, ...] = ()


def parse_lemma_rules(text: str) -> tuple[LemmaRule, ...]:
    rules = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        suffix, replacement, *flags = line.split()
        kwargs: dict = {}
        for flag in flags:
            if flag == "double":
                kwargs["double"] = True
            elif flag == "vowel":
                kwargs["vowel"] = True
            elif flag.startswith("unless="):
                kwargs["unless"] = tuple(flag[len("unless="):].split(","))
            else:
                raise ValueError(f"bad lemma rule flag {flag!r}")
        rules.append(LemmaRule(suffix, "" if replacement == "-" else replacement, **kwargs))
    return tuple(rules)


@lru_cache(maxsize=None)
def default_lemma_rules() -> tuple[LemmaRule, ...]:
    text = resources.files("cvet").joinpath("data/lemma_rules.txt").read_text("utf-8")
    return parse_lemma_rules(text)


_VOWELS = set("aeiouy")
_KEEP_DOUBLE = set("lszf")


def _apply_rule(word: str, rule: LemmaRule) -> str | None:
    if len(word) < 4 or not word.endswith(rule.suffix):
        return None
    if any(word.endswith(u) for u in rule.unless):
        return None
    stem = word[: len(word) - len(rule.suffix)]
    if rule.vowel and not (_VOWELS & set(stem)):
        return None
    if rule.double and len(stem) >= 2 and stem[-1] == stem[-2] and stem[-1] not in _VOWELS | _KEEP_DOUBLE:
        stem = stem[:-1]
    out = stem + rule.replacement
    return out if len(out) >= 3 else None


def lemmatize(word: str, rules: Sequence[LemmaRule] | None = None,
              stopwords: frozenset[str] | None = None) -> str:
    """Rewrite ``word`` with the suffix rules until no rule applies.

    A lemma that lands on a stopword is discarded in favour of the original
    token, which keeps the whole pipeline idempotent.
    """
    rules = default_lemma_rules() if rules is None else rules
    current = word
    while True:
        for rule in rules:
            out = _apply_rule(current, rule)
            if out is not None:
                current = out
                break
        else:
            break
    if stopwords and current in stopwords:
        return word
    return current


_NON_ALNUM = re.compile(r"[^A-Za-z0-9]+")


def preprocess(text: str, stopwords: Iterable[str] | None = None,
               rules: Sequence[LemmaRule] | None = None) -> list[str]:
    """Strip non-alphanumerics, lowercase, split, drop stopwords, lemmatize."""
    stop = default_stopwords() if stopwords is None else frozenset(stopwords)
    tokens = _NON_ALNUM.sub(" ", text).lower().split()
    return [lemmatize(t, rules, stop) for t in tokens if t not in stop]


# --- vocabulary and encoding -------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    min_frequency: int = DEFAULT_MIN_FREQUENCY
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise ValueError("vocabulary must start with PAD and UNK")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.min_frequency).encode())
        for tok in self.tokens:
            h.update(b"\x00" + tok.encode("utf-8"))
        return h.hexdigest()


def build_vocabulary(corpus: Iterable[Sequence[str]], min_frequency: int = DEFAULT_MIN_FREQUENCY) -> Vocabulary:
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    counts: Counter[str] = Counter()
    for tokens in corpus:
        counts.update(tokens)
    kept = sorted((tok for tok, n in counts.items() if n >= min_frequency and tok not in (PAD_TOKEN, UNK_TOKEN)),
                  key=lambda tok: (-counts[tok], tok))
    return Vocabulary((PAD_TOKEN, UNK_TOKEN, *kept), min_frequency)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.mask):
            raise ValueError("ids and mask lengths differ")

    @property
    def max_len(self) -> int:
        return len(self.ids)

    @property
    def is_empty(self) -> bool:
        return not any(self.mask)


def encode(tokens: Sequence[str], vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.id_of(t) for t in tokens[:max_len]]
    n = len(ids)
    return TokenSequence(tuple(ids) + (PAD_ID,) * (max_len - n), (True,) * n + (False,) * (max_len - n))


def decode(seq: TokenSequence, vocab: Vocabulary) -> list[str]:
    """Tokens for real, in-vocabulary positions (PAD and UNK dropped)."""
    return [vocab.tokens[i] for i, m in zip(seq.ids, seq.mask) if m and i not in (PAD_ID, UNK_ID)]


def stack_sequences(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``(ids, mask)`` of shape (n, max_len)."""
    if not seqs:
        return np.zeros((0, 0), dtype=np.int64), np.zeros((0, 0), dtype=bool)
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    mask = np.array([s.mask for s in seqs], dtype=bool)
    return ids, mask


# --- folds ---------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignment: tuple[int, ...]

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.assignment) == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.assignment) != fold)

    def counts(self, labels: Sequence[int], n_classes: int = N_CLASSES) -> np.ndarray:
        """(n_classes, k) table of per-class records in each fold."""
        table = np.zeros((n_classes, self.k), dtype=np.int64)
        np.add.at(table, (np.asarray(labels, dtype=np.int64), np.asarray(self.assignment)), 1)
        return table


def stratified_folds(labels: Sequence[int], k: int = 10, seed: int = 0) -> FoldAssignment:
    """Shuffle each class with a seeded generator and deal it round-robin into ``k`` folds."""
    if k < 2:
        raise ValueError("k must be >= 2")
    labels = np.asarray(labels, dtype=np.int64)
    assignment = np.full(len(labels), -1, dtype=np.int64)
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            warnings.warn(f"class {int(cls)} has {len(members)} records, fewer than k={k}", stacklevel=2)
        rng = make_rng(seed, "folds", int(cls))
        order = members[rng.permutation(len(members))]
        assignment[order] = np.arange(len(order)) % k
    return FoldAssignment(k, tuple(int(a) for a in assignment))
