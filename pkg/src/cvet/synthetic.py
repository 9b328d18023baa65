"""Synthetic labeled corpora with class-distinctive keywords."""

from __future__ import annotations

import numpy as np

from cvet.numerics import make_rng
from cvet.text_pipeline import N_CLASSES, CVERecord, Tactic, default_stopwords, preprocess

_CONSONANTS = "bdfgklmnprtvz"
_VOWELS = "aiou"


def pseudo_words(count: int, seed: int, syllables: int = 3) -> list[str]:
    """Distinct consonant-vowel words; ending in a vowel keeps them clear of every suffix rule."""
    rng = make_rng(seed, "words")
    stop = default_stopwords()
    words: list[str] = []
    seen = set()
    while len(words) < count:
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(syllables))
        if w not in seen and w not in stop and preprocess(w) == [w]:
            seen.add(w)
            words.append(w)
    return words


def keyword_corpus(n_docs: int, seed: int = 0, keywords_per_class: int = 6, fillers: int = 80,
                   keywords_per_doc: tuple[int, int] = (2, 4), fillers_per_doc: tuple[int, int] = (4, 10),
                   n_classes: int = N_CLASSES) -> list[CVERecord]:
    """Balanced corpus: document ``i`` has class ``i % n_classes``, a few of that
    class's keywords and shared filler words, shuffled."""
    vocab = pseudo_words(n_classes * keywords_per_class + fillers, seed)
    keywords = [vocab[c * keywords_per_class:(c + 1) * keywords_per_class] for c in range(n_classes)]
    filler = vocab[n_classes * keywords_per_class:]
    rng = make_rng(seed, "docs")
    records = []
    for i in range(n_docs):
        cls = i % n_classes
        n_kw = int(rng.integers(keywords_per_doc[0], keywords_per_doc[1] + 1))
        n_fill = int(rng.integers(fillers_per_doc[0], fillers_per_doc[1] + 1))
        words = list(rng.choice(keywords[cls], size=n_kw)) + list(rng.choice(filler, size=n_fill))
        rng.shuffle(words)
        records.append(CVERecord(f"SYN-{seed}-{i:05d}", " ".join(words), Tactic(cls)))
    return records
