"""Fixed-width text features from spotted words."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .embeddings import EmbeddingTable, normalize_token

MIN_WORD_LENGTH = 3


@dataclass(frozen=True)
class SpottedWord:
    text: str
    score: float

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("spotted word text must be non-empty")
        if not math.isfinite(self.score):
            raise ValueError(f"spotted word {self.text!r} has non-finite score")


@dataclass
class TextFeature:
    matrix: np.ndarray  # t_dim x n_max, column i is the i-th retained word
    mask: np.ndarray  # n_max booleans, valid columns first
    words: list[str]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def filter_words(words: Iterable[SpottedWord]) -> list[SpottedWord]:
    # short recognitions are mostly false positives
    return [w for w in words if len(w.text.strip()) >= MIN_WORD_LENGTH]


def retained_words(words: Iterable[SpottedWord], table: EmbeddingTable) -> list[SpottedWord]:
    """Filtered, in-vocabulary words sorted by score (desc), ties by text then input order."""
    kept = [w for w in filter_words(words) if table.lookup(w.text) is not None]
    return sorted(kept, key=lambda w: (-w.score, normalize_token(w.text)))


def compute_nmax(word_lists: Sequence[Sequence[SpottedWord]], table: EmbeddingTable) -> int:
    """Largest retained-word count over the training samples (at least 1)."""
    if len(word_lists) == 0:
        raise ValueError("compute_nmax needs at least one training sample")
    return max(1, max(len(retained_words(ws, table)) for ws in word_lists))


def build_text_feature(words: Iterable[SpottedWord], table: EmbeddingTable, n_max: int) -> TextFeature:
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    kept = retained_words(words, table)[:n_max]
    matrix = np.zeros((table.dim, n_max))
    mask = np.zeros(n_max, dtype=bool)
    for i, w in enumerate(kept):
        matrix[:, i] = table.lookup(w.text)
        mask[i] = True
    return TextFeature(matrix, mask, [w.text for w in kept])


def oov_count(words: Iterable[SpottedWord], table: EmbeddingTable) -> int:
    return sum(1 for w in filter_words(words) if table.lookup(w.text) is None)
