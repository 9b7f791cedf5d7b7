"""Pyramidal histogram of characters (PHOC) word encoding.

Layout of the 604-bit vector::

    [level 2 | level 3 | level 4 | level 5]   unigrams, 14 regions x 36 symbols
    [level 2]                                 bigrams,   2 regions x 50 bigrams

Inside each level block bits are region-major, symbol-minor:
``offset(level) + region * n_symbols + symbol``.

A character at position k of an n-character word occupies [k/n, (k+1)/n].
It belongs to a region when the overlap covers at least half of its
occupancy (ties count as membership). Bigrams occupy [k/n, (k+2)/n].
Everything is done in integer units of 1/(n*L) so ties are exact.
"""

from __future__ import annotations

import string
from functools import lru_cache

import numpy as np

ALPHABET = string.ascii_lowercase + string.digits
UNIGRAM_LEVELS = (2, 3, 4, 5)
BIGRAM_LEVELS = (2,)

# 50 most frequent English bigrams, the usual PHOC companion list.
BIGRAMS = (
    "th", "he", "in", "er", "an", "re", "es", "on", "st", "nt",
    "en", "at", "ed", "nd", "to", "or", "ea", "ti", "ar", "te",
    "ng", "al", "it", "as", "is", "ha", "et", "se", "ou", "of",
    "le", "sa", "ve", "ro", "ra", "ri", "hi", "ne", "me", "de",
    "co", "ta", "ec", "si", "ll", "so", "na", "li", "la", "el",
)

_SYMBOL = {c: i for i, c in enumerate(ALPHABET)}
_BIGRAM = {b: i for i, b in enumerate(BIGRAMS)}
UNIGRAM_WIDTH = sum(UNIGRAM_LEVELS) * len(ALPHABET)
PHOC_WIDTH = UNIGRAM_WIDTH + sum(BIGRAM_LEVELS) * len(BIGRAMS)

assert len(BIGRAMS) == 50 and len(set(BIGRAMS)) == 50
assert PHOC_WIDTH == 604


def filter_word(word: str) -> str:
    return "".join(c for c in word.lower() if c in _SYMBOL)


@lru_cache(maxsize=None)
def _regions_hit(start: int, length: int, n: int, level: int) -> tuple[int, ...]:
    """Regions of ``level`` covering >= half of the span [start, start+length) in 1/(n*level) units.

    Region r spans [r*n, (r+1)*n).
    """
    hits = []
    end = start + length
    for r in range(start // n, min(level, (end - 1) // n + 1)):
        overlap = min(end, (r + 1) * n) - max(start, r * n)
        if 2 * overlap >= length:
            hits.append(r)
    return tuple(hits)


def phoc_encode(word: str) -> np.ndarray:
    """Binary PHOC vector (float64 0/1 entries) of length 604."""
    w = filter_word(word)
    out = np.zeros(PHOC_WIDTH, dtype=np.float64)
    n = len(w)
    if n == 0:
        return out
    offset = 0
    for level in UNIGRAM_LEVELS:
        for k, ch in enumerate(w):
            for r in _regions_hit(k * level, level, n, level):
                out[offset + r * len(ALPHABET) + _SYMBOL[ch]] = 1.0
        offset += level * len(ALPHABET)
    for level in BIGRAM_LEVELS:
        for k in range(n - 1):
            idx = _BIGRAM.get(w[k:k + 2])
            if idx is None:
                continue
            for r in _regions_hit(k * level, 2 * level, n, level):
                out[offset + r * len(BIGRAMS) + idx] = 1.0
        offset += level * len(BIGRAMS)
    return out


def phoc_matrix(words) -> np.ndarray:
    words = list(words)
    if not words:
        return np.zeros((0, PHOC_WIDTH))
    return np.stack([phoc_encode(w) for w in words])
