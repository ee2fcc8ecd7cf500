"""Deterministic synthetic text corpus for offline training runs and tests.

Produces English-like prose with a Zipf-shaped vocabulary so a byte-level
language model has real structure to learn without any downloaded data.
"""

from __future__ import annotations

import numpy as np

_WORDS = (
    "the of and to in is that it was for on are as with his they at be this "
    "have from or had by word but not what all were when your can said there "
    "use each which she how their will other about out many then them these "
    "some her would make like him into time has look two more write go see "
    "number no way could people my than first water been call who oil its now "
    "find long down day did get come made may part over new sound take only "
    "little work know place year live me back give most very after thing our "
    "just name good sentence man think say great where help through much "
    "before line right too mean old any same tell boy follow came want show "
    "also around form three small set put end does another well large must "
    "big even such because turn here why ask went men read need land "
    "different home us move try kind hand picture again change off play spell "
    "air away animal house point page letter mother answer found study still "
    "learn should america world"
).split()


def make_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """At least ``n_bytes`` of sentence-structured pseudo-text."""
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, len(_WORDS) + 1, dtype=np.float64)
    probs = 1.0 / (ranks + 2.7)
    probs /= probs.sum()
    pieces = []
    size = 0
    while size < n_bytes:
        length = int(rng.integers(4, 13))
        words = rng.choice(len(_WORDS), size=length, p=probs)
        sentence = " ".join(_WORDS[w] for w in words)
        sentence = sentence[0].upper() + sentence[1:] + ". "
        if rng.random() < 0.08:
            sentence += "\n"
        pieces.append(sentence)
        size += len(sentence)
    return "".join(pieces).encode("ascii")
