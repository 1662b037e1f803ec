"""Lexicon-based sentiment valence scoring.

A fixed ~200-word valence table ships with the package. The score of a
text is the mean valence of the words found in the lexicon; words outside
the lexicon contribute nothing, and a text with no lexicon words scores
exactly zero. Scores lie in [-1, 1].
"""

from __future__ import annotations

import json
import re
from functools import lru_cache
from importlib import resources

_WORD_RE = re.compile(r"[a-z']+")


@lru_cache(maxsize=1)
def load_lexicon() -> dict[str, float]:
    text = resources.files("toolsnare.data").joinpath("sentiment_lexicon.json").read_text()
    lexicon = json.loads(text)
    return {w.lower(): float(v) for w, v in lexicon.items()}


def sentiment(text: str, lexicon: dict[str, float] | None = None) -> float:
    """Valence of a text in [-1, 1]; 0 for empty or fully out-of-lexicon text."""
    lex = lexicon if lexicon is not None else load_lexicon()
    values = [lex[w] for w in _WORD_RE.findall(text.lower()) if w in lex]
    if not values:
        return 0.0
    score = sum(values) / len(values)
    return max(-1.0, min(1.0, score))
