"""Synthetic dialogue corpora with planted attribute structure.

Four sub-populations:

* ``coherent``: the context carries a topic cue bigram and the response the
  matching answer bigram, so the pair shares key-phrases across turns.
* ``specific``: the response uses rare words.
* ``generic``: one of a handful of stock replies attached to many contexts.
* ``noise``: unrelated filler on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import write_corpus

FUNCTION_WORDS = (
    "i you it the a is do what that to and not know think like so we can have this are was my your"
).split()
GENERIC_REPLIES = (
    "i do not know .",
    "ok .",
    "yes , i think so .",
    "that is good .",
    "what do you mean ?",
)
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SyntheticPair:
    context: tuple[str, ...]
    response: str
    kind: str


def _make_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        syl = [rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(2)]
        w = "".join(syl)
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


class SyntheticLexicon:
    def __init__(self, seed: int = 0, n_topics: int = 15, n_rare: int = 60, n_filler: int = 30):
        rng = np.random.default_rng(seed)
        taken = set(FUNCTION_WORDS)
        self.cues = [tuple(_make_words(rng, 2, taken)) for _ in range(n_topics)]
        self.answers = [tuple(_make_words(rng, 2, taken)) for _ in range(n_topics)]
        self.rare = _make_words(rng, n_rare, taken)
        self.filler = _make_words(rng, n_filler, taken)


def make_synthetic_corpus(n: int = 2000, seed: int = 0, mix=(0.4, 0.25, 0.25, 0.1)) -> list[SyntheticPair]:
    """Sample ``n`` pairs; ``mix`` gives the coherent/specific/generic/noise proportions."""
    rng = np.random.default_rng(seed)
    lex = SyntheticLexicon(seed)
    kinds = ("coherent", "specific", "generic", "noise")

    def pick(seq, k=1):
        return [seq[i] for i in rng.integers(0, len(seq), size=k)]

    def filler_utterance(k_lo=3, k_hi=6):
        k = int(rng.integers(k_lo, k_hi + 1))
        words = [w if rng.random() < 0.5 else f for w, f in zip(pick(FUNCTION_WORDS, k), pick(lex.filler, k))]
        return " ".join(words) + " ."

    pairs = []
    for kind in rng.choice(kinds, size=n, p=np.asarray(mix) / sum(mix)):
        context = [filler_utterance()] if rng.random() < 0.5 else []
        if kind == "coherent":
            t = int(rng.integers(len(lex.cues)))
            cue = " ".join(lex.cues[t])
            context.append(f"{' '.join(pick(FUNCTION_WORDS, 2))} {cue} {pick(lex.filler)[0]} ?")
            response = f"{pick(FUNCTION_WORDS)[0]} {' '.join(lex.answers[t])} {pick(FUNCTION_WORDS)[0]} ."
        elif kind == "specific":
            context.append(filler_utterance())
            k = int(rng.integers(2, 4))
            response = " ".join(pick(FUNCTION_WORDS, 1) + pick(lex.rare, k)) + " ."
        elif kind == "generic":
            context.append(filler_utterance())
            response = pick(GENERIC_REPLIES)[0]
        else:
            context.append(filler_utterance())
            response = filler_utterance(2, 4)
        pairs.append(SyntheticPair(tuple(context), response, str(kind)))
    return pairs


def write_synthetic_splits(out_dir: str | Path, n: int = 2000, seed: int = 0, valid_fraction: float = 0.1) -> dict[str, Path]:
    """Write ``train.jsonl`` and ``valid.jsonl`` (the last ``valid_fraction`` of the sample)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = make_synthetic_corpus(n, seed)
    n_valid = max(1, int(round(n * valid_fraction)))
    paths = {"train": out / "train.jsonl", "valid": out / "valid.jsonl"}
    write_corpus(((p.context, p.response) for p in pairs[:-n_valid]), paths["train"])
    write_corpus(((p.context, p.response) for p in pairs[-n_valid:]), paths["valid"])
    return paths
