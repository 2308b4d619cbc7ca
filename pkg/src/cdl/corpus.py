"""Dialogue corpus loading, vocabulary construction and id encoding.

Corpus files are line-delimited JSON, one ``{"context": [...], "response": "..."}``
record per line. Pair ids are assigned in file order.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<sep>")
NUM_RESERVED = len(RESERVED_TOKENS)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class CorpusError(ValueError):
    """Raised for malformed or empty corpus files."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation off as standalone tokens, split on whitespace."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class DialoguePair:
    id: int
    context: tuple[str, ...]
    response: str

    @property
    def context_tokens(self) -> list[list[str]]:
        return [tokenize(u) for u in self.context]

    @property
    def response_tokens(self) -> list[str]:
        return tokenize(self.response)

    def flat_context_tokens(self) -> list[str]:
        return [t for utt in self.context_tokens for t in utt]


@dataclass
class Corpus:
    pairs: list[DialoguePair]
    checksum: str = ""

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i: int) -> DialoguePair:
        return self.pairs[i]


def file_checksum(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def parse_record(line: str, lineno: int, pair_id: int) -> DialoguePair:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise CorpusError(f"line {lineno}: record must be an object")
    context = rec.get("context")
    response = rec.get("response")
    if not isinstance(context, list) or not all(isinstance(u, str) for u in context):
        raise CorpusError(f"line {lineno}: 'context' must be a list of strings")
    if not isinstance(response, str):
        raise CorpusError(f"line {lineno}: 'response' must be a string")
    if not tokenize(response):
        raise CorpusError(f"line {lineno}: empty response")
    return DialoguePair(id=pair_id, context=tuple(context), response=response)


def load_corpus(path: str | Path) -> Corpus:
    """Read a line-delimited corpus file. Blank lines are skipped."""
    pairs: list[DialoguePair] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            pairs.append(parse_record(line, lineno, len(pairs)))
    if not pairs:
        raise CorpusError(f"{path}: empty corpus")
    return Corpus(pairs, checksum=file_checksum(path))


def write_corpus(pairs: Iterable[tuple[Sequence[str], str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for context, response in pairs:
            fh.write(json.dumps({"context": list(context), "response": response}) + "\n")


@dataclass
class Vocabulary:
    """Token/id maps plus the full training-token frequency table.

    ``freq`` keeps every observed token, including the ones cut by ``min_freq``.
    """

    itos: list[str]
    freq: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.itos):
                fh.write(f"{tok}\t{i}\t{self.freq.get(tok, 0) if i >= NUM_RESERVED else 0}\n")
            # tokens below the cutoff keep their count but get no id
            for tok in sorted(t for t in self.freq if t not in self.stoi):
                fh.write(f"{tok}\t-1\t{self.freq[tok]}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        itos: list[str] = []
        freq: dict[str, int] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise CorpusError(f"{path}:{lineno}: expected token<TAB>id<TAB>freq")
                tok, idx, count = parts[0], int(parts[1]), int(parts[2])
                if lineno <= NUM_RESERVED:
                    if tok != RESERVED_TOKENS[lineno - 1] or idx != lineno - 1:
                        raise CorpusError(f"{path}:{lineno}: bad reserved-token header")
                    itos.append(tok)
                    continue
                if idx >= 0:
                    if idx != len(itos):
                        raise CorpusError(f"{path}:{lineno}: ids must be contiguous")
                    itos.append(tok)
                freq[tok] = count
        return cls(itos, freq)


def build_vocab(corpus: Corpus | Iterable[DialoguePair], min_freq: int = 1) -> Vocabulary:
    """Count context and response tokens; tokens with count >= min_freq get ids.

    Ids are assigned by descending frequency, ties alphabetically.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    n = 0
    for pair in corpus:
        n += 1
        counts.update(pair.flat_context_tokens())
        counts.update(pair.response_tokens)
    if n == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED_TOKENS) + kept, dict(counts))


@dataclass(frozen=True)
class EncodedPair:
    id: int
    context_ids: tuple[int, ...]
    response_ids: tuple[int, ...]


def encode_context(context_tokens: Sequence[Sequence[str]], vocab: Vocabulary, max_len: int) -> list[int]:
    ids: list[int] = []
    for i, utt in enumerate(context_tokens):
        if i:
            ids.append(SEP)
        ids.extend(vocab.id(t) for t in utt)
    if not ids:
        # the encoder needs at least one position
        ids = [SEP]
    return ids[-max_len:]


def encode(pair: DialoguePair, vocab: Vocabulary, max_context_len: int = 64, max_response_len: int = 32) -> EncodedPair:
    """Join context utterances with SEP (keep suffix) and terminate the response with EOS (keep prefix)."""
    if max_context_len < 1 or max_response_len < 1:
        raise ValueError("maximum lengths must be positive")
    ctx = encode_context(pair.context_tokens, vocab, max_context_len)
    resp = [vocab.id(t) for t in pair.response_tokens][: max_response_len - 1] + [EOS]
    return EncodedPair(pair.id, tuple(ctx), tuple(resp))


def encode_corpus(corpus: Corpus, vocab: Vocabulary, max_context_len: int = 64, max_response_len: int = 32) -> list[EncodedPair]:
    return [encode(p, vocab, max_context_len, max_response_len) for p in corpus]


def decode(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    """Map ids back to tokens, dropping reserved markers other than UNK."""
    return [vocab.token(i) for i in ids if i >= NUM_RESERVED or i == UNK]
