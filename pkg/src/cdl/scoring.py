"""Per-pair attribute scores: coherence, informativeness and specificity.

All statistics are built from the corpus being scored (the training split).
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import combinations, product
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import RESERVED_TOKENS, Corpus, DialoguePair

ATTRIBUTES = ("coherence", "informativeness", "specificity")

Phrase = tuple[str, ...]

DEFAULT_STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because been before being below
    between both but by can could did do does doing down during each few for from further had has have
    having he her here hers herself him himself his how i if in into is it its itself just me more most
    my myself no nor not now of off on once only or other our ours ourselves out over own same she should
    so some such than that the their theirs them themselves then there these they this those through to
    too under until up very was we were what when where which while who whom why will with would you
    your yours yourself yourselves s t d ll m re ve don didn doesn isn wasn won can't ok oh yes yeah well
    """.split()
) | frozenset(RESERVED_TOKENS)


def is_content_word(token: str, stopwords: frozenset[str] | set[str]) -> bool:
    return token not in stopwords and token not in RESERVED_TOKENS and any(ch.isalnum() for ch in token)


def extract_keyphrases(tokens: Sequence[str], stopwords: frozenset[str] | set[str] = DEFAULT_STOPWORDS) -> set[Phrase]:
    """Content-word unigrams and bigrams of adjacent content words (after stopword removal).

    Punctuation-only tokens are never content words.
    """
    content = [t for t in tokens if is_content_word(t, stopwords)]
    phrases: set[Phrase] = {(t,) for t in content}
    phrases.update(zip(content, content[1:]))
    return phrases


def context_keyphrases(pair: DialoguePair, stopwords=DEFAULT_STOPWORDS) -> set[Phrase]:
    out: set[Phrase] = set()
    for utt in pair.context_tokens:
        out |= extract_keyphrases(utt, stopwords)
    return out


@dataclass
class CooccurrenceStats:
    """Document (pair) frequencies of context phrases, response phrases and their joint occurrence."""

    n_context: Counter = field(default_factory=Counter)
    n_response: Counter = field(default_factory=Counter)
    n_joint: Counter = field(default_factory=Counter)
    total: int = 0

    @classmethod
    def build(cls, corpus: Iterable[DialoguePair], stopwords=DEFAULT_STOPWORDS) -> "CooccurrenceStats":
        stats = cls()
        for pair in corpus:
            ps = context_keyphrases(pair, stopwords)
            hs = extract_keyphrases(pair.response_tokens, stopwords)
            stats.n_context.update(ps)
            stats.n_response.update(hs)
            stats.n_joint.update(product(ps, hs))
            stats.total += 1
        return stats

    def merge(self, other: "CooccurrenceStats") -> "CooccurrenceStats":
        return CooccurrenceStats(
            self.n_context + other.n_context,
            self.n_response + other.n_response,
            self.n_joint + other.n_joint,
            self.total + other.total,
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"N\t{self.total}\n")
            for tag, table in (("P", self.n_context), ("H", self.n_response)):
                for p in sorted(table):
                    fh.write(f"{tag}\t{' '.join(p)}\t{table[p]}\n")
            for p, h in sorted(self.n_joint):
                fh.write(f"J\t{' '.join(p)}\t{' '.join(h)}\t{self.n_joint[p, h]}\n")

    @classmethod
    def load(cls, path: str | Path) -> "CooccurrenceStats":
        stats = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                if parts[0] == "N":
                    stats.total = int(parts[1])
                elif parts[0] == "P":
                    stats.n_context[tuple(parts[1].split(" "))] = int(parts[2])
                elif parts[0] == "H":
                    stats.n_response[tuple(parts[1].split(" "))] = int(parts[2])
                elif parts[0] == "J":
                    stats.n_joint[tuple(parts[1].split(" ")), tuple(parts[2].split(" "))] = int(parts[3])
        return stats


def npmi_from_counts(n_p: int, n_h: int, n_ph: int, total: int) -> float:
    if n_ph < 1:
        raise ValueError("nPMI is undefined for phrases that never co-occur")
    if n_ph == total:
        return 1.0
    # exact integer test keeps independence at exactly zero
    if n_ph * total == n_p * n_h:
        return 0.0
    p_joint = n_ph / total
    pmi = math.log(n_ph * total / (n_p * n_h))
    return pmi / -math.log(p_joint)


def npmi(p: Phrase, h: Phrase, stats: CooccurrenceStats) -> float:
    return npmi_from_counts(stats.n_context[p], stats.n_response[h], stats.n_joint[p, h], stats.total)


def coherence_connectivity(pair: DialoguePair, stats: CooccurrenceStats, stopwords=DEFAULT_STOPWORDS) -> float:
    ps = context_keyphrases(pair, stopwords)
    hs = extract_keyphrases(pair.response_tokens, stopwords)
    if not ps or not hs:
        return 0.0
    n_c = len(pair.flat_context_tokens())
    n_r = len(pair.response_tokens)
    acc = 0.0
    for p, h in sorted(product(ps, hs)):
        if stats.n_joint.get((p, h), 0) < 1:
            continue
        acc += max(npmi(p, h, stats), 0.0) * len(p) * len(h)
    return acc / (n_c * n_r)


DENSE_SVD_LIMIT = 3000  # larger vocabularies use a truncated sparse solver


@dataclass
class EmbeddingTable:
    """Token -> dense vector lookup."""

    tokens: list[str]
    vectors: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def mean_vector(self, tokens: Iterable[str]) -> np.ndarray | None:
        rows = [self.index[t] for t in tokens if t in self.index]
        if not rows:
            return None
        return self.vectors[rows].mean(axis=0)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# " + json.dumps(self.meta, sort_keys=True) + "\n")
            for tok, row in zip(self.tokens, self.vectors):
                fh.write(tok + "\t" + " ".join(repr(float(x)) for x in row) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        tokens, rows, meta = [], [], {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("# "):
                    meta = json.loads(line[2:])
                    continue
                tok, vec = line.rstrip("\n").split("\t")
                tokens.append(tok)
                rows.append([float(x) for x in vec.split(" ")])
        return cls(tokens, np.asarray(rows, dtype=np.float64), meta)

    @classmethod
    def from_cooccurrence(cls, corpus: Iterable[DialoguePair], dim: int = 64, seed: int = 0) -> "EmbeddingTable":
        """PPMI of within-pair word co-occurrence, factorised by truncated SVD (U * sqrt(S))."""
        docs = [sorted(set(p.flat_context_tokens()) | set(p.response_tokens)) for p in corpus]
        tokens = sorted({t for d in docs for t in d})
        index = {t: i for i, t in enumerate(tokens)}
        v = len(tokens)
        counts = np.zeros((v, v), dtype=np.float64)
        for d in docs:
            ids = [index[t] for t in d]
            for a, b in combinations(ids, 2):
                counts[a, b] += 1.0
                counts[b, a] += 1.0
        row = counts.sum(axis=1)
        grand = row.sum()
        with np.errstate(divide="ignore", invalid="ignore"):
            pmi = np.log(counts * grand / np.outer(row, row))
        ppmi = np.where(np.isfinite(pmi) & (pmi > 0), pmi, 0.0)
        k = max(1, min(dim, v))
        if v <= DENSE_SVD_LIMIT:
            u, s, _ = np.linalg.svd(ppmi)
            u, s = u[:, :k], s[:k]
        else:
            from scipy.sparse import csr_matrix
            from scipy.sparse.linalg import svds

            v0 = np.random.default_rng(seed).standard_normal(v)
            u, s, _ = svds(csr_matrix(ppmi), k=min(k, v - 1), v0=v0)
            order = np.argsort(-s)
            u, s = u[:, order], s[order]
        # fix the sign ambiguity of singular vectors
        signs = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])])
        signs[signs == 0] = 1.0
        vectors = u * signs * np.sqrt(s)
        if vectors.shape[1] < dim:
            vectors = np.pad(vectors, ((0, 0), (0, dim - vectors.shape[1])))
        return cls(tokens, vectors, {"method": "ppmi-svd", "dim": dim, "seed": seed})


def cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.dot(a, b) / (na * nb))


def relatedness(pair: DialoguePair, emb: EmbeddingTable) -> float:
    c = emb.mean_vector(pair.flat_context_tokens())
    r = emb.mean_vector(pair.response_tokens)
    if c is None or r is None:
        return 0.0
    cos = cosine(c, r)
    return 0.0 if cos is None else max(cos, 0.0)


def coherence_score(s_c: float, s_r: float, alpha: float = 0.5, beta: float = 0.5) -> float:
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    return alpha * s_c + beta * s_r


def _context_key(pair: DialoguePair) -> str:
    return " <sep> ".join(" ".join(u) for u in pair.context_tokens)


def _response_key(pair: DialoguePair) -> str:
    return " ".join(pair.response_tokens)


def source_entropy(corpus: Iterable[DialoguePair]) -> dict[str, float]:
    """Entropy (nats) of the context distribution for every distinct tokenized response."""
    groups: dict[str, Counter] = defaultdict(Counter)
    for pair in corpus:
        groups[_response_key(pair)][_context_key(pair)] += 1
    out = {}
    for resp, ctx_counts in groups.items():
        n = sum(ctx_counts.values())
        h = -sum((c / n) * math.log(c / n) for c in ctx_counts.values())
        out[resp] = h + 0.0  # normalise -0.0
    return out


@dataclass
class IdfTable:
    idf: dict[str, float]
    doc_freq: dict[str, int]
    n_responses: int

    @property
    def min_idf(self) -> float:
        return min(self.idf.values())

    @property
    def max_idf(self) -> float:
        return max(self.idf.values())

    @classmethod
    def build(cls, responses: Iterable[Sequence[str]]) -> "IdfTable":
        df: Counter[str] = Counter()
        n = 0
        for toks in responses:
            n += 1
            df.update(set(toks) - set(RESERVED_TOKENS))
        if not df:
            raise ValueError("no response tokens to build an idf table from")
        return cls({t: math.log(n / c) for t, c in df.items()}, dict(df), n)

    def specificity(self, token: str) -> float:
        lo, hi = self.min_idf, self.max_idf
        if hi == lo:
            return 0.5
        return (self.idf.get(token, hi) - lo) / (hi - lo)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# responses\t{self.n_responses}\n")
            for t in sorted(self.doc_freq):
                fh.write(f"{t}\t{self.doc_freq[t]}\t{self.idf[t]!r}\n")

    @classmethod
    def load(cls, path: str | Path) -> "IdfTable":
        idf, df, n = {}, {}, 0
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                if parts[0] == "# responses":
                    n = int(parts[1])
                    continue
                df[parts[0]] = int(parts[1])
                idf[parts[0]] = float(parts[2])
        return cls(idf, df, n)


def specificity_score(tokens: Sequence[str], idf: IdfTable) -> float:
    """Mean min-max normalised idf over the response tokens (reserved tokens skipped)."""
    toks = [t for t in tokens if t not in RESERVED_TOKENS]
    if not toks:
        return 0.0
    lo, hi = idf.min_idf, idf.max_idf
    if hi == lo:
        return 0.5
    return sum(idf.specificity(t) for t in toks) / len(toks)


@dataclass
class ScoringConfig:
    alpha: float = 0.5
    beta: float = 0.5
    emb_dim: int = 64
    seed: int = 0
    stopwords: frozenset[str] = DEFAULT_STOPWORDS


@dataclass
class AttributeScores:
    attribute: str
    scores: dict[int, float]

    def __len__(self) -> int:
        return len(self.scores)


def score_corpus(corpus: Corpus | Sequence[DialoguePair], attribute: str, config: ScoringConfig | None = None) -> AttributeScores:
    """Score every pair of ``corpus`` for one attribute, using statistics from ``corpus`` itself."""
    config = config or ScoringConfig()
    pairs = list(corpus)
    if attribute == "coherence":
        stats = CooccurrenceStats.build(pairs, config.stopwords)
        emb = EmbeddingTable.from_cooccurrence(pairs, config.emb_dim, config.seed)
        scores = {
            p.id: coherence_score(coherence_connectivity(p, stats, config.stopwords), relatedness(p, emb), config.alpha, config.beta)
            for p in pairs
        }
    elif attribute == "informativeness":
        h = source_entropy(pairs)
        scores = {p.id: -h[_response_key(p)] + 0.0 for p in pairs}
    elif attribute == "specificity":
        idf = IdfTable.build(p.response_tokens for p in pairs)
        scores = {p.id: specificity_score(p.response_tokens, idf) for p in pairs}
    else:
        raise ValueError(f"unknown attribute {attribute!r}; expected one of {ATTRIBUTES}")
    return AttributeScores(attribute, scores)


def write_scores(scores: AttributeScores, path: str | Path, provenance: Mapping[str, object] | None = None) -> None:
    header = {"attribute": scores.attribute, **(provenance or {})}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for pid in sorted(scores.scores):
            fh.write(json.dumps({"id": pid, "score": scores.scores[pid]}) + "\n")


def read_scores(path: str | Path) -> AttributeScores:
    attribute, scores = "", {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                attribute = json.loads(line[1:]).get("attribute", attribute)
                continue
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                scores[int(rec["id"])] = float(rec["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: malformed score record") from None
    return AttributeScores(attribute, scores)
