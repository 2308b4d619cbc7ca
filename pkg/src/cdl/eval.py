"""Automatic response metrics and branch-diversity measurement.

Responses are token lists. Natural logs everywhere except the word entropy
H-n, which is reported in bits.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .corpus import NUM_RESERVED, Vocabulary
from .model import Batch, BranchGroup, collate
from .scoring import EmbeddingTable, cosine

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n(responses: Sequence[Tokens], n: int) -> float:
    """Unique n-grams over all responses divided by the total n-gram count."""
    if n < 1:
        raise ValueError("n must be >= 1")
    grams = [g for r in responses for g in ngrams(r, n)]
    return len(set(grams)) / len(grams) if grams else 0.0


def bleu_n(hypotheses: Sequence[Tokens], references: Sequence[Tokens], n: int) -> float:
    """Corpus BLEU with uniform weights over orders 1..n.

    Orders >= 2 use add-one smoothing on both the matched and the total counts.
    """
    if not hypotheses or len(hypotheses) != len(references):
        raise ValueError("need the same, non-zero number of hypotheses and references")
    matched = [0] * n
    totals = [0] * n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for k in range(1, n + 1):
            h, r = Counter(ngrams(hyp, k)), Counter(ngrams(ref, k))
            matched[k - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[k - 1] += sum(h.values())
    log_p = 0.0
    for k in range(n):
        m, t = matched[k], totals[k]
        if k > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t) / n
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def _mean_cosine(a_side: Sequence[Tokens], b_side: Sequence[Tokens], emb: EmbeddingTable) -> float | None:
    values = []
    for a, b in zip(a_side, b_side):
        va, vb = emb.mean_vector(a), emb.mean_vector(b)
        if va is None or vb is None:
            continue
        c = cosine(va, vb)
        if c is not None:
            values.append(c)
    return sum(values) / len(values) if values else None


def embedding_metrics(
    hypotheses: Sequence[Tokens],
    references: Sequence[Tokens],
    contexts: Sequence[Tokens],
    emb: EmbeddingTable,
) -> tuple[float, float]:
    """(AVE, COH): mean cosine of mean word vectors, hypothesis vs reference and vs context.

    Out-of-table tokens are skipped; a pair with no in-table token on a side is skipped.
    """
    ave = _mean_cosine(hypotheses, references, emb)
    coh = _mean_cosine(hypotheses, contexts, emb)
    if ave is None and coh is None:
        raise ValueError("every pair was skipped")
    return (ave if ave is not None else 0.0, coh if coh is not None else 0.0)


@dataclass
class NgramTable:
    """Add-one smoothed n-gram probabilities with one extra bucket for unseen n-grams."""

    counts: Counter
    n: int

    @classmethod
    def build(cls, responses: Sequence[Tokens], n: int) -> "NgramTable":
        return cls(Counter(g for r in responses for g in ngrams(r, n)), n)

    def prob(self, gram: tuple[str, ...]) -> float:
        denom = sum(self.counts.values()) + len(self.counts) + 1
        return (self.counts.get(gram, 0) + 1) / denom


def entropy_n(responses: Sequence[Tokens], table: NgramTable) -> float:
    """Mean per-response average surprisal (bits) of its n-grams under the training table."""
    total = sum(table.counts.values()) + len(table.counts) + 1
    log_total = math.log2(total)
    per_response = []
    for r in responses:
        grams = ngrams(r, table.n)
        if not grams:
            continue
        per_response.append(sum(log_total - math.log2(table.counts.get(g, 0) + 1) for g in grams) / len(grams))
    return sum(per_response) / len(per_response) if per_response else 0.0


def kl_divergence(hyp_responses: Sequence[Tokens], ref_responses: Sequence[Tokens]) -> float:
    """KL(P_ref || P_hyp) of unigram distributions, add-one smoothed over the union vocabulary."""
    ref, hyp = Counter(t for r in ref_responses for t in r), Counter(t for r in hyp_responses for t in r)
    vocab = sorted(set(ref) | set(hyp))
    if not vocab:
        raise ValueError("both response sets are empty")
    n_ref, n_hyp, v = sum(ref.values()), sum(hyp.values()), len(vocab)
    kl = 0.0
    for w in vocab:
        p = (ref[w] + 1) / (n_ref + v)
        q = (hyp[w] + 1) / (n_hyp + v)
        kl += p * math.log(p / q)
    return max(kl, 0.0)


def low_freq_ratio(responses: Sequence[Tokens], freq: Mapping[str, int], threshold: int = 100) -> float:
    """Share of generated tokens whose training frequency is below ``threshold`` (unseen counts as low)."""
    tokens = [t for r in responses for t in r]
    if not tokens:
        raise ValueError("no generated tokens")
    return sum(freq.get(t, 0) < threshold for t in tokens) / len(tokens)


@torch.no_grad()
def pooled_hidden(group: BranchGroup, batch: Batch) -> list[np.ndarray]:
    """Per branch: L2-normalised mean of last decoder states over real target positions, [B, d]."""
    group.eval()
    mask = batch.tgt_mask.to(torch.float64)[..., None]
    pooled = []
    for b in group.branches:
        h = b(batch).hidden.double()
        m = (h * mask).sum(1) / mask.sum(1)
        pooled.append((m / m.norm(dim=-1, keepdim=True).clamp_min(1e-12)).numpy())
    return pooled


def l2_between(pooled: Sequence[np.ndarray]) -> float:
    if len(pooled) < 2:
        raise ValueError("branch diversity needs at least two branches")
    dists = [np.linalg.norm(a - b, axis=-1) for a, b in combinations(pooled, 2)]
    return float(np.mean(np.stack(dists)))


def branch_l2(group: BranchGroup, batch: Batch) -> float:
    """Mean Euclidean distance between branches' pooled representations over pairs and examples."""
    if len(group) < 2:
        raise ValueError("branch diversity needs at least two branches")
    return l2_between(pooled_hidden(group, batch))


def branch_l2_corpus(group: BranchGroup, encoded, batch_size: int = 64) -> float:
    pooled: list[list[np.ndarray]] = [[] for _ in range(len(group))]
    for start in range(0, len(encoded), batch_size):
        for acc, arr in zip(pooled, pooled_hidden(group, collate(encoded[start : start + batch_size]))):
            acc.append(arr)
    return l2_between([np.concatenate(p) for p in pooled])


def embedding_table_from_branch(group: BranchGroup, vocab: Vocabulary) -> EmbeddingTable:
    """Input embeddings of the master branch for the non-reserved vocabulary."""
    weights = group.master.embed.weight.detach().double().numpy()[NUM_RESERVED:]
    return EmbeddingTable(vocab.itos[NUM_RESERVED:], weights.copy(), {"source": "master input embeddings"})


@dataclass
class MetricReport:
    dist_1: float
    dist_2: float
    dist_3: float
    bleu_1: float
    bleu_4: float
    ave: float
    coh: float
    h_1: float
    h_2: float
    h_3: float
    kl: float
    lf: float
    branch_l2: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_responses(
    hypotheses: Sequence[Tokens],
    references: Sequence[Tokens],
    contexts: Sequence[Tokens],
    train_responses: Sequence[Tokens],
    train_freq: Mapping[str, int],
    emb: EmbeddingTable,
    lf_threshold: int = 100,
) -> MetricReport:
    tables = {n: NgramTable.build(train_responses, n) for n in (1, 2, 3)}
    ave, coh = embedding_metrics(hypotheses, references, contexts, emb)
    return MetricReport(
        dist_1=distinct_n(hypotheses, 1),
        dist_2=distinct_n(hypotheses, 2),
        dist_3=distinct_n(hypotheses, 3),
        bleu_1=bleu_n(hypotheses, references, 1),
        bleu_4=bleu_n(hypotheses, references, 4),
        ave=ave,
        coh=coh,
        h_1=entropy_n(hypotheses, tables[1]),
        h_2=entropy_n(hypotheses, tables[2]),
        h_3=entropy_n(hypotheses, tables[3]),
        kl=kl_divergence(hypotheses, references),
        lf=low_freq_ratio(hypotheses, train_freq, lf_threshold),
    )


def write_report(report: MetricReport | Mapping, path: str | Path, provenance: Mapping | None = None) -> None:
    values = report.to_dict() if isinstance(report, MetricReport) else dict(report)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"metrics": values, "provenance": dict(provenance or {})}, fh, indent=2, sort_keys=True)
        fh.write("\n")
