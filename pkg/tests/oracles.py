"""Naive reference implementations used as independent oracles.

These re-derive every count by rescanning the corpus; they share only the
tokenizer and the stopword list with the package.
"""

import math

import numpy as np

RESERVED = {"<pad>", "<bos>", "<eos>", "<unk>", "<sep>"}


def content_words(tokens, stopwords):
    return [t for t in tokens if t not in stopwords and t not in RESERVED and any(c.isalnum() for c in t)]


def phrases_of(tokens, stopwords):
    words = content_words(tokens, stopwords)
    out = {(w,) for w in words}
    for i in range(len(words) - 1):
        out.add((words[i], words[i + 1]))
    return out


def context_phrases(pair, stopwords):
    out = set()
    for utt in pair.context_tokens:
        out |= phrases_of(utt, stopwords)
    return out


def brute_coherence_connectivity(pairs, target, stopwords):
    ctx = [context_phrases(p, stopwords) for p in pairs]
    rsp = [phrases_of(p.response_tokens, stopwords) for p in pairs]
    n = len(pairs)
    mine_c = context_phrases(target, stopwords)
    mine_r = phrases_of(target.response_tokens, stopwords)
    if not mine_c or not mine_r:
        return 0.0
    total = 0.0
    for p in mine_c:
        for h in mine_r:
            n_p = sum(1 for i in range(n) if p in ctx[i])
            n_h = sum(1 for i in range(n) if h in rsp[i])
            n_ph = sum(1 for i in range(n) if p in ctx[i] and h in rsp[i])
            if n_ph == 0:
                continue
            pj, pp, ph = n_ph / n, n_p / n, n_h / n
            if pj == 1.0:
                val = 1.0
            else:
                val = math.log(pj / (pp * ph)) / (-math.log(pj))
            total += max(val, 0.0) * len(p) * len(h)
    words_c = sum(len(u) for u in target.context_tokens)
    return total / (words_c * len(target.response_tokens))


def brute_relatedness(target, table):
    def mean(tokens):
        vecs = [table.vectors[table.tokens.index(t)] for t in tokens if t in table.tokens]
        if not vecs:
            return None
        acc = np.zeros(table.vectors.shape[1])
        for v in vecs:
            acc = acc + v
        return acc / len(vecs)

    c = mean([t for u in target.context_tokens for t in u])
    r = mean(target.response_tokens)
    if c is None or r is None:
        return 0.0
    nc, nr = math.sqrt(sum(x * x for x in c)), math.sqrt(sum(x * x for x in r))
    if nc == 0 or nr == 0:
        return 0.0
    return max(sum(a * b for a, b in zip(c, r)) / (nc * nr), 0.0)


def brute_source_entropy(pairs, target):
    key = " ".join(target.response_tokens)
    contexts = [
        "|".join(" ".join(u) for u in p.context_tokens) for p in pairs if " ".join(p.response_tokens) == key
    ]
    h = 0.0
    for c in set(contexts):
        q = contexts.count(c) / len(contexts)
        h -= q * math.log(q)
    return h


def brute_specificity(pairs, target):
    responses = [set(p.response_tokens) for p in pairs]
    vocab = set().union(*responses) - RESERVED
    idf = {t: math.log(len(pairs) / sum(1 for r in responses if t in r)) for t in vocab}
    lo, hi = min(idf.values()), max(idf.values())
    toks = [t for t in target.response_tokens if t not in RESERVED]
    if hi == lo:
        return 0.5
    return sum((idf.get(t, hi) - lo) / (hi - lo) for t in toks) / len(toks)


def enumerate_sequences(logprob_fn, vocab_size, max_len, eos, banned):
    """Every admissible generation of at most ``max_len`` tokens with its summed log-prob.

    A sequence ends at EOS or when it reaches ``max_len`` tokens; EOS may not come first.
    """
    results = []

    def walk(prefix, score):
        if len(prefix) == max_len:
            results.append((prefix, score))
            return
        lp = logprob_fn(prefix)
        for tok in range(vocab_size):
            if tok in banned or (tok == eos and not prefix):
                continue
            s = score + float(lp[tok])
            if tok == eos:
                results.append((prefix + [tok], s))
            else:
                walk(prefix + [tok], s)

    walk([], 0.0)
    return results


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at numpy array ``x``."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad
