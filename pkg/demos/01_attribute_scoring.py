# %% [markdown]
# # Scoring a corpus by dialogue attribute
#
# Every training pair gets three scores: coherence (how strongly the
# response's key phrases co-occur with the context's, plus embedding
# relatedness), informativeness (how many different contexts the exact same
# response answers) and specificity (mean normalised idf of the response
# words). Each auxiliary branch later trains on the top slice for one score.

# %%
from collections import Counter

from cdl.corpus import DialoguePair
from cdl.scoring import ATTRIBUTES, score_corpus
from cdl.selection import build_subset
from cdl.synthetic import make_synthetic_corpus

synthetic = make_synthetic_corpus(n=600, seed=0)
pairs = [DialoguePair(i, p.context, p.response) for i, p in enumerate(synthetic)]
kinds = [p.kind for p in synthetic]
print(Counter(kinds))

# %% [markdown]
# The synthetic generator plants four populations: topical pairs that reuse
# cue/answer phrases, pairs whose responses use rare words, generic replies,
# and noise. A useful score should rank them differently.

# %%
scores = {attr: score_corpus(pairs, attr) for attr in ATTRIBUTES}

for attr, s in scores.items():
    by_kind = {}
    for pid, value in s.scores.items():
        by_kind.setdefault(kinds[pid], []).append(value)
    summary = ", ".join(f"{k} {sum(v) / len(v):.3f}" for k, v in sorted(by_kind.items()))
    print(f"{attr:16s} {summary}")

# %% [markdown]
# ## Keeping the top 70 percent
#
# Selection is a stable sort by score; ties go to the earlier pair.

# %%
for attr, s in scores.items():
    subset = build_subset(s, 0.7)
    kept = Counter(kinds[i] for i in subset.ids)
    print(f"{attr:16s} kept {len(subset)} pairs: {dict(kept)}")

# %%
best = max(scores["specificity"].scores.items(), key=lambda kv: kv[1])[0]
worst = min(scores["specificity"].scores.items(), key=lambda kv: kv[1])[0]
print("most specific :", pairs[best].response)
print("least specific:", pairs[worst].response)
