# %% [markdown]
# # Decoding, metrics and branch diversity
#
# Run `03_train_branch_group.py` first; this script reads its checkpoints.

# %%
import sys
from pathlib import Path

from cdl.corpus import build_vocab, decode, encode_context, encode_corpus, load_corpus
from cdl.eval import branch_l2_corpus, embedding_table_from_branch, evaluate_responses
from cdl.model import beam_search
from cdl.trainer import load_checkpoint

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_runs")
train = load_corpus(out / "data" / "train.jsonl")
valid = load_corpus(out / "data" / "valid.jsonl")
group, vocab, header = load_checkpoint(out / "cdl" / "best.ckpt")
print("roles:", group.roles, " epoch:", header["epoch"])

# %% [markdown]
# ## Beam search with the master branch
# Beam 5, EOS blocked at the first step, final ranking by log-probability per
# token.

# %%
hyps = []
for pair in valid:
    ctx = encode_context(pair.context_tokens, vocab, group.cfg.max_context_len)
    hyps.append(decode(beam_search(group.master, ctx, beam=5), vocab))
for pair, hyp in list(zip(valid, hyps))[:5]:
    print(f"{' | '.join(pair.context):40s} -> {' '.join(hyp)}")

# %% [markdown]
# Decoding the average of all branches is also available.

# %%
ctx = encode_context(valid[0].context_tokens, vocab, group.cfg.max_context_len)
print("ensemble:", " ".join(decode(beam_search(list(group.branches), ctx), vocab)))

# %% [markdown]
# ## Automatic metrics
# AVE/COH use the master's input embeddings; H-n and LF use training-set
# statistics.

# %%
report = evaluate_responses(
    hyps,
    [p.response_tokens for p in valid],
    [p.flat_context_tokens() for p in valid],
    [p.response_tokens for p in train],
    build_vocab(train).freq,
    embedding_table_from_branch(group, vocab),
)
for key, value in report.to_dict().items():
    if value is not None:
        print(f"{key:8s} {value:.4f}")

# %% [markdown]
# ## How far apart are the branches?
# Mean-pooled, unit-normalised last decoder states, averaged over branch
# pairs and validation examples.

# %%
encoded = encode_corpus(valid, vocab, group.cfg.max_context_len, group.cfg.max_response_len)
print(f"CDL branch L2:     {branch_l2_corpus(group, encoded):.4f}")
baseline, _, _ = load_checkpoint(out / "pd_only" / "best.ckpt")
print(f"PD-only branch L2: {branch_l2_corpus(baseline, encoded):.4f}")
