"""Small encoder-decoder transformer branches, the branch group, beam search and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import BOS, EOS, PAD, EncodedPair


@dataclass
class BranchConfig:
    vocab_size: int
    layers_enc: int = 2
    layers_dec: int = 2
    heads: int = 4
    d_model: int = 256
    d_ffn: int = 1024
    dropout: float = 0.1
    max_context_len: int = 64
    max_response_len: int = 32

    def __post_init__(self) -> None:
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")


@dataclass
class Batch:
    ids: list[int]
    src: torch.Tensor  # [B, Tc]
    tgt_in: torch.Tensor  # [B, Tr], BOS + response[:-1]
    tgt_out: torch.Tensor  # [B, Tr]
    src_pad: torch.Tensor  # True where padded
    tgt_mask: torch.Tensor  # True on real target positions

    def __len__(self) -> int:
        return len(self.ids)


def collate(pairs: Sequence[EncodedPair]) -> Batch:
    """Pad a list of encoded pairs into one teacher-forcing batch."""
    b = len(pairs)
    tc = max(len(p.context_ids) for p in pairs)
    tr = max(len(p.response_ids) for p in pairs)
    src = torch.full((b, tc), PAD, dtype=torch.long)
    tgt_in = torch.full((b, tr), PAD, dtype=torch.long)
    tgt_out = torch.full((b, tr), PAD, dtype=torch.long)
    for i, p in enumerate(pairs):
        src[i, : len(p.context_ids)] = torch.tensor(p.context_ids)
        resp = list(p.response_ids)
        tgt_out[i, : len(resp)] = torch.tensor(resp)
        tgt_in[i, : len(resp)] = torch.tensor([BOS] + resp[:-1])
    return Batch([p.id for p in pairs], src, tgt_in, tgt_out, src == PAD, tgt_out != PAD)


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return pe.float()


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.d_head).transpose(1, 2)

    def forward(self, query, memory, key_pad=None, causal=False):
        q, k, v = self._split(self.q(query)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_pad is not None:
            scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        if causal:
            tq, tk = scores.shape[-2:]
            future = torch.ones(tq, tk, dtype=torch.bool, device=scores.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ffn: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ffn)
        self.fc2 = nn.Linear(d_ffn, d_model)
        self.act_dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.act_dropout(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: BranchConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, pad):
        x = self.norm1(x + self.dropout(self.attn(x, x, pad)))
        return self.norm2(x + self.dropout(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: BranchConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, src_pad):
        y = self.norm1(y + self.dropout(self.self_attn(y, y, causal=True)))
        y = self.norm2(y + self.dropout(self.cross_attn(y, memory, src_pad)))
        return self.norm3(y + self.dropout(self.ffn(y)))


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # [B, Tr, V]
    hidden: torch.Tensor  # last decoder layer, [B, Tr, d_model]
    mask: torch.Tensor  # True on real target positions


class Branch(nn.Module):
    """One post-LN encoder-decoder transformer with its own parameters."""

    def __init__(self, cfg: BranchConfig, role: str = "master"):
        super().__init__()
        self.cfg = cfg
        self.role = role
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers_enc))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers_dec))
        self.out = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.dropout = nn.Dropout(cfg.dropout)
        n_pos = max(cfg.max_context_len, cfg.max_response_len) + 1
        self.register_buffer("positions", sinusoidal_positions(n_pos, cfg.d_model), persistent=False)

    def reset_parameters(self, seed: int) -> None:
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() >= 2:
                    bound = 1.0 / math.sqrt(p.shape[1])
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * (2 * bound) - bound)
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids) * math.sqrt(self.cfg.d_model) + self.positions[: ids.shape[1]]
        return self.dropout(x)

    def encode(self, src: torch.Tensor, src_pad: torch.Tensor) -> torch.Tensor:
        x = self._embed(src)
        for layer in self.encoder:
            x = layer(x, src_pad)
        return x

    def decode(self, tgt_in: torch.Tensor, memory: torch.Tensor, src_pad: torch.Tensor) -> torch.Tensor:
        y = self._embed(tgt_in)
        for layer in self.decoder:
            y = layer(y, memory, src_pad)
        return y

    def forward(self, batch: Batch) -> ForwardOutput:
        if batch.src.shape[1] > self.positions.shape[0] or batch.tgt_in.shape[1] > self.positions.shape[0]:
            raise ValueError("batch longer than the configured maximum lengths")
        if int(batch.src.max()) >= self.cfg.vocab_size or int(batch.tgt_in.max()) >= self.cfg.vocab_size:
            raise ValueError("token id outside the branch vocabulary")
        memory = self.encode(batch.src, batch.src_pad)
        hidden = self.decode(batch.tgt_in, memory, batch.src_pad)
        return ForwardOutput(self.out(hidden), hidden, batch.tgt_mask)


def branch_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


class BranchGroup(nn.Module):
    """Master branch (index 0) plus auxiliary branches; no parameters are shared."""

    def __init__(self, cfg: BranchConfig, attributes: Sequence[str] = (), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.roles = ["master"] + [f"aux:{a}" for a in attributes]
        self.branches = nn.ModuleList(Branch(cfg, role) for role in self.roles)
        for i, b in enumerate(self.branches):
            b.reset_parameters(branch_seed(seed, i))

    @property
    def master(self) -> Branch:
        return self.branches[0]

    @property
    def auxiliaries(self) -> list[Branch]:
        return list(self.branches[1:])

    @property
    def attributes(self) -> list[str]:
        return [r.split(":", 1)[1] for r in self.roles[1:]]

    def __len__(self) -> int:
        return len(self.branches)

    def forward(self, batch: Batch) -> list[ForwardOutput]:
        return [b(batch) for b in self.branches]


# ---------------------------------------------------------------- decoding

StepFn = Callable[[torch.Tensor], torch.Tensor]


def beam_search_core(
    step_fn: StepFn,
    beam: int,
    max_len: int,
    banned: Sequence[int] = (PAD, BOS),
    length_norm: bool = True,
) -> tuple[list[int], float]:
    """Beam search over ``step_fn``, which maps BOS-prefixed prefixes [K, t] to log-probs [K, V].

    Hypotheses that emit EOS leave the beam; the ones alive at ``max_len`` are
    finished as is. EOS is masked at the first step. Returns the best token
    sequence (EOS stripped) and its raw summed log-probability.
    """
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be >= 1")
    live: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for step in range(max_len):
        prefixes = torch.tensor([[BOS] + seq for seq, _ in live], dtype=torch.long)
        logp = step_fn(prefixes).double().clone()
        logp[:, list(banned)] = float("-inf")
        if step == 0:
            logp[:, EOS] = float("-inf")
        total = torch.tensor([s for _, s in live], dtype=torch.float64)[:, None] + logp
        flat = total.flatten()
        k = min(beam, int(torch.isfinite(flat).sum()))
        if k == 0:
            break
        # stable sort keeps lower (hypothesis, token) index first on ties
        order = torch.sort(flat, descending=True, stable=True).indices[:k]
        vocab = logp.shape[1]
        new_live = []
        for idx in order.tolist():
            h, tok = divmod(idx, vocab)
            cand = (live[h][0] + [tok], float(flat[idx]))
            (finished if tok == EOS else new_live).append(cand)
        live = new_live
        if not live:
            break
    finished.extend(live)
    if not finished:
        return [], float("-inf")

    def rank(item):
        seq, score = item
        return score / len(seq) if length_norm else score

    best_seq, best_score = max(finished, key=rank)
    if best_seq and best_seq[-1] == EOS:
        best_seq = best_seq[:-1]
    return best_seq, best_score


def _context_tensors(context_ids: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
    src = torch.tensor([list(context_ids)], dtype=torch.long)
    return src, src == PAD


def branch_step_fn(branches: Sequence[Branch], context_ids: Sequence[int]) -> StepFn:
    """Step function for one branch, or the probability-averaged ensemble of several."""
    src, pad = _context_tensors(context_ids)
    memories = [b.encode(src, pad) for b in branches]

    def step(prefixes: torch.Tensor) -> torch.Tensor:
        k = prefixes.shape[0]
        logps = []
        for b, mem in zip(branches, memories):
            h = b.decode(prefixes, mem.expand(k, -1, -1), pad.expand(k, -1))
            logps.append(torch.log_softmax(b.out(h[:, -1]), dim=-1))
        if len(logps) == 1:
            return logps[0]
        return torch.logsumexp(torch.stack(logps), dim=0) - math.log(len(logps))

    return step


@torch.no_grad()
def beam_search(
    branch: Branch | Sequence[Branch],
    context_ids: Sequence[int],
    beam: int = 5,
    max_len: int = 32,
    length_norm: bool = True,
    return_score: bool = False,
):
    """Decode one context. ``branch`` may be a list of branches to decode their ensemble."""
    branches = [branch] if isinstance(branch, Branch) else list(branch)
    max_len = min(max_len, branches[0].positions.shape[0])
    was_training = [b.training for b in branches]
    for b in branches:
        b.eval()
    try:
        seq, score = beam_search_core(branch_step_fn(branches, context_ids), beam, max_len, length_norm=length_norm)
    finally:
        for b, t in zip(branches, was_training):
            b.train(t)
    return (seq, score) if return_score else seq


# ------------------------------------------------------------- checkpoints

MAGIC = b"CDLCKPT1"


def save_tensors(path: str | Path, header: dict, tensors: dict[str, torch.Tensor]) -> None:
    """Write ``MAGIC | u64 header length | JSON header | little-endian f32 payload``."""
    directory, chunks, offset = [], [], 0
    for name in tensors:
        arr = tensors[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        raw = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "tensors": directory}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)


def load_tensors(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for entry in header.pop("tensors"):
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
    return header, tensors


def group_header(group: BranchGroup) -> dict:
    return {"config": asdict(group.cfg), "roles": list(group.roles)}


def save_group(path: str | Path, group: BranchGroup, extra_header: dict | None = None, extra_tensors: dict | None = None) -> None:
    tensors = {f"branch{i}/{k}": v for i, b in enumerate(group.branches) for k, v in b.state_dict().items()}
    tensors.update(extra_tensors or {})
    save_tensors(path, {**group_header(group), **(extra_header or {})}, tensors)


def load_group(path: str | Path) -> tuple[BranchGroup, dict, dict[str, torch.Tensor]]:
    """Returns the group, the remaining header fields and any non-parameter tensors."""
    header, tensors = load_tensors(path)
    cfg = BranchConfig(**header.pop("config"))
    roles = header.pop("roles")
    group = BranchGroup(cfg, [r.split(":", 1)[1] for r in roles[1:]])
    for i, b in enumerate(group.branches):
        prefix = f"branch{i}/"
        b.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    rest = {k: v for k, v in tensors.items() if not k.startswith("branch")}
    return group, header, rest
