"""Simultaneous training of a branch group with dual distillation."""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .corpus import Corpus, EncodedPair, Vocabulary, build_vocab, encode_corpus, file_checksum, load_corpus
from .distill import DistillOptions, LossBundle, group_losses, mle_loss
from .model import Batch, BranchConfig, BranchGroup, collate, load_group, save_group
from .scoring import ATTRIBUTES, ScoringConfig, score_corpus, write_scores
from .selection import SubsetIndex, build_subset, read_subset, write_subset

log = logging.getLogger(__name__)

BATCHING_MODES = ("shared_masked", "per_subset_rotation")
LOG_COLUMNS = ("step", "branch", "mle", "pd", "nd_pred", "nd_hidden", "total")


class NumericalAbort(RuntimeError):
    """A loss term became NaN or infinite."""


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    train_path: str = ""
    valid_path: str = ""
    out_dir: str = "run"
    subset_dir: str = ""
    attributes: tuple[str, ...] = ("coherence", "specificity")
    batch_size: int = 64
    temperature: float = 1.0
    ratio: float = 0.7
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    batching: str = "shared_masked"
    no_attributes: bool = False
    no_orthogonal: bool = False
    no_nd_hidden: bool = False
    no_nd: bool = False
    min_freq: int = 1
    max_context_len: int = 64
    max_response_len: int = 32
    layers_enc: int = 2
    layers_dec: int = 2
    heads: int = 4
    d_model: int = 256
    d_ffn: int = 1024
    dropout: float = 0.1
    alpha: float = 0.5
    beta: float = 0.5
    emb_dim: int = 64

    def __post_init__(self) -> None:
        if isinstance(self.attributes, str):
            self.attributes = tuple(a.strip() for a in self.attributes.split(",") if a.strip())
        self.attributes = tuple(self.attributes)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError("ratio must be in (0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batching not in BATCHING_MODES:
            raise ConfigError(f"batching must be one of {BATCHING_MODES}")
        for a in self.attributes:
            if a not in ATTRIBUTES:
                raise ConfigError(f"unknown attribute {a!r}")

    @property
    def distill_options(self) -> DistillOptions:
        return DistillOptions(self.temperature, self.no_attributes, self.no_orthogonal, self.no_nd_hidden, self.no_nd)

    def branch_config(self, vocab_size: int) -> BranchConfig:
        return BranchConfig(
            vocab_size=vocab_size,
            layers_enc=self.layers_enc,
            layers_dec=self.layers_dec,
            heads=self.heads,
            d_model=self.d_model,
            d_ffn=self.d_ffn,
            dropout=self.dropout,
            max_context_len=self.max_context_len,
            max_response_len=self.max_response_len,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attributes"] = list(self.attributes)
        return d

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        """Parse flat ``key = value`` lines; ``#`` starts a comment."""
        defaults = cls()
        values: dict[str, object] = {}
        known = {f.name for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in known:
                raise ConfigError(f"line {lineno}: unknown or malformed entry {raw.strip()!r}")
            values[key] = _coerce(value, getattr(defaults, key), key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)


def _coerce(value: str, default: object, key: str):
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(a.strip() for a in value.split(",") if a.strip())
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


# ------------------------------------------------------------------ batches


def shared_batches(ids: Sequence[int], batch_size: int, rng: np.random.Generator) -> Iterator[list[int]]:
    """One epoch over ``ids`` in a freshly shuffled order (one ``permutation`` draw per epoch)."""
    order = rng.permutation(len(ids))
    for start in range(0, len(ids), batch_size):
        yield [ids[i] for i in order[start : start + batch_size]]


def rotation_batches(
    ids: Sequence[int], subsets: Sequence[SubsetIndex], batch_size: int, rng: np.random.Generator
) -> Iterator[list[int]]:
    """Round-robin over the full set and each subset; epoch length matches ``shared_batches``."""
    sources = [list(ids)] + [list(s.ids) for s in subsets]
    orders = [rng.permutation(len(s)) for s in sources]
    cursors = [0] * len(sources)
    for k in range(math.ceil(len(ids) / batch_size)):
        src = k % len(sources)
        if cursors[src] >= len(sources[src]):
            orders[src] = rng.permutation(len(sources[src]))
            cursors[src] = 0
        chunk = orders[src][cursors[src] : cursors[src] + batch_size]
        cursors[src] += batch_size
        yield [sources[src][i] for i in chunk]


# ------------------------------------------------------------------ trainer


class Trainer:
    """Holds the branch group, one Adam optimizer per branch and the data stream state."""

    def __init__(
        self,
        config: TrainConfig,
        train: Sequence[EncodedPair],
        valid: Sequence[EncodedPair],
        vocab: Vocabulary,
        subsets: Sequence[SubsetIndex] = (),
        provenance: dict | None = None,
    ):
        self.config = config
        self.vocab = vocab
        self.train = {p.id: p for p in train}
        self.train_ids = [p.id for p in train]
        self.valid = list(valid)
        self.subsets = list(subsets)
        if config.attributes and not config.no_attributes and len(self.subsets) != len(config.attributes):
            raise ConfigError("one subset per auxiliary attribute is required")
        self.provenance = dict(provenance or {})
        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.group = BranchGroup(config.branch_config(len(vocab)), config.attributes, config.seed)
        self.optimizers = [
            torch.optim.Adam(b.parameters(), lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)
            for b in self.group.branches
        ]
        self.epoch = 0
        self.step = 0
        self.best_val = math.inf
        self.bad_epochs = 0

    # -- one step
    def memberships(self, batch: Batch) -> list[torch.Tensor] | None:
        if self.config.no_attributes or not self.subsets:
            return None
        return [torch.tensor([pid in s.id_set for pid in batch.ids], dtype=torch.bool) for s in self.subsets]

    def train_step(self, batch: Batch) -> list[LossBundle]:
        self.group.train()
        outs = self.group(batch)
        bundles = group_losses(
            [o.logits for o in outs],
            [o.hidden for o in outs],
            batch.tgt_out,
            batch.tgt_mask,
            self.memberships(batch),
            self.config.distill_options,
        )
        for role, bundle in zip(self.group.roles, bundles):
            for name, value in bundle.as_floats().items():
                if not math.isfinite(value):
                    raise NumericalAbort(
                        f"non-finite {name} for branch {role} at step {self.step + 1}: "
                        + json.dumps(bundle.as_floats())
                    )
        for opt in self.optimizers:
            opt.zero_grad(set_to_none=True)
        # teachers are detached, so the summed backward keeps branch gradients separate
        torch.stack([b.total for b in bundles]).sum().backward()
        for branch, opt in zip(self.group.branches, self.optimizers):
            if self.config.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(branch.parameters(), self.config.clip_norm)
            opt.step()
        self.step += 1
        return bundles

    def epoch_batches(self) -> Iterator[list[int]]:
        if self.config.batching == "per_subset_rotation" and self.subsets and not self.config.no_attributes:
            return rotation_batches(self.train_ids, self.subsets, self.config.batch_size, self.rng)
        return shared_batches(self.train_ids, self.config.batch_size, self.rng)

    def run_epoch(self, log_fh=None) -> list[list[LossBundle]]:
        history = []
        for ids in self.epoch_batches():
            bundles = self.train_step(collate([self.train[i] for i in ids]))
            history.append(bundles)
            if log_fh is not None:
                write_log_rows(log_fh, self.step, self.group.roles, bundles)
        self.epoch += 1
        return history

    @torch.no_grad()
    def validate(self, branch_index: int = 0) -> float:
        """Token-mean MLE of one branch (the master by default) on the validation split."""
        branch = self.group.branches[branch_index]
        branch.eval()
        total, count = 0.0, 0
        bs = self.config.batch_size
        for start in range(0, len(self.valid), bs):
            batch = collate(self.valid[start : start + bs])
            out = branch(batch)
            n = int(batch.tgt_mask.sum())
            total += float(mle_loss(out.logits, batch.tgt_out, batch.tgt_mask)) * n
            count += n
        branch.train()
        return total / count

    # -- persistence
    def state_header(self) -> dict:
        return {
            "kind": "cdl-train-state",
            "train_config": self.config.to_dict(),
            "vocab": {"itos": self.vocab.itos, "freq": self.vocab.freq},
            "epoch": self.epoch,
            "step": self.step,
            "best_val": self.best_val if math.isfinite(self.best_val) else None,
            "bad_epochs": self.bad_epochs,
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii"),
            "provenance": self.provenance,
        }

    def optimizer_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for i, (branch, opt) in enumerate(zip(self.group.branches, self.optimizers)):
            for name, p in branch.named_parameters():
                for key, value in opt.state.get(p, {}).items():
                    out[f"optim{i}/{name}/{key}"] = torch.as_tensor(value, dtype=torch.float32)
        return out

    def save(self, path: str | Path) -> None:
        save_group(path, self.group, self.state_header(), self.optimizer_tensors())

    @classmethod
    def restore(
        cls,
        path: str | Path,
        train: Sequence[EncodedPair],
        valid: Sequence[EncodedPair],
        subsets: Sequence[SubsetIndex] = (),
    ) -> "Trainer":
        group, header, extra = load_group(path)
        config = TrainConfig(**{**header["train_config"], "attributes": tuple(header["train_config"]["attributes"])})
        vocab = vocab_from_header(header)
        trainer = cls(config, train, valid, vocab, subsets, header.get("provenance"))
        trainer.group.load_state_dict(group.state_dict())
        for i, (branch, opt) in enumerate(zip(trainer.group.branches, trainer.optimizers)):
            for name, p in branch.named_parameters():
                prefix = f"optim{i}/{name}/"
                state = {k[len(prefix):]: v.clone() for k, v in extra.items() if k.startswith(prefix)}
                if state:
                    opt.state[p] = state
        trainer.epoch = header["epoch"]
        trainer.step = header["step"]
        trainer.best_val = math.inf if header["best_val"] is None else header["best_val"]
        trainer.bad_epochs = header["bad_epochs"]
        trainer.rng.bit_generator.state = header["numpy_rng"]
        raw = np.frombuffer(base64.b64decode(header["torch_rng"]), dtype=np.uint8).copy()
        torch.set_rng_state(torch.from_numpy(raw))
        return trainer


def vocab_from_header(header: dict) -> Vocabulary:
    return Vocabulary(list(header["vocab"]["itos"]), dict(header["vocab"]["freq"]))


def write_log_header(fh, config: TrainConfig, provenance: dict) -> None:
    fh.write("# " + json.dumps({"seed": config.seed, **provenance}, sort_keys=True) + "\n")
    fh.write("\t".join(LOG_COLUMNS) + "\n")


def write_log_rows(fh, step: int, roles: Sequence[str], bundles: Sequence[LossBundle]) -> None:
    for role, bundle in zip(roles, bundles):
        v = bundle.as_floats()
        fh.write("\t".join([str(step), role] + [repr(v[k]) for k in LOG_COLUMNS[2:]]) + "\n")


# ------------------------------------------------------------------ fit


@dataclass
class FitResult:
    best_checkpoint: Path
    best_epoch: int
    val_history: list[float] = field(default_factory=list)
    trainer: Trainer | None = None


def prepare_subsets(config: TrainConfig, train_corpus: Corpus, out_dir: Path) -> list[SubsetIndex]:
    """Read subsets from ``subset_dir`` or, when unset, score and select them inline."""
    if not config.attributes or config.no_attributes:
        return []
    subsets = []
    if config.subset_dir:
        for attr in config.attributes:
            path = Path(config.subset_dir) / f"{attr}.subset"
            if not path.exists():
                raise FileNotFoundError(f"missing subset file {path}")
            subsets.append(read_subset(path))
        return subsets
    sub_dir = out_dir / "subsets"
    sub_dir.mkdir(parents=True, exist_ok=True)
    scoring = ScoringConfig(alpha=config.alpha, beta=config.beta, emb_dim=config.emb_dim, seed=config.seed)
    for attr in config.attributes:
        scores = score_corpus(train_corpus, attr, scoring)
        score_path = sub_dir / f"{attr}.scores"
        write_scores(scores, score_path, {"corpus_sha256": train_corpus.checksum})
        subset = build_subset(scores, config.ratio)
        write_subset(subset, sub_dir / f"{attr}.subset", file_checksum(score_path))
        subsets.append(subset)
    return subsets


def fit(config: TrainConfig, train_corpus: Corpus | None = None, valid_corpus: Corpus | None = None) -> FitResult:
    """Train until the master's validation loss stops improving for ``patience`` epochs.

    Writes ``vocab.tsv``, ``train_log.tsv``, ``valid_log.tsv`` and ``best.ckpt``
    under ``config.out_dir``.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_corpus = train_corpus or load_corpus(config.train_path)
    valid_corpus = valid_corpus or load_corpus(config.valid_path)
    vocab = build_vocab(train_corpus, config.min_freq)
    vocab.save(out_dir / "vocab.tsv")
    subsets = prepare_subsets(config, train_corpus, out_dir)
    train = encode_corpus(train_corpus, vocab, config.max_context_len, config.max_response_len)
    valid = encode_corpus(valid_corpus, vocab, config.max_context_len, config.max_response_len)
    provenance = {"train_sha256": train_corpus.checksum, "valid_sha256": valid_corpus.checksum}
    trainer = Trainer(config, train, valid, vocab, subsets, provenance)

    best_path = out_dir / "best.ckpt"
    result = FitResult(best_path, 0, trainer=trainer)
    trainer.save(best_path)
    with open(out_dir / "train_log.tsv", "w", encoding="utf-8") as log_fh, open(
        out_dir / "valid_log.tsv", "w", encoding="utf-8"
    ) as val_fh:
        write_log_header(log_fh, config, provenance)
        val_fh.write("epoch\tmaster_valid_mle\n")
        for _ in range(config.max_epochs):
            trainer.run_epoch(log_fh)
            val = trainer.validate()
            result.val_history.append(val)
            val_fh.write(f"{trainer.epoch}\t{val!r}\n")
            log.info("epoch %d master valid mle %.4f", trainer.epoch, val)
            if val < trainer.best_val:
                trainer.best_val = val
                trainer.bad_epochs = 0
                result.best_epoch = trainer.epoch
                trainer.save(best_path)
            else:
                trainer.bad_epochs += 1
                if trainer.bad_epochs >= config.patience:
                    break
    trainer.save(out_dir / "last.ckpt")
    return result


def load_checkpoint(path: str | Path) -> tuple[BranchGroup, Vocabulary, dict]:
    """Load a trained group for inference; returns (group, vocab, header)."""
    group, header, _ = load_group(path)
    group.eval()
    return group, vocab_from_header(header), header


def with_overrides(config: TrainConfig, **kwargs) -> TrainConfig:
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})
