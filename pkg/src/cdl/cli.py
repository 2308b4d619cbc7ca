"""Command-line entry point: ``cdl score|split|train|generate|evaluate|diversity``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from .corpus import CorpusError, build_vocab, decode, encode_context, encode_corpus, file_checksum, load_corpus
from .eval import branch_l2_corpus, embedding_table_from_branch, evaluate_responses, write_report
from .model import beam_search
from .scoring import ATTRIBUTES, EmbeddingTable, ScoringConfig, read_scores, score_corpus, write_scores
from .selection import build_subset, write_subset
from .trainer import ConfigError, NumericalAbort, TrainConfig, fit, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _print_config(command: str, values: dict) -> None:
    print(json.dumps({"command": command, **values}, sort_keys=True, default=str))


def cmd_score(args) -> int:
    corpus = load_corpus(args.corpus)
    cfg = ScoringConfig(alpha=args.alpha, beta=args.beta, emb_dim=args.emb_dim, seed=args.seed)
    scores = score_corpus(corpus, args.attribute, cfg)
    write_scores(
        scores,
        args.out,
        {"corpus_sha256": corpus.checksum, "alpha": args.alpha, "beta": args.beta, "emb_dim": args.emb_dim, "seed": args.seed},
    )
    return EXIT_OK


def cmd_split(args) -> int:
    scores = read_scores(args.scores)
    write_subset(build_subset(scores, args.ratio), args.out, file_checksum(args.scores))
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {
        "train_path": args.train,
        "valid_path": args.valid,
        "out_dir": args.out_dir,
        "seed": args.seed,
        "max_epochs": args.max_epochs,
    }
    for flag in ("no_attributes", "no_orthogonal", "no_nd_hidden", "no_nd"):
        if getattr(args, flag):
            overrides[flag] = True
    config = TrainConfig.from_file(args.config, **overrides) if args.config else TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    if not config.train_path or not config.valid_path:
        raise UsageError("train: train_path and valid_path are required (config file or --train/--valid)")
    _print_config("train", config.to_dict())
    result = fit(config)
    print(json.dumps({"best_checkpoint": str(result.best_checkpoint), "best_epoch": result.best_epoch, "val_history": result.val_history}))
    return EXIT_OK


def _inference_branches(group, choice: str):
    if choice == "master":
        return group.master
    if choice == "ensemble":
        return list(group.branches)
    try:
        return group.branches[int(choice)]
    except (ValueError, IndexError):
        raise UsageError(f"--branch must be master, ensemble or a branch index < {len(group)}") from None


def cmd_generate(args) -> int:
    group, vocab, header = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    branches = _inference_branches(group, args.branch)
    max_len = args.max_len or group.cfg.max_response_len
    meta = {
        "checkpoint_sha256": file_checksum(args.checkpoint),
        "corpus_sha256": corpus.checksum,
        "beam": args.beam,
        "max_len": max_len,
        "branch": args.branch,
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        for pair in corpus:
            ctx = encode_context(pair.context_tokens, vocab, group.cfg.max_context_len)
            seq = beam_search(branches, ctx, beam=args.beam, max_len=max_len)
            fh.write(json.dumps({"id": pair.id, "hypothesis": " ".join(decode(seq, vocab))}) + "\n")
    return EXIT_OK


def read_hypotheses(path) -> dict[int, list[str]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#") or not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[int(rec["id"])] = rec["hypothesis"].split()
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError):
                raise CorpusError(f"{path}:{lineno}: malformed hypothesis record") from None
    return out


def cmd_evaluate(args) -> int:
    hyps = read_hypotheses(args.hypotheses)
    refs = load_corpus(args.references)
    train = load_corpus(args.train)
    missing = [p.id for p in refs if p.id not in hyps]
    if missing:
        raise CorpusError(f"no hypothesis for reference ids {missing[:5]}")
    provenance = {
        "hypotheses_sha256": file_checksum(args.hypotheses),
        "references_sha256": refs.checksum,
        "train_sha256": train.checksum,
        "lf_threshold": args.lf_threshold,
    }
    if args.checkpoint:
        group, vocab, _ = load_checkpoint(args.checkpoint)
        emb = embedding_table_from_branch(group, vocab)
        provenance["checkpoint_sha256"] = file_checksum(args.checkpoint)
    else:
        emb = EmbeddingTable.from_cooccurrence(train, dim=64, seed=0)
    provenance["embeddings"] = emb.meta
    report = evaluate_responses(
        [hyps[p.id] for p in refs],
        [p.response_tokens for p in refs],
        [p.flat_context_tokens() for p in refs],
        [p.response_tokens for p in train],
        build_vocab(train).freq,
        emb,
        args.lf_threshold,
    )
    write_report(report, args.out, provenance)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_diversity(args) -> int:
    group, vocab, _ = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    encoded = encode_corpus(corpus, vocab, group.cfg.max_context_len, group.cfg.max_response_len)
    value = branch_l2_corpus(group, encoded)
    print(json.dumps({"branch_l2": value}))
    if args.out:
        write_report(
            {"branch_l2": value},
            args.out,
            {"checkpoint_sha256": file_checksum(args.checkpoint), "corpus_sha256": corpus.checksum},
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdl", description="Attribute-aware collaborative dialogue learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("score", help="score every pair of a corpus for one attribute")
    p.add_argument("--corpus", required=True, help="line-delimited corpus file")
    p.add_argument("--attribute", required=True, choices=ATTRIBUTES)
    p.add_argument("--out", required=True, help="score file to write")
    p.add_argument("--alpha", type=float, default=0.5, help="connectivity weight (default 0.5)")
    p.add_argument("--beta", type=float, default=0.5, help="relatedness weight (default 0.5)")
    p.add_argument("--emb-dim", type=int, default=64, help="embedding rank for relatedness (default 64)")
    p.add_argument("--seed", type=int, default=0, help="seed for the embedding factorisation (default 0)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("split", help="select the top fraction of pairs from a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--ratio", type=float, default=0.7, help="selection ratio (default 0.7)")
    p.add_argument("--out", required=True, help="subset index file to write")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a branch group")
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--train", help="training corpus (overrides train_path)")
    p.add_argument("--valid", help="validation corpus (overrides valid_path)")
    p.add_argument("--out-dir", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, help="random seed (overrides seed)")
    p.add_argument("--max-epochs", type=int, help="epoch cap (overrides max_epochs)")
    p.add_argument("--no-attributes", action="store_true", help="auxiliaries use the whole batch for MLE")
    p.add_argument("--no-orthogonal", action="store_true", help="hidden ND on raw states, no projection")
    p.add_argument("--no-nd-hidden", action="store_true", help="drop the hidden-state ND term")
    p.add_argument("--no-nd", action="store_true", help="drop both ND terms")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="beam-search responses for a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="hypotheses file to write")
    p.add_argument("--beam", type=int, default=5, help="beam size (default 5)")
    p.add_argument("--max-len", type=int, default=0, help="maximum response length (default: model maximum)")
    p.add_argument("--branch", default="master", help="master, ensemble or a branch index (default master)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="compute the automatic metric report")
    p.add_argument("--hypotheses", required=True)
    p.add_argument("--references", required=True, help="corpus holding the reference responses")
    p.add_argument("--train", required=True, help="training corpus (frequencies and n-gram tables)")
    p.add_argument("--checkpoint", help="take AVE/COH embeddings from this checkpoint's master branch")
    p.add_argument("--lf-threshold", type=int, default=100, help="low-frequency threshold (default 100)")
    p.add_argument("--out", required=True, help="report file to write")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diversity", help="branch L2 distance on a probe corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="report file to write")
    p.set_defaults(func=cmd_diversity)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        if args.command != "train":
            _print_config(args.command, {k: v for k, v in vars(args).items() if k != "func"})
        return args.func(args)
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
