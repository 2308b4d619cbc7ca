"""Attribute-aware collaborative dialogue learning.

A master response generator is trained together with auxiliary branches, each
fitted to the slice of the corpus that scores highest on one dialogue
attribute (coherence, informativeness or specificity). Branches teach each
other through positive distillation, and auxiliaries push apart through
negative distillation on predictions and orthogonally projected hidden states.
"""

from .corpus import Corpus, DialoguePair, Vocabulary, build_vocab, encode, load_corpus, tokenize
from .distill import DistillOptions, group_losses, orthogonal_reject
from .eval import MetricReport, branch_l2, evaluate_responses
from .model import BranchConfig, BranchGroup, beam_search
from .scoring import ATTRIBUTES, ScoringConfig, score_corpus
from .selection import SubsetIndex, build_subset
from .trainer import NumericalAbort, TrainConfig, Trainer, fit, load_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ATTRIBUTES",
    "BranchConfig",
    "BranchGroup",
    "Corpus",
    "DialoguePair",
    "DistillOptions",
    "MetricReport",
    "NumericalAbort",
    "ScoringConfig",
    "SubsetIndex",
    "TrainConfig",
    "Trainer",
    "Vocabulary",
    "beam_search",
    "branch_l2",
    "build_subset",
    "build_vocab",
    "encode",
    "evaluate_responses",
    "fit",
    "group_losses",
    "load_checkpoint",
    "load_corpus",
    "orthogonal_reject",
    "score_corpus",
    "tokenize",
]
