"""Neural PCFG induction with collapse diagnostics and focused training."""

from .checkpoint import (
    load_grammar,
    load_parameters,
    save_grammar,
    save_parameters,
)
from .corpus import (
    Corpus,
    GrammarSampler,
    Vocabulary,
    build_vocabulary,
    corpus_f1,
    load_manifest,
    load_treebank,
    make_corpus,
    parse_bracketed,
    sentence_f1,
    toy_grammar,
)
from .diagnostics import DiagnosticsReport, diagnose, gpj, jsd, kl_divergence
from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateGrammarError,
    GrammarShapeError,
    NpcfgError,
    NumericError,
    TreebankParseError,
    VocabularyMismatchError,
)
from .grammar import (
    LOG_ZERO,
    Grammar,
    SymbolTable,
    is_log_zero,
    uniform_grammar,
    validate_grammar,
)
from .inference import (
    RuleCounts,
    SpanMask,
    build_chart,
    constrained_inside_logprob,
    expected_rule_counts,
    inside_logprob,
    mbr_decode,
    span_posteriors,
    viterbi_decode,
)
from .params import (
    ParameterSet,
    backward,
    compute_grammar,
    forward_with_cache,
    init_parameters,
)
from .trees import ParseTree, tree_to_spans
from .training import TrainConfig, batch_loss, corpus_nll, train

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "CheckpointError",
    "ConfigError",
    "Corpus",
    "DataError",
    "DegenerateGrammarError",
    "DiagnosticsReport",
    "Grammar",
    "GrammarSampler",
    "GrammarShapeError",
    "LOG_ZERO",
    "NpcfgError",
    "NumericError",
    "ParameterSet",
    "ParseTree",
    "RuleCounts",
    "SpanMask",
    "SymbolTable",
    "TrainConfig",
    "TreebankParseError",
    "Vocabulary",
    "VocabularyMismatchError",
    "backward",
    "batch_loss",
    "build_chart",
    "build_vocabulary",
    "compute_grammar",
    "constrained_inside_logprob",
    "corpus_f1",
    "corpus_nll",
    "diagnose",
    "expected_rule_counts",
    "forward_with_cache",
    "gpj",
    "init_parameters",
    "inside_logprob",
    "is_log_zero",
    "jsd",
    "kl_divergence",
    "load_grammar",
    "load_manifest",
    "load_parameters",
    "load_treebank",
    "make_corpus",
    "mbr_decode",
    "parse_bracketed",
    "save_grammar",
    "save_parameters",
    "sentence_f1",
    "span_posteriors",
    "toy_grammar",
    "train",
    "tree_to_spans",
    "uniform_grammar",
    "validate_grammar",
    "viterbi_decode",
]
