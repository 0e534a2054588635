"""Grammar-driven expression completion with attribute-graph message passing."""

from .grammar import Grammar, builtin_grammar, load_grammar, type_check
from .model import CONFIGS, Model, decode_beam, train
from .pipeline import Sample, extract_samples, generate_corpus, read_jsonl, write_jsonl

__all__ = [
    "Grammar",
    "builtin_grammar",
    "load_grammar",
    "type_check",
    "CONFIGS",
    "Model",
    "decode_beam",
    "train",
    "Sample",
    "extract_samples",
    "generate_corpus",
    "read_jsonl",
    "write_jsonl",
]
