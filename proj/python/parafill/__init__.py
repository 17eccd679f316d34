"""Controllable paragraph infilling: tokenizer, annotation, metrics and the generation service."""

from ._parafill import (
    DataError,
    NumericError,
    Service,
    UsageError,
    Vocab,
    bleu,
    extract_entities,
    key_sentence,
    keywords,
    nucleus_filter,
    rouge_n,
    size_class,
    split_paragraphs,
    top_k_filter,
)

__all__ = [
    "DataError",
    "NumericError",
    "Service",
    "UsageError",
    "Vocab",
    "bleu",
    "extract_entities",
    "key_sentence",
    "keywords",
    "nucleus_filter",
    "rouge_n",
    "size_class",
    "split_paragraphs",
    "top_k_filter",
]
