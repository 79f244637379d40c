"""Data model, file formats, and the synthetic dataset generator."""

from .data import (
    COREF_ID,
    COREF_TOKEN,
    PAD_ID,
    PAD_TOKEN,
    PRONOUN_ID,
    PRONOUN_TOKEN,
    RESERVED_TOKENS,
    SEP_ID,
    SEP_TOKEN,
    Conversation,
    ConversationTurn,
    Corpus,
    Document,
    Qrels,
    RunFile,
    Vocab,
    ranked,
    tokenize,
    tokenize_with_dropped,
)
from .generate import SPLITS, DatasetBundle, GenConfig, generate_dataset
from .io import (
    FormatError,
    atomic_write,
    read_collection,
    read_conversations,
    read_embeddings,
    read_qrels,
    read_run,
    read_tensor_block,
    read_vocab,
    write_collection,
    write_conversations,
    write_embeddings,
    write_qrels,
    write_run,
    write_tensor_block,
    write_vocab,
)

__all__ = [
    "COREF_ID", "COREF_TOKEN", "PAD_ID", "PAD_TOKEN", "PRONOUN_ID",
    "PRONOUN_TOKEN", "RESERVED_TOKENS", "SEP_ID", "SEP_TOKEN",
    "Conversation", "ConversationTurn", "Corpus", "Document", "Qrels",
    "RunFile", "Vocab", "ranked", "tokenize", "tokenize_with_dropped",
    "SPLITS", "DatasetBundle", "GenConfig", "generate_dataset",
    "FormatError", "atomic_write", "read_collection", "read_conversations",
    "read_embeddings", "read_qrels", "read_run", "read_tensor_block",
    "read_vocab", "write_collection", "write_conversations",
    "write_embeddings", "write_qrels", "write_run", "write_tensor_block",
    "write_vocab",
]
