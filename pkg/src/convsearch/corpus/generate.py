"""Synthetic conversational-search dataset generator.

Each topic owns 3 topic tokens, each facet 2 facet tokens. Oracle queries
spell out topic + facet; raw follow-up turns may replace the topic tokens
with <pronoun> (omission) or the facet tokens with <coref> (coreference,
repeating the previous turn's facet). A noisy rewriter emits the oracle
except when it withdraws to the raw query. Relevant documents contain the
full topic+facet token set; distractors pair a facet with a foreign topic.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    COREF_ID,
    PRONOUN_ID,
    Conversation,
    ConversationTurn,
    Corpus,
    Document,
    Qrels,
    Vocab,
)
from . import io as corpus_io

FUNCTION_WORDS = (
    "what", "is", "the", "of", "a", "about", "how", "do", "does", "it",
    "in", "are", "and", "to", "for", "on", "with", "that", "was", "more",
    "tell", "me", "why", "can",
)


@dataclass
class GenConfig:
    n_topics: int = 200
    facets_per_topic: int = 5
    turns_per_conversation: int = 8
    docs_per_facet: int = 3
    distractor_docs: int = 5000
    p_omit: float = 0.7
    p_coref: float = 0.3
    rewriter_error_rate: float = 0.25
    split_train: float = 0.7
    split_dev: float = 0.1
    split_test: float = 0.2

    def validate(self) -> None:
        if self.n_topics < 1 or self.facets_per_topic < 1:
            raise ValueError("need at least one topic and one facet per topic")
        if self.turns_per_conversation < 1 or self.docs_per_facet < 1:
            raise ValueError("need at least one turn and one doc per facet")
        if self.distractor_docs < 0:
            raise ValueError("distractor_docs must be >= 0")
        for name in ("p_omit", "p_coref", "rewriter_error_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        total = self.split_train + self.split_dev + self.split_test
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")

    @classmethod
    def from_json(cls, path) -> "GenConfig":
        with open(path, encoding="utf-8") as fh:
            cfg = cls(**json.load(fh))
        cfg.validate()
        return cfg


SPLITS = ("train", "dev", "test")


@dataclass
class DatasetBundle:
    vocab: Vocab
    corpus: Corpus
    qrels: Qrels
    conversations: dict[str, list[Conversation]]
    config: GenConfig
    seed: int

    def split(self, name: str) -> list[Conversation]:
        return self.conversations[name]

    def all_conversations(self) -> list[Conversation]:
        return [c for name in SPLITS for c in self.conversations[name]]

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        corpus_io.write_vocab(out / "vocab.json", self.vocab)
        corpus_io.write_collection(out / "collection.tsv", self.corpus, self.vocab)
        corpus_io.write_qrels(out / "qrels.txt", self.qrels)
        for name in SPLITS:
            corpus_io.write_conversations(
                out / f"conversations.{name}.jsonl", self.conversations[name], self.vocab)
        with corpus_io.atomic_write(out / "gen_config.json") as fh:
            json.dump({"seed": self.seed, **dataclasses.asdict(self.config)},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, in_dir) -> "DatasetBundle":
        src = Path(in_dir)
        vocab = corpus_io.read_vocab(src / "vocab.json")
        with open(src / "gen_config.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        seed = meta.pop("seed")
        return cls(
            vocab=vocab,
            corpus=corpus_io.read_collection(src / "collection.tsv", vocab),
            qrels=corpus_io.read_qrels(src / "qrels.txt"),
            conversations={
                name: corpus_io.read_conversations(src / f"conversations.{name}.jsonl", vocab)
                for name in SPLITS
            },
            config=GenConfig(**meta),
            seed=seed,
        )


def generate_dataset(cfg: GenConfig, seed: int) -> DatasetBundle:
    """Build vocabulary, corpus, conversations and qrels from one seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)

    vocab = Vocab()
    function_ids = [vocab.add(w, "function") for w in FUNCTION_WORDS]
    topic_tokens: list[list[int]] = []
    facet_tokens: list[list[list[int]]] = []
    for t in range(cfg.n_topics):
        topic_tokens.append([vocab.add(f"t{t:03d}{c}", "topic") for c in "abc"])
        facet_tokens.append([
            [vocab.add(f"f{t:03d}x{f}{c}", "facet") for c in "ab"]
            for f in range(cfg.facets_per_topic)
        ])

    def filler(lo: int, hi: int) -> list[int]:
        n = int(rng.integers(lo, hi + 1))
        return [function_ids[int(i)] for i in rng.integers(0, len(function_ids), n)]

    # passages also carry anaphora: the reserved pronoun/demonstrative tokens
    # show up as ordinary document words (queries' oracle rewrites never use them)
    doc_filler_pool = function_ids + [PRONOUN_ID] * 3 + [COREF_ID]

    def doc_filler(lo: int, hi: int) -> list[int]:
        n = int(rng.integers(lo, hi + 1))
        return [doc_filler_pool[int(i)] for i in rng.integers(0, len(doc_filler_pool), n)]

    # documents: per (topic, facet) docs_per_facet fully relevant (grade 2)
    # and docs_per_facet partially relevant (grade 1), plus distractors that
    # pair a facet with a foreign topic. Ids are assigned after a shuffle so
    # that doc_id order carries no relevance signal (score ties stay honest).
    doc_specs: list[tuple[str, int, list[int]]] = []  # (role, slot, tokens)

    def add_doc(role: str, slot: int, tokens: list[int]) -> None:
        shuffled = list(tokens)
        rng.shuffle(shuffled)
        doc_specs.append((role, slot, shuffled))

    for t in range(cfg.n_topics):
        for f in range(cfg.facets_per_topic):
            slot = t * cfg.facets_per_topic + f
            for _ in range(cfg.docs_per_facet):
                add_doc("g2", slot, topic_tokens[t] + facet_tokens[t][f] + doc_filler(3, 6))
            for i in range(cfg.docs_per_facet):
                add_doc("g1", slot,
                        topic_tokens[t] + [facet_tokens[t][f][i % 2]] + doc_filler(3, 6))
    if cfg.n_topics > 1:
        for _ in range(cfg.distractor_docs):
            t = int(rng.integers(0, cfg.n_topics))
            f = int(rng.integers(0, cfg.facets_per_topic))
            other = int(rng.integers(0, cfg.n_topics - 1))
            if other >= t:
                other += 1
            add_doc("distract", t * cfg.facets_per_topic + f,
                    topic_tokens[other] + facet_tokens[t][f] + doc_filler(3, 6))

    order_docs = rng.permutation(len(doc_specs))
    corpus = Corpus()
    grade2_docs: dict[tuple[int, int], list[str]] = {}
    grade1_docs: dict[tuple[int, int], list[str]] = {}
    distractors: dict[tuple[int, int], list[str]] = {}
    registry = {"g2": grade2_docs, "g1": grade1_docs, "distract": distractors}
    for doc_counter, spec_idx in enumerate(order_docs):
        role, slot, tokens = doc_specs[spec_idx]
        doc_id = f"D{doc_counter:06d}"
        corpus.add(Document(doc_id, tokens))
        key = (slot // cfg.facets_per_topic, slot % cfg.facets_per_topic)
        registry[role].setdefault(key, []).append(doc_id)

    # conversations and qrels; facet flow is sticky, CAsT-like: a turn either
    # corefs the previous facet, re-states it explicitly, or moves on to a
    # facet not yet discussed (cycling back only when all have been visited).
    # Conversations explore early and focus late, and later turns omit the
    # topic more often (later turns depend more on context).
    stay_lo, stay_hi = 0.5, 0.95
    qrels = Qrels()
    conversations: list[Conversation] = []
    n_turns = cfg.turns_per_conversation

    def phase(k: int) -> float:
        return (k - 2) / (n_turns - 2) if n_turns > 2 else 0.5

    # later turns omit the topic more often; the ramp span scales away for
    # small p_omit so a noise-free config stays noise-free, and the pooled
    # omission rate over turns 2..n stays p_omit
    omit_span = 0.56 * min(1.0, cfg.p_omit / 0.7)

    for t in range(cfg.n_topics):
        topic_id = f"T{t:03d}"
        turns: list[ConversationTurn] = []
        prev_facet: int | None = None
        unvisited: list[int] = []
        for k in range(1, n_turns + 1):
            p_stay = stay_lo + (stay_hi - stay_lo) * phase(k)
            p_omit_k = min(1.0, max(0.0, cfg.p_omit + omit_span * (phase(k) - 0.5)))
            coref = k > 1 and float(rng.random()) < cfg.p_coref
            stay = k > 1 and not coref and float(rng.random()) < p_stay
            omit = k > 1 and float(rng.random()) < p_omit_k
            if coref or stay:
                facet = prev_facet
            else:
                if not unvisited:
                    unvisited = list(rng.permutation(cfg.facets_per_topic))
                facet = int(unvisited.pop())
            functions = filler(3, 5)
            oracle = topic_tokens[t] + facet_tokens[t][facet] + functions
            if k == 1:
                raw = list(oracle)
            else:
                topic_part = [PRONOUN_ID] if omit else list(topic_tokens[t])
                facet_part = [COREF_ID] if coref else list(facet_tokens[t][facet])
                raw = topic_part + facet_part + functions
            withdraw = float(rng.random()) < cfg.rewriter_error_rate
            rewriter = list(raw) if withdraw else list(oracle)
            turns.append(ConversationTurn(topic_id, k, raw, list(oracle), rewriter))
            prev_facet = facet

            qid = f"{topic_id}_{k}"
            for doc_id in grade2_docs[(t, facet)]:
                qrels.add(qid, doc_id, 2)
            for doc_id in grade1_docs[(t, facet)]:
                qrels.add(qid, doc_id, 1)
            for doc_id in distractors.get((t, facet), ()):
                qrels.add(qid, doc_id, 0)
        conv = Conversation(topic_id, turns)
        conv.validate()
        conversations.append(conv)

    # split by topic
    order = list(rng.permutation(cfg.n_topics))
    n_train = int(round(cfg.split_train * cfg.n_topics))
    n_dev = int(round(cfg.split_dev * cfg.n_topics))
    split_of = {}
    for rank, t in enumerate(order):
        if rank < n_train:
            split_of[t] = "train"
        elif rank < n_train + n_dev:
            split_of[t] = "dev"
        else:
            split_of[t] = "test"
    by_split: dict[str, list[Conversation]] = {name: [] for name in SPLITS}
    for t, conv in enumerate(conversations):
        by_split[split_of[t]].append(conv)

    return DatasetBundle(vocab=vocab, corpus=corpus, qrels=qrels,
                         conversations=by_split, config=cfg, seed=seed)
