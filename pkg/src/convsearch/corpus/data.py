"""Core data model: vocabulary, conversations, documents, qrels, run files."""

from __future__ import annotations

from dataclasses import dataclass, field

PAD_ID = 0
SEP_ID = 1
PRONOUN_ID = 2
COREF_ID = 3

PAD_TOKEN = "<pad>"
SEP_TOKEN = "<sep>"
PRONOUN_TOKEN = "<pronoun>"
COREF_TOKEN = "<coref>"

RESERVED_TOKENS = (PAD_TOKEN, SEP_TOKEN, PRONOUN_TOKEN, COREF_TOKEN)

TOKEN_CLASSES = ("topic", "facet", "function", "reserved")


class Vocab:
    """Dense 0-based token ids with a class label per token.

    Ids 0..3 are reserved (<pad>, <sep>, <pronoun>, <coref>).
    """

    def __init__(self) -> None:
        self._token_to_id: dict[str, int] = {}
        self._tokens: list[str] = []
        self._classes: list[str] = []
        for tok in RESERVED_TOKENS:
            self.add(tok, "reserved")

    def add(self, token: str, token_class: str) -> int:
        if token in self._token_to_id:
            raise ValueError(f"duplicate token {token!r}")
        if token_class not in TOKEN_CLASSES:
            raise ValueError(f"unknown token class {token_class!r}")
        if not token or token.split() != [token]:
            raise ValueError(f"token {token!r} must be non-empty and whitespace-free")
        tid = len(self._tokens)
        self._token_to_id[token] = tid
        self._tokens.append(token)
        self._classes.append(token_class)
        return tid

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id(self, token: str) -> int:
        return self._token_to_id[token]

    def token(self, tid: int) -> str:
        return self._tokens[tid]

    def token_class(self, tid: int) -> str:
        return self._classes[tid]

    def items(self):
        """(token, id, class) triples in id order."""
        return [(tok, i, self._classes[i]) for i, tok in enumerate(self._tokens)]

    def to_text(self, ids) -> str:
        return " ".join(self._tokens[i] for i in ids)


def tokenize_with_dropped(text: str, vocab: Vocab) -> tuple[list[int], int]:
    """Lowercase, split on whitespace, map known tokens; unknowns are dropped."""
    ids: list[int] = []
    dropped = 0
    for word in text.lower().split():
        if word in vocab:
            ids.append(vocab.id(word))
        else:
            dropped += 1
    return ids, dropped


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return tokenize_with_dropped(text, vocab)[0]


@dataclass
class ConversationTurn:
    topic_id: str
    turn_no: int
    raw_tokens: list[int]
    oracle_tokens: list[int]
    rewriter_tokens: list[int]

    @property
    def qid(self) -> str:
        return f"{self.topic_id}_{self.turn_no}"


@dataclass
class Conversation:
    topic_id: str
    turns: list[ConversationTurn]

    def validate(self) -> None:
        for i, turn in enumerate(self.turns, start=1):
            if turn.turn_no != i:
                raise ValueError(f"{self.topic_id}: turn numbers must be 1..n consecutive")
            if turn.topic_id != self.topic_id:
                raise ValueError(f"{self.topic_id}: turn has foreign topic {turn.topic_id!r}")
            if not turn.raw_tokens or not turn.oracle_tokens or not turn.rewriter_tokens:
                raise ValueError(f"{turn.qid}: empty token list")
        if self.turns and self.turns[0].raw_tokens != self.turns[0].oracle_tokens:
            raise ValueError(f"{self.topic_id}: first turn must have raw == oracle")


@dataclass
class Document:
    doc_id: str
    tokens: list[int]


class Corpus:
    """Documents with unique ids, in insertion order."""

    def __init__(self, documents=()) -> None:
        self._docs: list[Document] = []
        self._by_id: dict[str, Document] = {}
        for doc in documents:
            self.add(doc)

    def add(self, doc: Document) -> None:
        if not doc.tokens:
            raise ValueError(f"document {doc.doc_id!r} has no tokens")
        if doc.doc_id in self._by_id:
            raise ValueError(f"duplicate doc_id {doc.doc_id!r}")
        self._docs.append(doc)
        self._by_id[doc.doc_id] = doc

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self):
        return iter(self._docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def get(self, doc_id: str) -> Document:
        return self._by_id[doc_id]

    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self._docs]


class Qrels:
    """Graded judgments; a missing (qid, doc) pair means unjudged, not grade 0."""

    def __init__(self) -> None:
        self._grades: dict[tuple[str, str], int] = {}
        self._by_qid: dict[str, dict[str, int]] = {}

    def add(self, qid: str, doc_id: str, grade: int) -> None:
        if grade not in (0, 1, 2):
            raise ValueError(f"grade must be 0, 1 or 2, got {grade}")
        key = (qid, doc_id)
        if key in self._grades:
            raise ValueError(f"duplicate judgment for {key}")
        self._grades[key] = grade
        self._by_qid.setdefault(qid, {})[doc_id] = grade

    def __len__(self) -> int:
        return len(self._grades)

    def grade(self, qid: str, doc_id: str) -> int | None:
        """Grade if judged, else None."""
        return self._grades.get((qid, doc_id))

    def judged(self, qid: str) -> dict[str, int]:
        return self._by_qid.get(qid, {})

    def qids(self) -> list[str]:
        return sorted(self._by_qid)

    def items(self):
        return self._grades.items()

    def relevant_docs(self, qid: str, min_grade: int = 1) -> list[str]:
        return [d for d, g in self._by_qid.get(qid, {}).items() if g >= min_grade]


def ranked(scored) -> list[tuple[str, float]]:
    """Canonical ranking order: descending score, ties by doc_id ascending."""
    return sorted(scored, key=lambda pair: (-pair[1], pair[0]))


class RunFile:
    """Per-query ranked (doc_id, score) lists, scores non-increasing."""

    def __init__(self) -> None:
        self._rankings: dict[str, list[tuple[str, float]]] = {}

    def set_ranking(self, qid: str, scored, presorted: bool = False) -> None:
        items = list(scored) if presorted else ranked(scored)
        seen = set()
        prev = None
        for doc_id, score in items:
            if doc_id in seen:
                raise ValueError(f"duplicate doc_id {doc_id!r} for qid {qid!r}")
            seen.add(doc_id)
            if prev is not None and score > prev:
                raise ValueError(f"scores increase within qid {qid!r}")
            prev = score
        self._rankings[qid] = [(d, float(s)) for d, s in items]

    def ranking(self, qid: str) -> list[tuple[str, float]]:
        return self._rankings[qid]

    def qids(self) -> list[str]:
        return sorted(self._rankings)

    def __contains__(self, qid: str) -> bool:
        return qid in self._rankings

    def __len__(self) -> int:
        return len(self._rankings)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunFile) and self._rankings == other._rankings
