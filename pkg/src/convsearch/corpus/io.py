"""File formats: TREC qrels/runs, JSONL conversations, TSV collections,
the CDR1 binary tensor block, and atomic writes."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .data import Conversation, ConversationTurn, Corpus, Document, Qrels, RunFile, Vocab


@contextmanager
def atomic_write(path, mode: str = "w"):
    """Write to a temp file in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, mode, **({"newline": "\n"} if "b" not in mode else {})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


class FormatError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


# ---- TREC qrels: "qid 0 doc_id grade" ----

def write_qrels(path, qrels: Qrels) -> None:
    with atomic_write(path) as fh:
        for (qid, doc_id), grade in sorted(qrels.items()):
            fh.write(f"{qid} 0 {doc_id} {grade}\n")


def read_qrels(path) -> Qrels:
    qrels = Qrels()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(path, line_no, f"expected 4 fields, got {len(parts)}")
            qid, _, doc_id, grade = parts
            try:
                qrels.add(qid, doc_id, int(grade))
            except ValueError as exc:
                raise FormatError(path, line_no, str(exc)) from exc
    return qrels


# ---- TREC run: "qid Q0 doc_id rank score tag" ----

def write_run(path, run: RunFile, tag: str = "convsearch") -> None:
    with atomic_write(path) as fh:
        for qid in run.qids():
            for rank, (doc_id, score) in enumerate(run.ranking(qid), start=1):
                fh.write(f"{qid} Q0 {doc_id} {rank} {score!r} {tag}\n")


def read_run(path) -> RunFile:
    per_qid: dict[str, list[tuple[str, float]]] = {}
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise FormatError(path, line_no, f"expected 6 fields, got {len(parts)}")
            qid, _, doc_id, _, score, _ = parts
            if (qid, doc_id) in seen:
                raise FormatError(path, line_no, f"duplicate (qid, doc_id) ({qid}, {doc_id})")
            seen.add((qid, doc_id))
            try:
                per_qid.setdefault(qid, []).append((doc_id, float(score)))
            except ValueError as exc:
                raise FormatError(path, line_no, f"bad score {score!r}") from exc
    run = RunFile()
    for qid, items in per_qid.items():
        try:
            run.set_ranking(qid, items, presorted=True)
        except ValueError as exc:
            raise FormatError(path, 0, str(exc)) from exc
    return run


# ---- JSONL conversations ----

def write_conversations(path, conversations, vocab: Vocab) -> None:
    with atomic_write(path) as fh:
        for conv in conversations:
            obj = {
                "topic_id": conv.topic_id,
                "turns": [
                    {
                        "turn_no": t.turn_no,
                        "raw": vocab.to_text(t.raw_tokens),
                        "oracle": vocab.to_text(t.oracle_tokens),
                        "rewriter": vocab.to_text(t.rewriter_tokens),
                    }
                    for t in conv.turns
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_conversations(path, vocab: Vocab) -> list[Conversation]:
    conversations = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                turns = [
                    ConversationTurn(
                        topic_id=obj["topic_id"],
                        turn_no=turn["turn_no"],
                        raw_tokens=[vocab.id(w) for w in turn["raw"].split()],
                        oracle_tokens=[vocab.id(w) for w in turn["oracle"].split()],
                        rewriter_tokens=[vocab.id(w) for w in turn["rewriter"].split()],
                    )
                    for turn in obj["turns"]
                ]
                conv = Conversation(topic_id=obj["topic_id"], turns=turns)
                conv.validate()
            except (KeyError, ValueError) as exc:
                raise FormatError(path, line_no, str(exc)) from exc
            conversations.append(conv)
    return conversations


# ---- TSV collection: doc_id<TAB>text ----

def write_collection(path, corpus: Corpus, vocab: Vocab) -> None:
    with atomic_write(path) as fh:
        for doc in corpus:
            fh.write(f"{doc.doc_id}\t{vocab.to_text(doc.tokens)}\n")


def read_collection(path, vocab: Vocab) -> Corpus:
    corpus = Corpus()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(path, line_no, f"expected 2 tab-separated fields, got {len(parts)}")
            doc_id, text = parts
            try:
                corpus.add(Document(doc_id, [vocab.id(w) for w in text.split()]))
            except (KeyError, ValueError) as exc:
                raise FormatError(path, line_no, str(exc)) from exc
    return corpus


# ---- vocabulary sidecar (JSON) ----

def write_vocab(path, vocab: Vocab) -> None:
    entries = [{"token": tok, "id": tid, "class": cls} for tok, tid, cls in vocab.items()]
    with atomic_write(path) as fh:
        json.dump({"tokens": entries}, fh, indent=0, sort_keys=True)
        fh.write("\n")


def read_vocab(path) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        entries = json.load(fh)["tokens"]
    vocab = Vocab()
    for entry in sorted(entries, key=lambda e: e["id"]):
        if entry["id"] < len(vocab):
            if vocab.token(entry["id"]) != entry["token"]:
                raise ValueError(f"reserved id {entry['id']} remapped to {entry['token']!r}")
            continue
        got = vocab.add(entry["token"], entry["class"])
        if got != entry["id"]:
            raise ValueError(f"non-dense vocab ids: expected {got}, got {entry['id']}")
    return vocab


# ---- CDR1 binary tensor block ----
# magic "CDR1", u32 LE dim, u64 LE count, count*dim float32 LE row-major

_MAGIC = b"CDR1"


def write_tensor_block(fh, matrix: np.ndarray) -> None:
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2:
        raise ValueError("tensor block stores 2-D arrays")
    count, dim = mat.shape
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", dim))
    fh.write(struct.pack("<Q", count))
    fh.write(mat.tobytes(order="C"))


def read_tensor_block(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    dim = struct.unpack("<I", fh.read(4))[0]
    count = struct.unpack("<Q", fh.read(8))[0]
    data = fh.read(count * dim * 4)
    if len(data) != count * dim * 4:
        raise ValueError("truncated tensor block")
    return np.frombuffer(data, dtype="<f4").reshape(count, dim).copy()


def write_embeddings(path, doc_ids, matrix: np.ndarray) -> None:
    """CDR1 file plus a .ids sidecar with one doc_id per line in row order."""
    if len(doc_ids) != matrix.shape[0]:
        raise ValueError("doc_ids and matrix row count differ")
    with atomic_write(path, "wb") as fh:
        write_tensor_block(fh, matrix)
    with atomic_write(str(path) + ".ids") as fh:
        for doc_id in doc_ids:
            fh.write(doc_id + "\n")


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        matrix = read_tensor_block(fh)
    with open(str(path) + ".ids", encoding="utf-8") as fh:
        doc_ids = [line.rstrip("\n") for line in fh if line.strip()]
    if len(doc_ids) != matrix.shape[0]:
        raise ValueError("sidecar id count does not match matrix rows")
    return doc_ids, matrix
