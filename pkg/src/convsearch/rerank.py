"""Cross-encoder reranking over conversation + document pairs, and
reciprocal-rank fusion of run files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import Array, Tape
from .corpus import SEP_ID, Corpus, RunFile, ranked
from .encoder import load_checkpoint_raw, save_checkpoint


@dataclass
class CrossEncoderConfig:
    d_emb: int = 64
    d_hid: int = 128
    init_scale: float = 0.1
    seed: int = 0


@dataclass
class CrossEncoderParams:
    embeddings: Array  # (vocab, d_emb), shared by query and doc tokens
    w1: Array          # (d_emb, d_hid)
    b1: Array          # (d_hid,)
    w2: Array          # (d_hid,)
    b2: Array          # scalar

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    def tensors(self) -> dict[str, Array]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_tensors(cls, tensors: dict[str, Array]) -> "CrossEncoderParams":
        fixed = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        fixed["b2"] = fixed["b2"].reshape(())
        return cls(**fixed)

    def copy(self) -> "CrossEncoderParams":
        return CrossEncoderParams(**{k: v.copy() for k, v in self.tensors().items()})


def init_cross_encoder(config: CrossEncoderConfig, vocab_size: int) -> CrossEncoderParams:
    if min(config.d_emb, config.d_hid) < 1 or vocab_size < 1:
        raise ValueError("dimensions and vocab_size must be >= 1")
    rng = np.random.default_rng(config.seed)
    s = config.init_scale
    return CrossEncoderParams(
        embeddings=rng.uniform(-s, s, (vocab_size, config.d_emb)),
        w1=rng.uniform(-s, s, (config.d_emb, config.d_hid)),
        b1=rng.uniform(-s, s, config.d_hid),
        w2=rng.uniform(-s, s, config.d_hid),
        b2=np.asarray(rng.uniform(-s, s)),
    )


def _pair_tokens(query_tokens, doc_tokens) -> list[int]:
    if len(query_tokens) == 0 or len(doc_tokens) == 0:
        raise ValueError("query and document token lists must be non-empty")
    return list(query_tokens) + [SEP_ID] + list(doc_tokens)


def cross_pooled(params: CrossEncoderParams, query_tokens, doc_tokens) -> Array:
    """Mean embedding of query <sep> doc: the scoring head's input."""
    idx = np.asarray(_pair_tokens(query_tokens, doc_tokens), dtype=np.intp)
    if idx.min() < 0 or idx.max() >= params.vocab_size:
        raise IndexError("token id out of vocabulary range")
    return params.embeddings[idx].mean(axis=0)


def cross_score(params: CrossEncoderParams, query_tokens, doc_tokens) -> float:
    """MLP over the pooled pair embedding; higher means more relevant."""
    pooled = cross_pooled(params, query_tokens, doc_tokens)
    hidden = np.tanh(pooled @ params.w1 + params.b1)
    return float(hidden @ params.w2 + params.b2)


def cross_score_on_tape(tape: Tape, leaves: dict[str, int],
                        query_tokens, doc_tokens) -> tuple[int, int]:
    """(score node, pooled node) for one pair; differentiable."""
    idx = np.asarray(_pair_tokens(query_tokens, doc_tokens), dtype=np.intp)
    pooled = tape.mean_rows(tape.gather(leaves["embeddings"], idx))
    hidden = tape.tanh(tape.add_bias(tape.matmul(pooled, leaves["w1"]), leaves["b1"]))
    score = tape.scalar_add(tape.dot(hidden, leaves["w2"]), leaves["b2"])
    return score, pooled


def rerank(run: RunFile, scorer, corpus: Corpus, depth: int = 100) -> RunFile:
    """Rescore the top-`depth` docs per qid with `scorer(doc_tokens)`-style
    callable `scorer(qid, doc_tokens) -> float`; docs below the reranked
    block keep their original relative order."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    out = RunFile()
    for qid in run.qids():
        ranking = run.ranking(qid)
        head, tail = ranking[:depth], ranking[depth:]
        for doc_id, _ in head:
            if doc_id not in corpus:
                raise KeyError(f"doc {doc_id!r} not in corpus")
        rescored = ranked([(doc_id, scorer(qid, corpus.get(doc_id).tokens))
                           for doc_id, _ in head])
        # keep scores strictly decreasing across the block boundary
        floor = min((s for _, s in rescored), default=0.0)
        combined = rescored + [(doc_id, floor - 1.0 - rank)
                               for rank, (doc_id, _) in enumerate(tail)]
        out.set_ranking(qid, combined, presorted=True)
    return out


def rrf_fuse(runs: list[RunFile], k_rrf: float = 60.0,
             depth: int | None = None) -> RunFile:
    """Reciprocal rank fusion: score(doc) = sum over runs of 1/(k + rank)."""
    if not runs:
        raise ValueError("need at least one run to fuse")
    qids = sorted({qid for run in runs for qid in run.qids()})
    fused = RunFile()
    for qid in qids:
        scores: dict[str, float] = {}
        for run in runs:
            if qid not in run:
                continue
            ranking = run.ranking(qid)
            if depth is not None:
                ranking = ranking[:depth]
            for rank, (doc_id, _) in enumerate(ranking, start=1):
                scores[doc_id] = scores.get(doc_id, 0.0) + 1.0 / (k_rrf + rank)
        fused.set_ranking(qid, scores.items())
    return fused


def save_cross_checkpoint(path, params: CrossEncoderParams,
                          config: CrossEncoderConfig) -> None:
    save_checkpoint(path, params, config, kind="cross_encoder")


def load_cross_checkpoint(path) -> tuple[CrossEncoderParams, CrossEncoderConfig]:
    header, tensors = load_checkpoint_raw(path)
    if header["kind"] != "cross_encoder":
        raise ValueError(f"checkpoint kind {header['kind']!r} is not a cross encoder")
    return CrossEncoderParams.from_tensors(tensors), CrossEncoderConfig(**header["config"])
