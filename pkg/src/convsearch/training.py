"""Training paradigms for the conversational query encoder.

The teacher is a siamese encoder trained on (oracle query, relevant doc)
pairs with a softmax ranking loss over in-batch plus random negatives.
The student starts as a copy of the teacher and is tuned on conversational
inputs with knowledge distillation toward the teacher's oracle embeddings
(kd), a ranking loss over frozen document embeddings with teacher-mined
negatives (rank), their unweighted sum (multi-task), or not at all
(zero-shot). Document embeddings are never updated by student training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, Tape, adam_step, backward, softmax_nll_value
from .corpus import Conversation, Corpus, DatasetBundle, Qrels, Vocab
from .encoder import (
    EncoderConfig,
    EncoderParams,
    assemble_conversational_input,
    encode,
    encode_batch,
    encode_many_on_tape,
    init_encoder_params,
    init_student_from_teacher,
    params_on_tape,
)
from .index import DenseIndex, build_dense_index, dense_search, dense_search_batch
from .rerank import (
    CrossEncoderConfig,
    CrossEncoderParams,
    cross_pooled,
    cross_score_on_tape,
    init_cross_encoder,
)

MODES = ("zero-shot", "kd", "rank", "multi-task")

TEACHER_EPOCHS = 20
TEACHER_LEARNING_RATE = 0.02
TEACHER_BATCH_SIZE = 32
RERANKER_EPOCHS = 2
STUDENT_EPOCHS = 8


@dataclass
class TrainConfig:
    mode: str = "kd"
    epochs: int = STUDENT_EPOCHS
    batch_size: int = 4
    learning_rate: float = 1e-3
    n_negatives: int = 9
    seed: int = 0
    label_budget: int | None = None
    kd_weight: float = 1.0
    rank_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.n_negatives < 0:
            raise ValueError("epochs >= 0, batch_size >= 1, n_negatives >= 0 required")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.mode == "zero-shot":
            self.epochs = 0


@dataclass
class TrainExample:
    qid: str
    input_tokens: list[int]
    oracle_tokens: list[int]
    positive_doc_ids: list[str] = field(default_factory=list)
    negative_doc_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if set(self.positive_doc_ids) & set(self.negative_doc_ids):
            raise ValueError(f"{self.qid}: positives and negatives overlap")


# ---- loss functions (pure, over embeddings) ----

def kd_loss(student_emb, teacher_emb) -> float:
    """MSE between the student embedding and the frozen teacher target."""
    s = np.asarray(student_emb, dtype=np.float64)
    t = np.asarray(teacher_emb, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"embedding dims differ: {s.shape} vs {t.shape}")
    diff = s - t
    return float(np.mean(diff * diff))


def rank_loss(q_emb, pos_emb, neg_embs) -> float:
    """Softmax NLL of the positive among [positive, negatives] dot products."""
    q = np.asarray(q_emb, dtype=np.float64)
    candidates = [np.asarray(pos_emb, dtype=np.float64)]
    candidates += [np.asarray(n, dtype=np.float64) for n in neg_embs]
    for c in candidates:
        if c.shape != q.shape:
            raise ValueError(f"embedding dims differ: {c.shape} vs {q.shape}")
    scores = np.array([float(np.dot(q, c)) for c in candidates])
    return softmax_nll_value(scores, 0)


def multi_task_loss(kd: float, rank: float) -> float:
    return kd + rank


# ---- negative mining ----

def sample_negatives(teacher_index: DenseIndex, teacher_params: EncoderParams,
                     oracle_tokens, positives, n: int) -> list[str]:
    """Top teacher-ranked docs for the oracle query, excluding judged positives."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0 or len(teacher_index) == 0:
        return []
    query = encode(teacher_params, oracle_tokens)
    excluded = set(positives)
    k = n + len(excluded)
    while True:
        ranked = dense_search(teacher_index, query, k)
        negatives = [doc_id for doc_id, _ in ranked if doc_id not in excluded]
        if len(negatives) >= n or k >= len(teacher_index):
            return negatives[:n]
        k = min(len(teacher_index), 2 * k)


# ---- teacher training ----

def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


@dataclass
class TeacherPair:
    """Ad hoc training pair: oracle-form query, one relevant doc, and the
    judged non-relevant docs usable as hard negatives."""

    query_tokens: list[int]
    positive_doc_id: str
    hard_negative_ids: list[str] = field(default_factory=list)


N_TEACHER_HARD_NEGATIVES = 4


def train_teacher(corpus: Corpus, pairs: list[TeacherPair], cfg: TrainConfig,
                  enc_cfg: EncoderConfig, vocab_size: int,
                  history: list | None = None) -> EncoderParams:
    """Siamese encoder on (oracle tokens, positive doc_id) pairs.

    Ranking loss per example over its positive against the other batch
    members' positives, batch_size uniformly random corpus docs, and up to
    two judged non-relevant (hard negative) docs per pair.
    """
    if not pairs:
        raise ValueError("teacher training needs at least one (query, doc) pair")
    params = init_encoder_params(enc_cfg, vocab_size)
    state = AdamState.for_params(params.tensors(), cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    doc_list = list(corpus)

    tensors = params.tensors()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        n_batches = 0
        for batch_idx in _batches(order, cfg.batch_size):
            batch = [pairs[i] for i in batch_idx]
            bsize = len(batch)
            rand_docs = [doc_list[int(i)] for i in rng.integers(0, len(doc_list),
                                                                size=cfg.batch_size)]
            hard_ids: list[list[str]] = []
            for pair in batch:
                chosen = pair.hard_negative_ids
                if len(chosen) > N_TEACHER_HARD_NEGATIVES:
                    picks = rng.choice(len(chosen), size=N_TEACHER_HARD_NEGATIVES,
                                       replace=False)
                    chosen = [chosen[int(i)] for i in sorted(picks)]
                hard_ids.append(chosen)
            hard_base = [0] * bsize
            hard_tokens = []
            for i, ids in enumerate(hard_ids):
                hard_base[i] = 2 * bsize + cfg.batch_size + len(hard_tokens)
                hard_tokens.extend(corpus.get(d).tokens for d in ids)
            token_lists = ([p.query_tokens for p in batch]
                           + [corpus.get(p.positive_doc_id).tokens for p in batch]
                           + [doc.tokens for doc in rand_docs]
                           + hard_tokens)
            tape = Tape()
            leaves = {name: tape.leaf(t) for name, t in tensors.items()}
            encoded = encode_many_on_tape(tape, leaves, token_lists)
            losses = []
            for i, pair in enumerate(batch):
                pos_id = pair.positive_doc_id
                cand_rows = [bsize + i]
                cand_rows += [bsize + j for j, other in enumerate(batch)
                              if j != i and other.positive_doc_id != pos_id]
                cand_rows += [2 * bsize + j for j, doc in enumerate(rand_docs)
                              if doc.doc_id != pos_id]
                cand_rows += range(hard_base[i], hard_base[i] + len(hard_ids[i]))
                q_node = tape.mean_rows(tape.gather(encoded, [i]))
                scores = tape.matmul(tape.gather(encoded, cand_rows), q_node)
                losses.append(tape.softmax_nll(scores, 0))
            total = losses[0]
            for extra in losses[1:]:
                total = tape.scalar_add(total, extra)
            loss_node = tape.scale(total, 1.0 / len(losses))
            grads = backward(tape, loss_node)
            named = {name: grads[nid] for name, nid in leaves.items()}
            tensors, state = adam_step(tensors, named, state)
            epoch_loss += float(tape.value(loss_node))
            n_batches += 1
        if history is not None:
            history.append({"epoch": epoch + 1, "split": "train",
                            "loss": epoch_loss / max(1, n_batches), "metric": None})
    return EncoderParams.from_tensors(tensors)


def teacher_pairs_from_conversations(conversations: list[Conversation],
                                     qrels: Qrels,
                                     vocab: Vocab | None = None) -> list[TeacherPair]:
    """Ad hoc pairs covering the corpus: per distinct fully-relevant doc set
    and grade-2 doc, one full oracle-form pair and (when a vocab is given)
    one short keyword-form pair stripped to the facet tokens.

    Keyword pairs keep the encoder calibrated for under-specified queries,
    which is what raw conversational turns degrade into. Hard negatives per
    pair: the turn's judged grade-0 docs (same facet, foreign topic) plus
    sibling turns' grade-2 docs (same topic, other facets), so training
    separates both the topic and the facet axis.
    """
    pairs: list[TeacherPair] = []
    for conv in conversations:
        turn_grade2 = {
            turn.qid: sorted(d for d, g in qrels.judged(turn.qid).items() if g == 2)
            for turn in conv.turns
        }
        for turn in conv.turns:
            judged = qrels.judged(turn.qid)
            grade2 = turn_grade2[turn.qid]
            if not grade2:
                continue
            own_relevant = {d for d, g in judged.items() if g >= 1}
            siblings = set()
            for other_qid, docs in turn_grade2.items():
                if other_qid != turn.qid:
                    siblings |= set(docs) - own_relevant
            hard = sorted(d for d, g in judged.items() if g == 0) + sorted(siblings)
            keyword = None
            if vocab is not None:
                # oracle with the topic mentions stripped: the under-specified
                # form that raw conversational turns degrade into
                keyword = [t for t in turn.oracle_tokens
                           if vocab.token_class(t) != "topic"]
            for doc_id in grade2:
                pairs.append(TeacherPair(list(turn.oracle_tokens), doc_id, hard))
                if keyword:
                    pairs.append(TeacherPair(list(keyword), doc_id, hard))
    return pairs


def encode_corpus(params: EncoderParams, corpus: Corpus) -> DenseIndex:
    """Frozen document index from the encoder's current weights."""
    embeddings = encode_batch(params, [doc.tokens for doc in corpus])
    return build_dense_index(corpus.doc_ids(), embeddings)


# ---- student training ----

def build_train_examples(dataset: DatasetBundle, cfg: TrainConfig,
                         teacher: EncoderParams, doc_index: DenseIndex,
                         max_len: int, need_rank: bool) -> list[TrainExample]:
    """Per-turn conversational inputs; negatives mined only where needed.

    The label budget caps how many turns (in sorted qid order, a fixed
    judged pool) carry ranking supervision; distillation uses every turn.
    """
    turns = [(conv, turn) for conv in dataset.split("train") for turn in conv.turns]
    labeled_qids = sorted(t.qid for _, t in turns if dataset.qrels.relevant_docs(t.qid))
    if cfg.label_budget is not None:
        labeled_qids = labeled_qids[:cfg.label_budget]
    labeled = set(labeled_qids)

    examples = []
    for conv, turn in turns:
        tokens = assemble_conversational_input(conv, turn.turn_no, max_len)
        if not turn.oracle_tokens:
            raise ValueError(f"{turn.qid}: missing oracle rewrite")
        positives: list[str] = []
        negatives: list[str] = []
        if need_rank and turn.qid in labeled:
            judged = dataset.qrels.judged(turn.qid)
            positives = sorted((d for d, g in judged.items() if g >= 1),
                               key=lambda d: (-judged[d], d))
            negatives = sample_negatives(doc_index, teacher, turn.oracle_tokens,
                                         positives, cfg.n_negatives)
        examples.append(TrainExample(turn.qid, tokens, list(turn.oracle_tokens),
                                     positives, negatives))
    return examples


def _dev_kd_loss(student: EncoderParams, teacher: EncoderParams,
                 dataset: DatasetBundle, max_len: int) -> float:
    losses = []
    for conv in dataset.split("dev"):
        for turn in conv.turns:
            tokens = assemble_conversational_input(conv, turn.turn_no, max_len)
            losses.append(kd_loss(encode(student, tokens),
                                  encode(teacher, turn.oracle_tokens)))
    return float(np.mean(losses)) if losses else 0.0


def train_student(teacher: EncoderParams, dataset: DatasetBundle,
                  cfg: TrainConfig, doc_index: DenseIndex | None = None,
                  max_len: int = 256, history: list | None = None) -> EncoderParams:
    """Student query encoder under zero-shot / kd / rank / multi-task.

    Document embeddings stay frozen: ranking candidates come from the
    teacher-built index, and only the student's own tensors get gradients.
    """
    student = init_student_from_teacher(teacher)
    if cfg.mode == "zero-shot" or cfg.epochs == 0:
        return student

    use_kd = cfg.mode in ("kd", "multi-task")
    use_rank = cfg.mode in ("rank", "multi-task")
    if doc_index is None:
        if use_rank:
            raise ValueError("rank training needs the frozen document index")
        doc_index = build_dense_index([], np.zeros((0, teacher.d_out)))

    examples = build_train_examples(dataset, cfg, teacher, doc_index,
                                    max_len, need_rank=use_rank)
    if use_rank:
        rank_examples = [ex for ex in examples
                         if ex.positive_doc_ids and ex.negative_doc_ids]
        if not rank_examples:
            raise ValueError("rank training needs judged turns within the label budget")
        if cfg.mode == "rank":
            examples = rank_examples

    kd_targets = {ex.qid: encode(teacher, ex.oracle_tokens) for ex in examples if use_kd}
    doc_row = {doc_id: i for i, doc_id in enumerate(doc_index.doc_ids)}

    tensors = student.tensors()
    state = AdamState.for_params(tensors, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)

    if history is not None:
        history.append({"epoch": 0, "split": "dev",
                        "loss": _dev_kd_loss(student, teacher, dataset, max_len),
                        "metric": None})

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        epoch_loss = 0.0
        n_batches = 0
        for batch_idx in _batches(order, cfg.batch_size):
            batch = [examples[i] for i in batch_idx]
            tape = Tape()
            leaves = {name: tape.leaf(t) for name, t in tensors.items()}
            encoded = encode_many_on_tape(tape, leaves,
                                          [ex.input_tokens for ex in batch])
            losses = []
            for row, ex in enumerate(batch):
                q_node = tape.mean_rows(tape.gather(encoded, [row]))
                parts = []
                if use_kd:
                    target = tape.constant(kd_targets[ex.qid])
                    node = tape.mse(q_node, target)
                    if cfg.kd_weight != 1.0:
                        node = tape.scale(node, cfg.kd_weight)
                    parts.append(node)
                if use_rank and ex.positive_doc_ids and ex.negative_doc_ids:
                    pos = ex.positive_doc_ids[epoch % len(ex.positive_doc_ids)]
                    rows = [doc_row[d] for d in [pos] + ex.negative_doc_ids]
                    docs = tape.constant(doc_index._matrix64[rows])
                    scores = tape.matmul(docs, q_node)
                    node = tape.softmax_nll(scores, 0)
                    if cfg.rank_weight != 1.0:
                        node = tape.scale(node, cfg.rank_weight)
                    parts.append(node)
                loss = parts[0]
                for extra in parts[1:]:
                    loss = tape.scalar_add(loss, extra)
                losses.append(loss)
            total = losses[0]
            for extra in losses[1:]:
                total = tape.scalar_add(total, extra)
            loss_node = tape.scale(total, 1.0 / len(losses))
            grads = backward(tape, loss_node)
            named = {name: grads[nid] for name, nid in leaves.items()}
            tensors, state = adam_step(tensors, named, state)
            epoch_loss += float(tape.value(loss_node))
            n_batches += 1
        if history is not None:
            current = EncoderParams.from_tensors(tensors)
            history.append({"epoch": epoch + 1, "split": "train",
                            "loss": epoch_loss / max(1, n_batches), "metric": None})
            history.append({"epoch": epoch + 1, "split": "dev",
                            "loss": _dev_kd_loss(current, teacher, dataset, max_len),
                            "metric": None})
    return EncoderParams.from_tensors(tensors)


# ---- cross-encoder reranker training ----

def train_reranker_teacher(corpus: Corpus, pairs: list[TeacherPair],
                           cfg: TrainConfig, ce_cfg: CrossEncoderConfig,
                           vocab_size: int,
                           history: list | None = None) -> CrossEncoderParams:
    """Ad hoc cross-encoder: pairwise NLL of the positive pair against one
    random and up to two judged hard-negative docs per example."""
    if not pairs:
        raise ValueError("reranker teacher training needs at least one pair")
    params = init_cross_encoder(ce_cfg, vocab_size)
    tensors = params.tensors()
    state = AdamState.for_params(tensors, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    doc_list = list(corpus)

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        n_batches = 0
        for batch_idx in _batches(order, cfg.batch_size):
            batch = [pairs[i] for i in batch_idx]
            tape = Tape()
            leaves = {name: tape.leaf(t) for name, t in tensors.items()}
            losses = []
            for pair in batch:
                neg_ids = [doc_list[int(rng.integers(0, len(doc_list)))].doc_id]
                if pair.hard_negative_ids:
                    picks = rng.choice(len(pair.hard_negative_ids),
                                       size=min(2, len(pair.hard_negative_ids)),
                                       replace=False)
                    neg_ids += [pair.hard_negative_ids[int(i)] for i in sorted(picks)]
                neg_ids = [d for d in neg_ids if d != pair.positive_doc_id]
                s_pos, _ = cross_score_on_tape(tape, leaves, pair.query_tokens,
                                               corpus.get(pair.positive_doc_id).tokens)
                pairwise = []
                for neg in neg_ids:
                    s_neg, _ = cross_score_on_tape(tape, leaves, pair.query_tokens,
                                                   corpus.get(neg).tokens)
                    pairwise.append(tape.softmax_nll(tape.stack_scalars([s_pos, s_neg]), 0))
                loss = pairwise[0]
                for extra in pairwise[1:]:
                    loss = tape.scalar_add(loss, extra)
                losses.append(tape.scale(loss, 1.0 / len(pairwise)))
            total = losses[0]
            for extra in losses[1:]:
                total = tape.scalar_add(total, extra)
            loss_node = tape.scale(total, 1.0 / len(losses))
            grads = backward(tape, loss_node)
            named = {name: grads[nid] for name, nid in leaves.items()}
            tensors, state = adam_step(tensors, named, state)
            epoch_loss += float(tape.value(loss_node))
            n_batches += 1
        if history is not None:
            history.append({"epoch": epoch + 1, "split": "train",
                            "loss": epoch_loss / max(1, n_batches), "metric": None})
    return CrossEncoderParams.from_tensors(tensors)


def train_reranker(teacher_ce: CrossEncoderParams, dataset: DatasetBundle,
                   cfg: TrainConfig, dual_teacher: EncoderParams,
                   doc_index: DenseIndex, max_len: int = 256,
                   history: list | None = None) -> CrossEncoderParams:
    """Cross-encoder student under zero-shot / kd / rank / multi-task.

    kd matches the student's pooled pair representation on (conversation,
    doc) to the teacher's on (oracle, doc) over teacher-retrieved docs; rank
    is pairwise NLL of (positive, mined negative) scores.
    """
    student = teacher_ce.copy()
    if cfg.mode == "zero-shot" or cfg.epochs == 0:
        return student

    use_kd = cfg.mode in ("kd", "multi-task")
    use_rank = cfg.mode in ("rank", "multi-task")
    examples = build_train_examples(dataset, cfg, dual_teacher, doc_index,
                                    max_len, need_rank=use_rank)
    if use_rank:
        rank_examples = [ex for ex in examples
                         if ex.positive_doc_ids and ex.negative_doc_ids]
        if not rank_examples:
            raise ValueError("rank training needs judged turns within the label budget")
        if cfg.mode == "rank":
            examples = rank_examples

    corpus = dataset.corpus
    kd_docs: dict[str, list[str]] = {}
    kd_targets: dict[tuple[str, str], np.ndarray] = {}
    if use_kd:
        for ex in examples:
            ranked_docs = [d for d, _ in
                           dense_search(doc_index, encode(dual_teacher, ex.oracle_tokens), 2)]
            kd_docs[ex.qid] = ranked_docs
            for doc_id in ranked_docs:
                kd_targets[(ex.qid, doc_id)] = cross_pooled(
                    teacher_ce, ex.oracle_tokens, corpus.get(doc_id).tokens)

    tensors = student.tensors()
    state = AdamState.for_params(tensors, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        epoch_loss = 0.0
        n_batches = 0
        for batch_idx in _batches(order, cfg.batch_size):
            batch = [examples[i] for i in batch_idx]
            tape = Tape()
            leaves = {name: tape.leaf(t) for name, t in tensors.items()}
            losses = []
            for ex in batch:
                parts = []
                if use_kd:
                    for doc_id in kd_docs[ex.qid]:
                        _, pooled = cross_score_on_tape(tape, leaves, ex.input_tokens,
                                                        corpus.get(doc_id).tokens)
                        target = tape.constant(kd_targets[(ex.qid, doc_id)])
                        node = tape.mse(pooled, target)
                        if cfg.kd_weight != 1.0:
                            node = tape.scale(node, cfg.kd_weight)
                        parts.append(node)
                if use_rank and ex.positive_doc_ids and ex.negative_doc_ids:
                    pos = ex.positive_doc_ids[epoch % len(ex.positive_doc_ids)]
                    s_pos, _ = cross_score_on_tape(tape, leaves, ex.input_tokens,
                                                   corpus.get(pos).tokens)
                    pairwise = []
                    for neg in ex.negative_doc_ids:
                        s_neg, _ = cross_score_on_tape(tape, leaves, ex.input_tokens,
                                                       corpus.get(neg).tokens)
                        pairwise.append(tape.softmax_nll(
                            tape.stack_scalars([s_pos, s_neg]), 0))
                    node = pairwise[0]
                    for extra in pairwise[1:]:
                        node = tape.scalar_add(node, extra)
                    node = tape.scale(node, 1.0 / len(pairwise))
                    if cfg.rank_weight != 1.0:
                        node = tape.scale(node, cfg.rank_weight)
                    parts.append(node)
                loss = parts[0]
                for extra in parts[1:]:
                    loss = tape.scalar_add(loss, extra)
                losses.append(loss)
            total = losses[0]
            for extra in losses[1:]:
                total = tape.scalar_add(total, extra)
            loss_node = tape.scale(total, 1.0 / len(losses))
            grads = backward(tape, loss_node)
            named = {name: grads[nid] for name, nid in leaves.items()}
            tensors, state = adam_step(tensors, named, state)
            epoch_loss += float(tape.value(loss_node))
            n_batches += 1
        if history is not None:
            history.append({"epoch": epoch + 1, "split": "train",
                            "loss": epoch_loss / max(1, n_batches), "metric": None})
    return CrossEncoderParams.from_tensors(tensors)
