"""TREC-style ranking metrics, Win/Tie/Loss, and permutation significance tests.

Metrics follow trec_eval conventions: NDCG with linear gain grade/log2(rank+1),
MAP divided by the total relevant count, unjudged documents scored as grade 0.
A run's qid is excluded from a metric (and counted separately) when qrels hold
no qualifying document for it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Qrels, RunFile, atomic_write

TIE_EPS = 1e-9


@dataclass
class MetricReport:
    metric: str
    per_qid: dict[str, float]
    excluded: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        if not self.per_qid:
            return 0.0
        return sum(self.per_qid.values()) / len(self.per_qid)

    @property
    def query_count(self) -> int:
        return len(self.per_qid)

    def values(self, qids=None) -> np.ndarray:
        keys = sorted(self.per_qid) if qids is None else list(qids)
        return np.array([self.per_qid[q] for q in keys])


def ndcg_at_k(run: RunFile, qrels: Qrels, k: int) -> MetricReport:
    if k < 1:
        raise ValueError("k must be >= 1")
    per_qid, excluded = {}, []
    for qid in run.qids():
        judged = qrels.judged(qid)
        ideal = sorted(judged.values(), reverse=True)[:k]
        idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
        if idcg == 0:
            excluded.append(qid)
            continue
        dcg = 0.0
        for i, (doc_id, _) in enumerate(run.ranking(qid)[:k]):
            dcg += judged.get(doc_id, 0) / math.log2(i + 2)
        per_qid[qid] = dcg / idcg
    return MetricReport(f"ndcg@{k}", per_qid, excluded)


def mrr(run: RunFile, qrels: Qrels, min_grade: int = 1,
        cutoff: int | None = None) -> MetricReport:
    if min_grade < 1:
        raise ValueError("min_grade must be >= 1")
    name = f"mrr@{cutoff}" if cutoff else "mrr"
    per_qid, excluded = {}, []
    for qid in run.qids():
        judged = qrels.judged(qid)
        if not any(g >= min_grade for g in judged.values()):
            excluded.append(qid)
            continue
        ranking = run.ranking(qid)
        if cutoff is not None:
            ranking = ranking[:cutoff]
        value = 0.0
        for rank, (doc_id, _) in enumerate(ranking, start=1):
            if judged.get(doc_id, 0) >= min_grade:
                value = 1.0 / rank
                break
        per_qid[qid] = value
    return MetricReport(name, per_qid, excluded)


def recall_at_k(run: RunFile, qrels: Qrels, k: int) -> MetricReport:
    if k < 1:
        raise ValueError("k must be >= 1")
    per_qid, excluded = {}, []
    for qid in run.qids():
        relevant = set(qrels.relevant_docs(qid))
        if not relevant:
            excluded.append(qid)
            continue
        top = {doc_id for doc_id, _ in run.ranking(qid)[:k]}
        per_qid[qid] = len(top & relevant) / len(relevant)
    return MetricReport(f"recall@{k}", per_qid, excluded)


def map_at_k(run: RunFile, qrels: Qrels, k: int) -> MetricReport:
    if k < 1:
        raise ValueError("k must be >= 1")
    per_qid, excluded = {}, []
    for qid in run.qids():
        relevant = set(qrels.relevant_docs(qid))
        if not relevant:
            excluded.append(qid)
            continue
        hits = 0
        precision_sum = 0.0
        for rank, (doc_id, _) in enumerate(run.ranking(qid)[:k], start=1):
            if doc_id in relevant:
                hits += 1
                precision_sum += hits / rank
        per_qid[qid] = precision_sum / len(relevant)
    return MetricReport(f"map@{k}", per_qid, excluded)


def hole_rate_at_k(run: RunFile, qrels: Qrels, k: int = 10) -> MetricReport:
    if k < 1:
        raise ValueError("k must be >= 1")
    per_qid, excluded = {}, []
    for qid in run.qids():
        top = run.ranking(qid)[:k]
        if not top:
            excluded.append(qid)
            continue
        holes = sum(1 for doc_id, _ in top if qrels.grade(qid, doc_id) is None)
        per_qid[qid] = holes / len(top)
    return MetricReport(f"hole@{k}", per_qid, excluded)


def parse_metric(spec: str, min_grade: int = 1):
    """'ndcg@3', 'mrr', 'mrr@5', 'recall@5', 'map@10', 'hole@10' -> callable."""
    name, _, cut = spec.partition("@")
    k = int(cut) if cut else None
    if name == "ndcg" and k:
        return lambda run, qrels: ndcg_at_k(run, qrels, k)
    if name == "mrr":
        return lambda run, qrels: mrr(run, qrels, min_grade=min_grade, cutoff=k)
    if name == "recall" and k:
        return lambda run, qrels: recall_at_k(run, qrels, k)
    if name == "map" and k:
        return lambda run, qrels: map_at_k(run, qrels, k)
    if name == "hole":
        return lambda run, qrels: hole_rate_at_k(run, qrels, k or 10)
    raise ValueError(f"unknown metric spec {spec!r}")


@dataclass
class WinTieLoss:
    win: int
    tie: int
    loss: int

    @property
    def total(self) -> int:
        return self.win + self.tie + self.loss

    def percentages(self) -> tuple[float, float, float]:
        total = self.total
        return (100.0 * self.win / total, 100.0 * self.tie / total,
                100.0 * self.loss / total)


def win_tie_loss(run_a: RunFile, run_b: RunFile, qrels: Qrels,
                 metric: str = "ndcg@3", min_grade: int = 1) -> WinTieLoss:
    """Per-qid metric comparison over the shared qid set; tie iff |delta|<1e-9."""
    fn = parse_metric(metric, min_grade=min_grade)
    report_a = fn(run_a, qrels)
    report_b = fn(run_b, qrels)
    shared = sorted(set(report_a.per_qid) & set(report_b.per_qid))
    if not shared:
        raise ValueError("runs share no evaluated qids")
    win = tie = loss = 0
    for qid in shared:
        delta = report_a.per_qid[qid] - report_b.per_qid[qid]
        if abs(delta) < TIE_EPS:
            tie += 1
        elif delta > 0:
            win += 1
        else:
            loss += 1
    return WinTieLoss(win, tie, loss)


def permutation_test(per_qid_a, per_qid_b, iterations: int = 100_000,
                     seed: int = 0) -> float:
    """Two-sided paired randomization test on the mean difference."""
    a = np.asarray(per_qid_a, dtype=np.float64)
    b = np.asarray(per_qid_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D arrays of equal length")
    if a.size < 2:
        raise ValueError("need at least 2 pairs")
    z = a - b
    observed = abs(z.mean())
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = max(1, min(iterations, 4_000_000 // a.size))
    done = 0
    while done < iterations:
        m = min(chunk, iterations - done)
        signs = rng.integers(0, 2, size=(m, a.size)).astype(np.float64) * 2.0 - 1.0
        means = np.abs(signs @ z) / a.size
        hits += int(np.count_nonzero(means >= observed))
        done += m
    return (hits + 1) / (iterations + 1)


def two_sample_permutation_test(sample_a, sample_b, iterations: int = 100_000,
                                seed: int = 0) -> float:
    """Two-sided unpaired permutation test on the difference of group means."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.size < 1 or b.size < 1:
        raise ValueError("need two non-empty 1-D samples")
    pooled = np.concatenate([a, b])
    observed = abs(a.mean() - b.mean())
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(iterations):
        perm = rng.permutation(pooled)
        diff = abs(perm[:a.size].mean() - perm[a.size:].mean())
        if diff >= observed:
            hits += 1
    return (hits + 1) / (iterations + 1)


# ---- report serialization ----

def write_metric_csv(path, reports: list[MetricReport]) -> None:
    with atomic_write(path) as fh:
        fh.write("metric,qid,value\n")
        for report in reports:
            for qid in sorted(report.per_qid):
                fh.write(f"{report.metric},{qid},{report.per_qid[qid]!r}\n")


def write_summary_json(path, reports: list[MetricReport]) -> None:
    summary = {
        report.metric: {
            "mean": report.mean,
            "queries": report.query_count,
            "excluded": len(report.excluded),
        }
        for report in reports
    }
    with atomic_write(path) as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
