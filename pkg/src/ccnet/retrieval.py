"""Ranking, Recall@K, model ensembling and the evaluation driver."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import no_grad


def log_softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    m = s.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return s - m - np.log(np.exp(s - m).sum(axis=-1, keepdims=True))


def rank_order(logp: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    """Indices by descending score, ties broken by ascending candidate id."""
    return np.lexsort((np.asarray(ids), -np.asarray(logp)))


@dataclass
class RankedList:
    query_id: str
    candidates: list
    probabilities: np.ndarray
    log_probs: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_log_probs(cls, query_id, ids, logp) -> "RankedList":
        logp = np.asarray(logp, dtype=np.float64)
        logp = logp - _logsumexp(logp)
        order = rank_order(logp, ids)
        return cls(
            query_id,
            [ids[i] for i in order],
            np.exp(logp[order]),
            logp[order],
        )

    def rank_of(self, candidate_id: str) -> int:
        """1-based rank."""
        try:
            return self.candidates.index(candidate_id) + 1
        except ValueError:
            raise ContractError(f"{candidate_id!r} is not in the gallery of {self.query_id!r}") from None

    def top(self, k: int) -> list[tuple[str, float]]:
        return list(zip(self.candidates[:k], self.probabilities[:k].tolist()))


def _logsumexp(x: np.ndarray) -> float:
    m = np.max(x)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(x - m).sum()))


def combined_probability(s_r, s_c, ids=None, query_id: str = "") -> RankedList:
    """p proportional to softmax(s_r) * softmax(s_c), computed in the log domain."""
    s_r, s_c = np.asarray(s_r, dtype=np.float64), np.asarray(s_c, dtype=np.float64)
    if s_r.shape != s_c.shape or s_r.ndim != 1:
        raise ContractError(f"score vectors cover different galleries: {s_r.shape} vs {s_c.shape}")
    ids = [str(i) for i in range(len(s_r))] if ids is None else list(ids)
    if len(ids) != len(s_r):
        raise ContractError("candidate ids do not match the score vectors")
    return RankedList.from_log_probs(query_id, ids, log_softmax(s_r) + log_softmax(s_c))


def ensemble_combine(prob_vectors, ids=None, query_id: str = "") -> RankedList:
    """Geometric pooling: p proportional to the product of per-model probabilities.

    ``prob_vectors`` are aligned on one gallery (same candidate order).
    """
    vecs = [np.asarray(p, dtype=np.float64) for p in prob_vectors]
    if not vecs:
        raise ContractError("ensemble needs at least one model")
    if any(v.shape != vecs[0].shape for v in vecs):
        raise ContractError("models disagree on the gallery")
    ids = [str(i) for i in range(len(vecs[0]))] if ids is None else list(ids)
    with np.errstate(divide="ignore"):
        logp = np.sum([np.log(v) for v in vecs], axis=0)
    return RankedList.from_log_probs(query_id, ids, logp)


def recall_at_k(ranked: Sequence[RankedList], truths: Sequence[str], k: int) -> float:
    if len(ranked) != len(truths):
        raise ContractError("one ground truth per ranked list required")
    if not ranked:
        raise ContractError("recall over zero queries is undefined")
    hits = sum(r.rank_of(t) <= k for r, t in zip(ranked, truths))
    return hits / len(ranked)


def rank_of_truth(logp: np.ndarray, ids: Sequence[str], truth: str) -> int:
    """1-based rank of ``truth`` under :func:`rank_order`, without a full sort."""
    ids = np.asarray(ids)
    where = np.flatnonzero(ids == truth)
    if len(where) != 1:
        raise ContractError(f"ground truth {truth!r} not in gallery exactly once")
    i = where[0]
    better = (logp > logp[i]) | ((logp == logp[i]) & (ids < truth))
    return int(better.sum()) + 1


# ----------------------------------------------------------------------------
# reports


@dataclass
class RecallReport:
    ks: tuple
    per_category: dict  # category -> {k: recall}
    counts: dict
    absent: tuple = ()

    @property
    def overall(self) -> float:
        vals = [v for cat in self.per_category.values() for v in cat.values()]
        return float(np.mean(vals)) if vals else float("nan")

    def as_dict(self) -> dict:
        out = {}
        for cat in sorted(self.per_category):
            for k in self.ks:
                out[f"{cat}.r{k}"] = self.per_category[cat][k]
        out["overall.avg"] = self.overall
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        cats = sorted(self.per_category)
        head = ["category"] + [f"R@{k}" for k in self.ks] + ["queries"]
        lines = ["  ".join(f"{h:>10}" for h in head)]
        for cat in cats:
            row = [cat] + [f"{self.per_category[cat][k]:.4f}" for k in self.ks] + [str(self.counts[cat])]
            lines.append("  ".join(f"{c:>10}" for c in row))
        for cat in self.absent:
            lines.append(f"{cat:>10}  (no queries)")
        lines.append(f"{'overall':>10}  {self.overall:.4f}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        """Write the key-value JSON to ``path`` and the text table next to it."""
        path = Path(path)
        path.write_text(self.to_json())
        path.with_suffix(".txt").write_text(self.to_text())
        return path


def build_report(ranks_by_category: dict, ks: Sequence[int], categories=()) -> RecallReport:
    per, counts = {}, {}
    for cat, ranks in ranks_by_category.items():
        if not ranks:
            continue
        ranks = np.asarray(ranks)
        per[cat] = {k: float(np.mean(ranks <= k)) for k in ks}
        counts[cat] = len(ranks)
    absent = tuple(sorted(c for c in categories if c not in per))
    return RecallReport(tuple(ks), per, counts, absent)


# ----------------------------------------------------------------------------
# evaluation driver

SCORERS = ("ccnet", "composition", "correction")


@dataclass
class QueryScores:
    """Normalized log-probabilities of one model over per-category galleries."""

    gallery: dict  # category -> list of candidate ids
    log_probs: dict  # category -> (Q, G) array
    truths: dict  # category -> list of ground-truth ids
    query_ids: dict  # category -> list of query labels


def score_queries(model, dataset, records, chunk: int = 32, gallery: str = "auto") -> dict[str, QueryScores]:
    """Score every query against its gallery (see ``Dataset.galleries``) with one model.

    Returns one :class:`QueryScores` per scorer (CCNet product, composition
    only, correction only), all derived from the same raw scores.
    """
    galleries = dataset.galleries(records, gallery)
    out = {s: QueryScores({}, {}, {}, {}) for s in SCORERS}
    with no_grad():
        for cat, pool in galleries.items():
            recs = [r for r in records if r.category == cat]
            if not recs or not pool:
                continue
            x_gal = model.images(*dataset.store.batch(pool)).data
            x_ref = model.images(*dataset.store.batch([r.ref_id for r in recs])).data
            t = model.captions([r.tokens for r in recs], dataset.words).data
            s_r, s_c = model.gallery_scores(x_ref, t, x_gal, chunk=chunk)
            lr, lc = log_softmax(s_r), log_softmax(s_c)
            logps = {"ccnet": log_softmax(lr + lc), "composition": lr, "correction": lc}
            for name, qs in out.items():
                qs.gallery[cat] = pool
                qs.log_probs[cat] = logps[name]
                qs.truths[cat] = [r.trg_id for r in recs]
                qs.query_ids[cat] = [f"{r.ref_id}|{' '.join(r.tokens)}" for r in recs]
    return out


def query_log_probs(model, dataset, records, scorer: str = "ccnet", gallery: str = "auto") -> QueryScores:
    if scorer not in SCORERS:
        raise ContractError(f"unknown scorer {scorer!r}; choose from {SCORERS}")
    return score_queries(model, dataset, records, gallery=gallery)[scorer]


def combine_query_scores(per_model: Sequence[QueryScores]) -> QueryScores:
    """Ensemble several models' scores by summing normalized log-probabilities."""
    if not per_model:
        raise ContractError("ensemble needs at least one model")
    first = per_model[0]
    for other in per_model[1:]:
        if other.gallery != first.gallery or other.truths != first.truths:
            raise ContractError("models were scored on different galleries")
    logp = {
        cat: log_softmax(np.sum([qs.log_probs[cat] for qs in per_model], axis=0))
        for cat in first.log_probs
    }
    return QueryScores(first.gallery, logp, first.truths, first.query_ids)


def report_from_scores(scores: QueryScores, ks=(10, 50), categories=()) -> RecallReport:
    ranks = {}
    for cat, logp in scores.log_probs.items():
        ids = scores.gallery[cat]
        ranks[cat] = [rank_of_truth(row, ids, truth) for row, truth in zip(logp, scores.truths[cat])]
    return build_report(ranks, ks, categories)


def evaluate(models, dataset, records, ks=(10, 50), scorer: str = "ccnet", gallery: str = "auto") -> RecallReport:
    """Per-category Recall@K for one model or a product-of-probabilities ensemble."""
    if not isinstance(models, (list, tuple)):
        models = [models]
    per_model = [query_log_probs(m, dataset, records, scorer, gallery) for m in models]
    scores = combine_query_scores(per_model)
    return report_from_scores(scores, ks, categories=sorted({r.category for r in records}))


def ranked_lists(scores: QueryScores, category: str) -> list[RankedList]:
    ids = scores.gallery[category]
    return [
        RankedList.from_log_probs(q, ids, row)
        for q, row in zip(scores.query_ids[category], scores.log_probs[category])
    ]

