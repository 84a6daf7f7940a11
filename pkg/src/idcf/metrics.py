"""RMSE, NDCG and AUC, plus cohort evaluation of a trained model pair."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .data import RatingDataset, UserPartition, negative_sample
from .errors import EvaluationError
from .mf import MfParams, predict_pairs
from .relation import RelationParams, inductive_scores

COHORTS = ("all", "few_shot", "new")
CSV_HEADER = "cohort,metric,value,num_users,num_pairs"


def rmse(pred, truth, clamp=(1.0, 5.0)) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise EvaluationError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise EvaluationError("rmse of an empty list")
    if clamp is not None:
        pred = np.clip(pred, *clamp)
    return math.sqrt(float(np.mean((pred - truth) ** 2)))


def _dcg(rel):
    disc = 1.0 / np.log2(np.arange(2, len(rel) + 2))
    return float(np.sum(rel * disc))


def ndcg_user(scores, relevance, k: int | None = None, items=None) -> float | None:
    """NDCG of one user's list, or None when the ideal DCG is zero.

    Items are ranked by descending score; ties go to the smaller item
    index (position in the list when ``items`` is omitted).
    """
    scores = np.asarray(scores, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=np.float64)
    if scores.size == 0:
        raise EvaluationError("ndcg of an empty list")
    items = np.arange(len(scores)) if items is None else np.asarray(items)
    cut = len(scores) if not k else min(k, len(scores))
    order = np.lexsort((items, -scores))
    ideal = np.sort(relevance)[::-1]
    idcg = _dcg(ideal[:cut])
    if idcg <= 0:
        return None
    return _dcg(relevance[order][:cut]) / idcg


def ndcg(per_user, k: int | None = None) -> float:
    """Mean NDCG over users; ``per_user`` holds (scores, relevance[, items]) tuples."""
    vals = []
    for entry in per_user:
        v = ndcg_user(*entry[:2], k=k, items=entry[2] if len(entry) > 2 else None)
        if v is not None:
            vals.append(v)
    if not vals:
        raise EvaluationError("every user has zero ideal DCG")
    return float(np.mean(vals))


def auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("auc needs at least one positive and one negative")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    not_above = np.searchsorted(neg_sorted, pos, side="right")
    # integer numerator keeps the result exact: 2 * (wins + ties / 2)
    twice = int(np.sum(below)) + int(np.sum(not_above))
    return twice / (2.0 * pos.size * neg.size)


def auc_bruteforce(pos_scores, neg_scores) -> float:
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("auc needs at least one positive and one negative")
    twice = 0
    for p in pos.tolist():
        for n in neg.tolist():
            twice += 2 if p > n else (1 if p == n else 0)
    return twice / (2.0 * pos.size * neg.size)


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class MetricsReport:
    cohort: str
    rmse: float | None
    ndcg: float | None
    auc: float | None
    num_users: int
    num_pairs: int

    def rows(self):
        for name in ("rmse", "ndcg", "auc"):
            v = getattr(self, name)
            if v is not None:
                yield self.cohort, name, v, self.num_users, self.num_pairs


def cohort_users(cohort: str, partition: UserPartition, test: RatingDataset) -> np.ndarray:
    if cohort == "all":
        return np.unique(test.users)
    if cohort in ("few_shot", "new"):
        return np.asarray(partition.query_users, dtype=np.int64)
    raise EvaluationError(f"unknown cohort {cohort!r}")


def score_pairs(mf: MfParams, rel: RelationParams | None, histories: RatingDataset, users, items,
                inductive_only=False, seed=0, fallback_size=10) -> np.ndarray:
    """Transductive scores where ``mf`` has the user, inductive ones otherwise."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    known = np.zeros(len(users), dtype=bool) if inductive_only else mf.has_user(users)
    out = np.empty(len(users))
    if known.any():
        out[known] = predict_pairs(mf, users[known], items[known])
    if (~known).any():
        if rel is None:
            raise EvaluationError("users without embeddings need a relation model")
        out[~known] = inductive_scores(mf, rel, histories, users[~known], items[~known],
                                       seed, fallback_size)
    return out


def evaluate(mf: MfParams, rel: RelationParams | None, test: RatingDataset, partition: UserPartition,
             cohort: str, histories: RatingDataset, ndcg_k: int = 0, negative_ratio: int = 5,
             seed: int = 0, fallback_size: int = 10) -> MetricsReport:
    """Metrics for one cohort's test ratings.

    ``histories`` supplies the rated items that define inductive users'
    contexts; it is never scored. The ``new`` cohort always goes through
    the inductive path, even for users the factor model happens to know.
    """
    if cohort == "new" and rel is None:
        raise EvaluationError("the new-user cohort needs a relation model")
    users = cohort_users(cohort, partition, test)
    sub = test.restrict_users(users)
    if test.feedback == "implicit":
        sub = RatingDataset(sub.num_users, sub.num_items, sub.users, sub.items, sub.values,
                            "implicit", None, sub.user_ids, sub.item_ids)
        sub = negative_sample(sub, negative_ratio, seed, exclude=histories)
    if len(sub) == 0:
        raise EvaluationError(f"cohort {cohort!r} has no test pairs")
    scores = score_pairs(mf, rel, histories, sub.users, sub.items, cohort == "new", seed,
                         fallback_size)
    order = np.argsort(sub.users, kind="stable")
    bounds = np.flatnonzero(np.diff(sub.users[order])) + 1
    per_user = [(scores[g], sub.values[g], sub.items[g]) for g in np.split(order, bounds)]
    nd = ndcg(per_user, ndcg_k or None)
    if test.feedback == "explicit":
        r, a = rmse(scores, sub.values), None
    else:
        pos = sub.values > 0
        r, a = None, auc(scores[pos], scores[~pos])
    return MetricsReport(cohort, r, nd, a, len(np.unique(sub.users)), len(sub))


def format_reports(reports) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for rep in reports:
        for cohort, name, v, nu, npairs in rep.rows():
            buf.write(f"{cohort},{name},{float(v)!r},{nu},{npairs}\n")
    return buf.getvalue()
