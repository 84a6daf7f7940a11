"""Stage two: inductive user embeddings from attention over key users.

A user's context is the sum of the embeddings of the items they rated.
Each head scores a fixed sample of key users against that context,
normalizes the scores, and pools value-projected key embeddings; the
heads are concatenated and projected back to ``d`` dimensions.

Scores take the form ``e . [Wq c (+) Wk p]`` (``score="concat"``). That
form is additive in the query and key terms, so under softmax the query
term cancels and every user receives the same weights.
``score="concat_bilinear"`` (the default) adds the interaction
``(Wq c) . (Wk p) / sqrt(d)``, which keeps the weights user-dependent.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .config import AdaptConfig
from .data import RatingDataset, UserPartition
from .errors import ColdStartError, ConfigError, DegenerateNormalizationError, TrainingError
from .mf import (
    Batch, LevelCSR, MfParams, backward, build_level_csr, empty_levels, forward,
    num_levels, pointwise_loss, pointwise_loss_grad,
)
from .numerics import AdamConfig, ParamTensor, adam_step, matmul

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- parameters

@dataclass
class RelationParams:
    heads: int
    dim: int
    e: ParamTensor
    Wq: ParamTensor
    Wk: ParamTensor
    Wv: ParamTensor
    Wo: ParamTensor
    key_samples: np.ndarray
    normalization: str = "softmax"
    score: str = "concat_bilinear"
    predictor: dict = field(default_factory=dict)
    mf_checksum: str = ""
    history: list = field(default_factory=list)

    def attention_tensors(self) -> list[ParamTensor]:
        return [self.e, self.Wq, self.Wk, self.Wv, self.Wo]

    def trainable(self) -> list[ParamTensor]:
        return self.attention_tensors() + list(self.predictor.values())

    def copy(self) -> "RelationParams":
        import copy

        return copy.deepcopy(self)


def init_relation(mf: MfParams, heads=4, sample_size=200, normalization="softmax",
                  score="concat_bilinear", seed=0) -> RelationParams:
    if normalization not in ("softmax", "linear_ratio"):
        raise ConfigError(f"unknown normalization {normalization!r}")
    if score not in ("concat", "concat_bilinear"):
        raise ConfigError(f"unknown score {score!r}")
    d = mf.dim
    rng = np.random.default_rng(seed)
    mk = len(mf.user_index)
    if mk == 0:
        raise ConfigError("relation model needs at least one key user")
    k = min(sample_size, mk)
    samples = np.stack([np.sort(rng.choice(mk, size=k, replace=False)) for _ in range(heads)])
    lim = math.sqrt(6.0 / (2 * d))

    def sq():
        return np.stack([rng.uniform(-lim, lim, size=(d, d)) for _ in range(heads)])

    e = ParamTensor("e", rng.uniform(-lim, lim, size=(heads, 2 * d)))
    Wq, Wk, Wv = ParamTensor("Wq", sq()), ParamTensor("Wk", sq()), ParamTensor("Wv", sq())
    olim = math.sqrt(6.0 / (d + heads * d))
    Wo = ParamTensor("Wo", rng.uniform(-olim, olim, size=(d, heads * d)))
    pred = {name: t.copy() for name, t in mf.predictor.items()}
    for t in pred.values():
        t.zero_grad()
        t.reset_optimizer()
    return RelationParams(heads, d, e, Wq, Wk, Wv, Wo, samples.astype(np.int64),
                          normalization, score, pred, mf_fingerprint(mf))


def mf_fingerprint(mf: MfParams) -> str:
    h = hashlib.sha256()
    for t in mf.tensors():
        h.update(t.name.encode())
        h.update(np.ascontiguousarray(t.value).tobytes())
    h.update(mf.user_index.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- contexts

@dataclass
class UserContext:
    vector: np.ndarray
    history: np.ndarray
    fallback_used: bool = False
    ratings: np.ndarray | None = None


def build_context(history, Q, seed=0, fallback_size=10, ratings=None) -> UserContext:
    """Sum of item embeddings over ``history``; an empty history draws ``fallback_size`` items."""
    Q = np.asarray(Q, dtype=np.float64)
    hist = np.asarray(history, dtype=np.int64).reshape(-1)
    rts = None if ratings is None else np.asarray(ratings, dtype=np.float64).reshape(-1)
    fallback = False
    if hist.size == 0:
        if fallback_size <= 0:
            raise ColdStartError("empty history and no fallback items")
        rng = np.random.default_rng(seed)
        hist = rng.choice(Q.shape[0], size=min(fallback_size, Q.shape[0]), replace=False)
        rts = None
        fallback = True
    order = np.argsort(hist, kind="stable")
    hist = hist[order]
    if rts is not None:
        rts = rts[order]
    vec = kernels.segment_sum(np.array([0, hist.size]), hist, Q)[0]
    return UserContext(vec, hist, fallback, rts)


@dataclass
class UserHistories:
    """Rated items per user, in CSR form sorted by item, plus per-level lists for gc."""

    users: np.ndarray
    indptr: np.ndarray
    items: np.ndarray
    values: np.ndarray

    @classmethod
    def from_dataset(cls, ds: RatingDataset, users) -> "UserHistories":
        users = np.asarray(users, dtype=np.int64)
        pos = np.full(ds.num_users, -1, dtype=np.int64)
        pos[users] = np.arange(len(users))
        sel = pos[ds.users] >= 0
        if ds.feedback == "implicit":
            sel &= ds.values > 0
        owner = pos[ds.users[sel]]
        items = ds.items[sel]
        vals = ds.values[sel]
        order = np.lexsort((items, owner))
        counts = np.bincount(owner, minlength=len(users))
        return cls(users, np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
                   items[order], vals[order])

    def contexts(self, Q, rows, seed=0, fallback_size=10):
        """Context sums for history rows ``rows``; empty histories use the fallback draw."""
        rows = np.asarray(rows, dtype=np.int64)
        starts, ends = self.indptr[rows], self.indptr[rows + 1]
        ptr = np.concatenate([[0], np.cumsum(ends - starts)]).astype(np.int64)
        idx = _ranges(self.items, starts, ends)
        out = kernels.segment_sum(ptr, idx, Q)
        empty = np.flatnonzero(ends == starts)
        for r in empty:
            out[r] = build_context([], Q, _user_seed(seed, self.users[rows[r]]), fallback_size).vector
        return out

    def levels(self, rows, feedback, nlev) -> LevelCSR:
        rows = np.asarray(rows, dtype=np.int64)
        starts, ends = self.indptr[rows], self.indptr[rows + 1]
        owner = np.repeat(np.arange(len(rows)), ends - starts)
        return build_level_csr(owner, _ranges(self.items, starts, ends),
                               _ranges(self.values, starts, ends), len(rows), feedback)


def _ranges(arr, starts, ends):
    lens = ends - starts
    total = int(lens.sum())
    if total == 0:
        return arr[:0]
    offs = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
    return arr[np.arange(total) + offs]


def _user_seed(seed, user):
    return int(np.random.SeedSequence([int(seed), int(user)]).generate_state(1)[0])


# ---------------------------------------------------------------- attention

def _head_scores(rel: RelationParams, l, C, Pk):
    qh = matmul(C, rel.Wq.value[l].T)
    kh = matmul(Pk, rel.Wk.value[l].T)
    d = rel.dim
    e = rel.e.value[l]
    qs = matmul(qh, e[:d, None])[:, 0]
    ks = matmul(kh, e[d:, None])[:, 0]
    s = qs[:, None] + ks[None, :]
    if rel.score == "concat_bilinear":
        s = s + matmul(qh, kh.T) / math.sqrt(d)
    return s, qh, kh


def _normalize(s, mode):
    if mode == "softmax":
        z = np.exp(s - s.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True), None
    tot = s.sum(axis=1, keepdims=True)
    if np.any(np.abs(tot) < 1e-12):
        raise DegenerateNormalizationError("attention scores sum to ~0 under linear_ratio")
    return s / tot, tot


def head_attention(rel: RelationParams, l: int, contexts, P):
    """Weights of head ``l`` over its key sample, one row per context (B x K)."""
    C = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    Pk = np.asarray(P, dtype=np.float64)[rel.key_samples[l]]
    s, _, _ = _head_scores(rel, l, C, Pk)
    a, _ = _normalize(s, rel.normalization)
    return a


def inductive_embedding(rel: RelationParams, contexts, P, return_cache=False):
    """Inductive embeddings (B x d) for a batch of context vectors."""
    C = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    P = np.asarray(P, dtype=np.float64)
    d = rel.dim
    hs, caches = [], []
    for l in range(rel.heads):
        Pk = P[rel.key_samples[l]]
        s, qh, kh = _head_scores(rel, l, C, Pk)
        a, tot = _normalize(s, rel.normalization)
        vh = matmul(Pk, rel.Wv.value[l].T)
        hs.append(matmul(a, vh))
        caches.append((Pk, qh, kh, a, tot, vh))
    H = np.hstack(hs)
    out = matmul(H, rel.Wo.value.T)
    if return_cache:
        return out, (C, H, caches)
    return out


def inductive_backward(rel: RelationParams, cache, G):
    """Accumulate attention-parameter gradients for upstream ``G`` = dL/d(embedding)."""
    C, H, caches = cache
    d = rel.dim
    rel.Wo.grad += matmul(G.T, H)
    dH = matmul(G, rel.Wo.value)
    for l, (Pk, qh, kh, a, tot, vh) in enumerate(caches):
        dh = dH[:, l * d:(l + 1) * d]
        da = matmul(dh, vh.T)
        dvh = matmul(a.T, dh)
        rel.Wv.grad[l] += matmul(dvh.T, Pk)
        inner = (da * a).sum(axis=1, keepdims=True)
        if rel.normalization == "softmax":
            ds = a * (da - inner)
        else:
            ds = (da - inner) / tot
        e = rel.e.value[l]
        rq = ds.sum(axis=1)
        rk = ds.sum(axis=0)
        rel.e.grad[l, :d] += matmul(qh.T, rq[:, None])[:, 0]
        rel.e.grad[l, d:] += matmul(kh.T, rk[:, None])[:, 0]
        dqh = rq[:, None] * e[None, :d]
        dkh = rk[:, None] * e[None, d:]
        if rel.score == "concat_bilinear":
            scale = 1.0 / math.sqrt(d)
            dqh = dqh + matmul(ds, kh) * scale
            dkh = dkh + matmul(ds.T, qh) * scale
        rel.Wq.grad[l] += matmul(dqh.T, C)
        rel.Wk.grad[l] += matmul(dkh.T, Pk)


# ---------------------------------------------------------------- contrastive loss

def contrastive_loss(P_batch, P_tilde, sign="nll", return_grad=False):
    """In-batch contrastive loss between meta latents and inductive embeddings.

    ``nll`` is the mean of -log softmax_j(p_u . pt_j)[u], so minimizing it
    pulls each pair together; ``literal`` keeps the opposite sign.
    """
    P_batch = np.atleast_2d(np.asarray(P_batch, dtype=np.float64))
    P_tilde = np.atleast_2d(np.asarray(P_tilde, dtype=np.float64))
    B = P_batch.shape[0]
    z = matmul(P_batch, P_tilde.T)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = np.log(ez.sum(axis=1)) + zmax[:, 0]
    nll = lse - np.diag(z)
    sgn = 1.0 if sign == "nll" else -1.0
    loss = sgn * float(nll.mean())
    if not return_grad:
        return loss
    soft = ez / ez.sum(axis=1, keepdims=True)
    dz = sgn * (soft - np.eye(B)) / B
    return loss, matmul(dz.T, P_batch)


# ---------------------------------------------------------------- adaptation

@dataclass
class AdaptData:
    """Ratings of the users the relation model is fitted on, grouped by user."""

    users: np.ndarray
    hist: UserHistories
    rating_ptr: np.ndarray
    rating_items: np.ndarray
    rating_values: np.ndarray

    @classmethod
    def build(cls, ds: RatingDataset, users, context_source: RatingDataset | None = None):
        users = np.asarray(users, dtype=np.int64)
        hist = UserHistories.from_dataset(context_source or ds, users)
        pos = np.full(ds.num_users, -1, dtype=np.int64)
        pos[users] = np.arange(len(users))
        sel = pos[ds.users] >= 0
        owner = pos[ds.users[sel]]
        order = np.argsort(owner, kind="stable")
        counts = np.bincount(owner, minlength=len(users))
        return cls(users, hist, np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
                   ds.items[sel][order], ds.values[sel][order])


def _user_batch(mf: MfParams, rel: RelationParams, data: AdaptData, rows, seed, fallback_size,
                with_cache=False):
    C = data.hist.contexts(mf.Q.value, rows, seed, fallback_size)
    emb, cache = inductive_embedding(rel, C, mf.P.value, return_cache=True)
    starts, ends = data.rating_ptr[rows], data.rating_ptr[rows + 1]
    urow = np.repeat(np.arange(len(rows)), ends - starts)
    items = _ranges(data.rating_items, starts, ends)
    vals = _ranges(data.rating_values, starts, ends)
    nbrs = data.hist.levels(rows, mf.feedback, num_levels(mf.feedback)) if mf.backbone == "gc" else None
    batch = Batch(p=emb, bu=np.full(len(rows), mf.mean_user_bias()), urow=urow, items=items,
                  user_nbrs=nbrs)
    return batch, vals, cache


def relation_batch_loss(mf, rel, data: AdaptData, rows, cfg: AdaptConfig, contrastive: bool,
                        seed=0):
    """Mean rating loss (+ weighted contrastive term) for user rows; accumulates gradients."""
    batch, vals, cache = _user_batch(mf, rel, data, rows, seed, cfg.fallback_size)
    n = max(len(vals), 1)
    score, fcache = forward(mf, batch, rel.predictor)
    loss = float(pointwise_loss(score, vals, mf.feedback).sum() / n)
    ds = pointwise_loss_grad(score, vals, mf.feedback) / n
    G, _ = backward(mf, batch, fcache, ds, predictor=rel.predictor, train_embeddings=False,
                    train_biases=False)
    if contrastive and cfg.contrastive_weight > 0:
        P_b = mf.P.value[mf.rows_of(data.users[rows])]
        closs, cgrad = contrastive_loss(P_b, batch.p, cfg.contrastive_sign, return_grad=True)
        loss += cfg.contrastive_weight * closs
        G = G + cfg.contrastive_weight * cgrad
    inductive_backward(rel, cache, G)
    return loss


def relation_dataset_loss(mf, rel, data: AdaptData, seed=0, fallback_size=10, chunk=256):
    tot, n = 0.0, 0
    for lo in range(0, len(data.users), chunk):
        rows = np.arange(lo, min(lo + chunk, len(data.users)))
        batch, vals, _ = _user_batch(mf, rel, data, rows, seed, fallback_size)
        if len(vals) == 0:
            continue
        score, _ = forward(mf, batch, rel.predictor)
        tot += float(pointwise_loss(score, vals, mf.feedback).sum())
        n += len(vals)
    return tot / n if n else float("nan")


def adapt(mode: str, mf: MfParams, train: RatingDataset, partition: UserPartition,
          cfg: AdaptConfig, validation: RatingDataset | None = None,
          init_seed=0, shuffle_seed=0) -> RelationParams:
    """Fit attention weights and a finetuned predictor copy with P and Q frozen.

    ``interpolation`` fits on the query users' ratings (disjoint from the key
    users); ``extrapolation`` fits on the key users' own ratings and adds the
    contrastive term. Returns the best-validation snapshot.
    """
    if mode == "interpolation":
        users = np.asarray(partition.query_users, dtype=np.int64)
        if np.any(mf.has_user(users)) or np.intersect1d(users, partition.key_users).size:
            raise ConfigError("interpolation needs query users disjoint from key users")
    elif mode == "extrapolation":
        users = np.asarray(partition.key_users, dtype=np.int64)
        if not np.all(mf.has_user(users)):
            raise ConfigError("extrapolation needs every key user in the pretrained model")
    else:
        raise ConfigError(f"unknown adaptation mode {mode!r}")
    contrastive = mode == "extrapolation"

    rel = init_relation(mf, cfg.heads, cfg.sample_size, cfg.normalization, cfg.score, init_seed)
    data = AdaptData.build(train, users)
    counts = np.diff(data.rating_ptr)
    fit_rows = np.flatnonzero(counts > 0)
    val_data = None
    if validation is not None:
        vsel = validation.restrict_users(users)
        if len(vsel):
            val_data = AdaptData.build(vsel, users, context_source=train)
    adam = AdamConfig(learning_rate=cfg.learning_rate)
    params = rel.trainable()
    rng = np.random.default_rng(shuffle_seed)
    key_rng = np.random.default_rng([init_seed, 1])

    frozen = mf_fingerprint(mf)
    best = rel.copy()
    best_val = relation_dataset_loss(mf, rel, val_data, init_seed, cfg.fallback_size) if val_data else float("inf")
    rel.history.append({"epoch": 0, "train_loss": float("nan"), "val_loss": best_val})
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.resample_keys and epoch > 1:
            mk = len(mf.user_index)
            k = rel.key_samples.shape[1]
            rel.key_samples = np.stack([np.sort(key_rng.choice(mk, size=k, replace=False))
                                        for _ in range(rel.heads)])
        order = fit_rows[rng.permutation(len(fit_rows))]
        total, nb = 0.0, 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            rows = order[lo:lo + cfg.batch_size]
            loss = relation_batch_loss(mf, rel, data, rows, cfg, contrastive, init_seed)
            if not math.isfinite(loss):
                raise TrainingError(f"nonfinite adaptation loss at epoch {epoch}, batch {b}")
            total += loss
            nb += 1
            for p in params:
                adam_step(p, adam)
        val = relation_dataset_loss(mf, rel, val_data, init_seed, cfg.fallback_size) if val_data else float("nan")
        rel.history.append({"epoch": epoch, "train_loss": total / max(nb, 1), "val_loss": val})
        logger.info("adapt epoch %d train %.4f val %.4f", epoch, total / max(nb, 1), val)
        if val_data is None:
            best = rel
            continue
        if val < best_val:
            best_val, stale = val, 0
            best = rel.copy()
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if mf_fingerprint(mf) != frozen:
        raise TrainingError("adaptation modified the pretrained factors")
    best.history = list(rel.history)
    for p in best.trainable():
        p.zero_grad()
        p.reset_optimizer()
    return best


# ---------------------------------------------------------------- inference

@dataclass
class Inference:
    embedding: np.ndarray
    scores: np.ndarray
    context: UserContext

    def top_k(self, k: int) -> np.ndarray:
        """Items by descending score, ties broken by ascending item index."""
        order = np.lexsort((np.arange(len(self.scores)), -self.scores))
        return order[:k]


def infer_user(history, mf: MfParams, rel: RelationParams, ratings=None, seed=0,
               fallback_size=10, items=None) -> Inference:
    """Embed an unseen user from their rated items and score candidate items."""
    ctx = build_context(history, mf.Q.value, seed, fallback_size, ratings)
    emb = inductive_embedding(rel, ctx.vector[None, :], mf.P.value)
    cand = np.arange(mf.num_items) if items is None else np.asarray(items, dtype=np.int64)
    nbrs = None
    if mf.backbone == "gc":
        nlev = num_levels(mf.feedback)
        if ctx.ratings is None or ctx.fallback_used:
            nbrs = empty_levels(1, nlev)
        else:
            nbrs = build_level_csr(np.zeros(len(ctx.history), dtype=np.int64), ctx.history,
                                   ctx.ratings, 1, mf.feedback)
    batch = Batch(p=emb, bu=np.array([mf.mean_user_bias()]),
                  urow=np.zeros(len(cand), dtype=np.int64), items=cand, user_nbrs=nbrs)
    scores, _ = forward(mf, batch, rel.predictor)
    return Inference(emb[0], scores, ctx)


def inductive_scores(mf: MfParams, rel: RelationParams, histories: RatingDataset, users, items,
                     seed=0, fallback_size=10) -> np.ndarray:
    """Scores for (user, item) pairs with users embedded from ``histories``."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    uniq, urow = np.unique(users, return_inverse=True)
    hist = UserHistories.from_dataset(histories, uniq)
    rows = np.arange(len(uniq))
    C = hist.contexts(mf.Q.value, rows, seed, fallback_size)
    emb = inductive_embedding(rel, C, mf.P.value)
    nbrs = hist.levels(rows, mf.feedback, num_levels(mf.feedback)) if mf.backbone == "gc" else None
    batch = Batch(p=emb, bu=np.full(len(uniq), mf.mean_user_bias()), urow=urow, items=items,
                  user_nbrs=nbrs)
    scores, _ = forward(mf, batch, rel.predictor)
    return scores


def export_attention(rel: RelationParams, mf: MfParams, histories: RatingDataset, users,
                     seed=0, fallback_size=10) -> list[tuple[int, int, int, float]]:
    """Rows of (query_user, head, key_user, weight) with users as global indices."""
    users = np.asarray(users, dtype=np.int64)
    hist = UserHistories.from_dataset(histories, users)
    C = hist.contexts(mf.Q.value, np.arange(len(users)), seed, fallback_size)
    out = []
    for l in range(rel.heads):
        a = head_attention(rel, l, C, mf.P.value)
        keys = mf.user_index[rel.key_samples[l]]
        for r, u in enumerate(users.tolist()):
            for k, w in zip(keys.tolist(), a[r].tolist()):
                out.append((u, l, k, w))
    out.sort(key=lambda t: (t[0], t[1], t[2]))
    return out
