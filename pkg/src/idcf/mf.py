"""Stage one: transductive matrix factorization over key users.

Three predictors share one batch interface:

``dot``  p.q + b_u + b_i + g
``nn``   (p.q + mlp([p, q, p*q])) / 2 + b_u + b_i + g, tanh hidden layers
``gc``   mlp([p*q, p*m_u, n_i*q, n_i*m_u]) + b_u + b_i + g, relu layers, where
         m_u / n_i combine per-rating-level mean aggregates of the user's
         items and the item's users.

The global offset ``g`` starts at the training mean and is trained, unless
``fixed_zero_offset`` pins it at zero.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .config import ModelConfig, PretrainConfig
from .data import RatingDataset
from .errors import ConfigError, TrainingError
from .numerics import AdamConfig, ParamTensor, activation, activation_backward, adam_step, matmul

logger = logging.getLogger(__name__)

RATING_LEVELS = 5


# ---------------------------------------------------------------- neighbor structure

@dataclass
class LevelCSR:
    """Per-rating-level neighbor lists: level ``m`` owns ``indptr[m]``/``indices[m]``."""

    indptr: list
    indices: list

    @property
    def levels(self):
        return len(self.indptr)

    def take(self, rows) -> "LevelCSR":
        """Sub-structure for ``rows`` (in the given order)."""
        rows = np.asarray(rows, dtype=np.int64)
        ptrs, idxs = [], []
        for ptr, idx in zip(self.indptr, self.indices):
            starts, ends = ptr[rows], ptr[rows + 1]
            ptrs.append(np.concatenate([[0], np.cumsum(ends - starts)]).astype(np.int64))
            idxs.append(_gather_ranges(idx, starts, ends))
        return LevelCSR(ptrs, idxs)


def _gather_ranges(idx, starts, ends):
    lens = ends - starts
    total = int(lens.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offs = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
    return idx[np.arange(total) + offs]


def rating_level(values, feedback):
    """0-based level index per rating; implicit data has one level (positives)."""
    if feedback == "implicit":
        return np.zeros(len(values), dtype=np.int64)
    return np.clip(np.rint(values).astype(np.int64), 1, RATING_LEVELS) - 1


def num_levels(feedback):
    return 1 if feedback == "implicit" else RATING_LEVELS


def build_level_csr(owners, targets, values, n_owner, feedback, cap=None, seed=0) -> LevelCSR:
    """Group ``targets`` by (owner, level), each list sorted; lists longer than ``cap`` are subsampled."""
    owners = np.asarray(owners, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if feedback == "implicit":
        keep = values > 0
        owners, targets, values = owners[keep], targets[keep], values[keep]
    levels = rating_level(values, feedback)
    rng = np.random.default_rng(seed)
    ptrs, idxs = [], []
    for m in range(num_levels(feedback)):
        sel = levels == m
        o, t = owners[sel], targets[sel]
        order = np.lexsort((t, o))
        o, t = o[order], t[order]
        counts = np.bincount(o, minlength=n_owner)
        if cap is not None and counts.size and counts.max() > cap:
            bounds = np.concatenate([[0], np.cumsum(counts)])
            keep = np.ones(len(t), dtype=bool)
            for r in np.flatnonzero(counts > cap):
                lo, hi = bounds[r], bounds[r + 1]
                drop = rng.choice(hi - lo, size=(hi - lo) - cap, replace=False)
                keep[lo + drop] = False
            o, t = o[keep], t[keep]
            counts = np.bincount(o, minlength=n_owner)
        ptrs.append(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))
        idxs.append(t)
    return LevelCSR(ptrs, idxs)


@dataclass
class NeighborGraph:
    """User-side lists hold item indices; item-side lists hold P-row indices."""

    user_side: LevelCSR
    item_side: LevelCSR
    cap: int


# ---------------------------------------------------------------- parameters

@dataclass
class MfParams:
    backbone: str
    dim: int
    hidden: int
    P: ParamTensor
    Q: ParamTensor
    user_bias: ParamTensor
    item_bias: ParamTensor
    global_bias: ParamTensor
    predictor: dict
    user_index: np.ndarray
    feedback: str = "explicit"
    fixed_zero_offset: bool = False
    graph: NeighborGraph | None = None
    seed: int = 0
    history: list = field(default_factory=list)

    @property
    def num_items(self):
        return self.Q.shape[0]

    def rows_of(self, users) -> np.ndarray:
        """P rows of global user indices; IndexError for users without a row."""
        users = np.asarray(users, dtype=np.int64)
        pos = np.searchsorted(self.user_index, users)
        pos = np.minimum(pos, max(len(self.user_index) - 1, 0))
        if len(self.user_index) == 0 or np.any(self.user_index[pos] != users):
            bad = users[self.user_index[pos] != users] if len(self.user_index) else users
            raise IndexError(f"users without a learned embedding: {bad[:5].tolist()}")
        return pos

    def has_user(self, users) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if len(self.user_index) == 0:
            return np.zeros(len(users), dtype=bool)
        pos = np.minimum(np.searchsorted(self.user_index, users), len(self.user_index) - 1)
        return self.user_index[pos] == users

    def tensors(self) -> list[ParamTensor]:
        return [self.P, self.Q, self.user_bias, self.item_bias, self.global_bias,
                *self.predictor.values()]

    def trainable(self) -> list[ParamTensor]:
        out = [self.P, self.Q, self.user_bias, self.item_bias, *self.predictor.values()]
        if not self.fixed_zero_offset:
            out.append(self.global_bias)
        return out

    def mean_user_bias(self) -> float:
        return float(self.user_bias.value.mean()) if self.user_bias.value.size else 0.0

    def copy(self) -> "MfParams":
        return copy.deepcopy(self)


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_predictor(backbone, d, h, rng, levels=RATING_LEVELS) -> dict:
    if backbone == "dot":
        return {}
    if backbone == "nn":
        sizes = [3 * d, h, h, 1]
    elif backbone == "gc":
        sizes = [4 * d, h, h, 1]
    else:
        raise ConfigError(f"unknown backbone {backbone!r}")
    pred = {}
    if backbone == "gc":
        pred["Wq"] = ParamTensor("Wq", np.stack([_glorot(rng, d, d) for _ in range(levels)]))
        pred["Wp"] = ParamTensor("Wp", np.stack([_glorot(rng, d, d) for _ in range(levels)]))
        pred["F"] = ParamTensor("F", _glorot(rng, levels * d, d))
        pred["f"] = ParamTensor("f", np.zeros(d))
        pred["G"] = ParamTensor("G", _glorot(rng, levels * d, d))
        pred["g"] = ParamTensor("g", np.zeros(d))
    for k in range(3):
        pred[f"W{k + 1}"] = ParamTensor(f"W{k + 1}", _glorot(rng, sizes[k], sizes[k + 1]))
        pred[f"c{k + 1}"] = ParamTensor(f"c{k + 1}", np.zeros(sizes[k + 1]))
    return pred


def init_params(users, num_items, model: ModelConfig, feedback="explicit", seed=0,
                global_mean=0.0) -> MfParams:
    users = np.unique(np.asarray(users, dtype=np.int64))
    d = model.dim
    if d > min(max(len(users), 1), max(num_items, 1)) and len(users) and num_items:
        logger.warning("dim=%d exceeds min(users=%d, items=%d)", d, len(users), num_items)
    rng = np.random.default_rng(seed)
    std = 0.1 / math.sqrt(d)
    P = ParamTensor("P", rng.normal(0.0, std, size=(len(users), d)), decay=True)
    Q = ParamTensor("Q", rng.normal(0.0, std, size=(num_items, d)), decay=True)
    pred = init_predictor(model.backbone, d, model.hidden, rng, num_levels(feedback))
    g = 0.0 if model.fixed_zero_offset else float(global_mean)
    return MfParams(
        backbone=model.backbone, dim=d, hidden=model.hidden, P=P, Q=Q,
        user_bias=ParamTensor("user_bias", np.zeros(len(users))),
        item_bias=ParamTensor("item_bias", np.zeros(num_items)),
        global_bias=ParamTensor("global_bias", np.array([g])),
        predictor=pred, user_index=users, feedback=feedback,
        fixed_zero_offset=model.fixed_zero_offset, seed=seed,
    )


def attach_graph(mf: MfParams, train: RatingDataset, cap=50, seed=0):
    """Build the neighbor lists a ``gc`` predictor aggregates over, from ``train``."""
    keep = mf.has_user(train.users)
    users, items, vals = train.users[keep], train.items[keep], train.values[keep]
    rows = mf.rows_of(users)
    mf.graph = NeighborGraph(
        user_side=build_level_csr(rows, items, vals, len(mf.user_index), mf.feedback, cap, seed),
        item_side=build_level_csr(items, rows, vals, mf.num_items, mf.feedback, cap, seed + 1),
        cap=cap,
    )
    return mf


# ---------------------------------------------------------------- batched scoring

@dataclass
class Batch:
    """A set of (user, item) pairs grouped by distinct user.

    ``p``/``bu`` hold one row per distinct user and ``urow`` maps each pair
    to its user row. ``user_nbrs`` (gc only) gives each distinct user's
    rated items per level.
    """

    p: np.ndarray
    bu: np.ndarray
    urow: np.ndarray
    items: np.ndarray
    user_nbrs: LevelCSR | None = None


def _mlp_forward(pred, x, act):
    cache = [x]
    h = x
    for k in (1, 2):
        z = matmul(h, pred[f"W{k}"].value) + pred[f"c{k}"].value
        cache.append(z)
        h = activation(act, z)
        cache.append(h)
    out = matmul(h, pred["W3"].value)[:, 0] + pred["c3"].value[0]
    return out, cache


def _mlp_backward(pred, cache, dout, act):
    x, z1, h1, z2, h2 = cache
    d3 = dout[:, None]
    pred["W3"].grad += matmul(h2.T, d3)
    pred["c3"].grad += d3.sum(axis=0)
    dz2 = activation_backward(act, z2, matmul(d3, pred["W3"].value.T))
    pred["W2"].grad += matmul(h1.T, dz2)
    pred["c2"].grad += dz2.sum(axis=0)
    dz1 = activation_backward(act, z1, matmul(dz2, pred["W2"].value.T))
    pred["W1"].grad += matmul(x.T, dz1)
    pred["c1"].grad += dz1.sum(axis=0)
    return matmul(dz1, pred["W1"].value.T)


def _aggregate(nbrs: LevelCSR, table, W):
    """Per level: relu(mean of table rows @ W[m]); empty lists give zeros."""
    means, pre, outs = [], [], []
    for m in range(nbrs.levels):
        ptr = nbrs.indptr[m]
        cnt = np.diff(ptr).astype(np.float64)
        s = kernels.segment_sum(ptr, nbrs.indices[m], table)
        mean = s / np.maximum(cnt, 1.0)[:, None]
        a = matmul(mean, W[m])
        means.append(mean)
        pre.append(a)
        outs.append(activation("relu", a))
    return means, pre, np.hstack(outs)


def _aggregate_backward(nbrs, W, Wgrad, means, pre, dcat, table_grad, d):
    for m in range(nbrs.levels):
        da = activation_backward("relu", pre[m], dcat[:, m * d:(m + 1) * d])
        Wgrad[m] += matmul(means[m].T, da)
        if table_grad is not None:
            dmean = matmul(da, W[m].T)
            ptr = nbrs.indptr[m]
            cnt = np.diff(ptr)
            rows = np.repeat(dmean / np.maximum(cnt, 1)[:, None], cnt, axis=0)
            kernels.scatter_add_rows(table_grad, nbrs.indices[m], rows)


def forward(mf: MfParams, batch: Batch, predictor: dict | None = None):
    """Scores for every pair in ``batch`` plus the cache ``backward`` needs."""
    pred = mf.predictor if predictor is None else predictor
    Q = mf.Q.value
    pu = batch.p[batch.urow]
    qi = Q[batch.items]
    base = batch.bu[batch.urow] + mf.item_bias.value[batch.items] + mf.global_bias.value[0]
    cache = {"pu": pu, "qi": qi}
    if mf.backbone == "dot":
        return kernels.rowdot(pu, qi) + base, cache
    if mf.backbone == "nn":
        x = np.hstack([pu, qi, pu * qi])
        o, mcache = _mlp_forward(pred, x, "tanh")
        cache["mlp"] = mcache
        return 0.5 * (kernels.rowdot(pu, qi) + o) + base, cache
    if mf.backbone == "gc":
        if mf.graph is None or batch.user_nbrs is None:
            raise ConfigError("gc backbone needs neighbor lists")
        d = mf.dim
        umeans, upre, ucat = _aggregate(batch.user_nbrs, Q, pred["Wq"].value)
        mu_all = matmul(ucat, pred["F"].value) + pred["f"].value
        uitems, irow = np.unique(batch.items, return_inverse=True)
        inbrs = mf.graph.item_side.take(uitems)
        imeans, ipre, icat = _aggregate(inbrs, mf.P.value, pred["Wp"].value)
        ni_all = matmul(icat, pred["G"].value) + pred["g"].value
        mu = mu_all[batch.urow]
        ni = ni_all[irow]
        x = np.hstack([pu * qi, pu * mu, ni * qi, ni * mu])
        o, mcache = _mlp_forward(pred, x, "relu")
        cache.update(mlp=mcache, mu=mu, ni=ni, irow=irow, inbrs=inbrs, uitems=uitems,
                     umeans=umeans, upre=upre, ucat=ucat, imeans=imeans, ipre=ipre, icat=icat,
                     d=d)
        return o + base, cache
    raise ConfigError(f"unknown backbone {mf.backbone!r}")


def backward(mf: MfParams, batch: Batch, cache, dscore, predictor: dict | None = None,
             train_embeddings=True, train_biases=True):
    """Accumulate gradients of sum(dscore * score); returns d/dp per distinct user."""
    pred = mf.predictor if predictor is None else predictor
    pu, qi = cache["pu"], cache["qi"]
    n_users = batch.p.shape[0]
    if train_biases:
        kernels.scatter_add_rows(mf.item_bias.grad[:, None], batch.items, dscore[:, None])
        if not mf.fixed_zero_offset:
            mf.global_bias.grad[0] += dscore.sum()
    dbu = np.zeros((n_users, 1))
    kernels.scatter_add_rows(dbu, batch.urow, dscore[:, None])

    if mf.backbone == "dot":
        dpu = dscore[:, None] * qi
        dqi = dscore[:, None] * pu
    elif mf.backbone == "nn":
        d = mf.dim
        half = 0.5 * dscore
        dx = _mlp_backward(pred, cache["mlp"], half, "tanh")
        dpu = half[:, None] * qi + dx[:, :d] + dx[:, 2 * d:] * qi
        dqi = half[:, None] * pu + dx[:, d:2 * d] + dx[:, 2 * d:] * pu
    else:
        d = cache["d"]
        mu, ni = cache["mu"], cache["ni"]
        dx = _mlp_backward(pred, cache["mlp"], dscore, "relu")
        a, b, c, e = (dx[:, k * d:(k + 1) * d] for k in range(4))
        dpu = a * qi + b * mu
        dqi = a * pu + c * ni
        dmu = b * pu + e * ni
        dni = c * qi + e * mu
        dmu_all = np.zeros((n_users, d))
        kernels.scatter_add_rows(dmu_all, batch.urow, dmu)
        dni_all = np.zeros((len(cache["uitems"]), d))
        kernels.scatter_add_rows(dni_all, cache["irow"], dni)
        pred["F"].grad += matmul(cache["ucat"].T, dmu_all)
        pred["f"].grad += dmu_all.sum(axis=0)
        pred["G"].grad += matmul(cache["icat"].T, dni_all)
        pred["g"].grad += dni_all.sum(axis=0)
        ducat = matmul(dmu_all, pred["F"].value.T)
        dicat = matmul(dni_all, pred["G"].value.T)
        _aggregate_backward(batch.user_nbrs, pred["Wq"].value, pred["Wq"].grad, cache["umeans"],
                            cache["upre"], ducat, mf.Q.grad if train_embeddings else None, d)
        _aggregate_backward(cache["inbrs"], pred["Wp"].value, pred["Wp"].grad, cache["imeans"],
                            cache["ipre"], dicat, mf.P.grad if train_embeddings else None, d)

    if train_embeddings:
        kernels.scatter_add_rows(mf.Q.grad, batch.items, dqi)
    dp = np.zeros((n_users, mf.dim))
    kernels.scatter_add_rows(dp, batch.urow, dpu)
    return dp, dbu[:, 0]


# ---------------------------------------------------------------- losses

def pointwise_loss(score, target, feedback="explicit"):
    """Squared error (explicit) or logistic cross-entropy on raw scores (implicit)."""
    score = np.asarray(score, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if feedback == "explicit":
        return (score - target) ** 2
    return np.maximum(score, 0.0) - target * score + np.log1p(np.exp(-np.abs(score)))


def pointwise_loss_grad(score, target, feedback="explicit"):
    if feedback == "explicit":
        return 2.0 * (score - target)
    return activation("sigmoid", score) - target


# ---------------------------------------------------------------- transductive batches

def transductive_batch(mf: MfParams, users, items) -> Batch:
    rows = mf.rows_of(users)
    urows, urow = np.unique(rows, return_inverse=True)
    nbrs = mf.graph.user_side.take(urows) if mf.backbone == "gc" else None
    return Batch(p=mf.P.value[urows], bu=mf.user_bias.value[urows], urow=urow,
                 items=np.asarray(items, dtype=np.int64), user_nbrs=nbrs), urows


def predict_pairs(mf: MfParams, users, items, chunk=8192) -> np.ndarray:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if len(items) and (items.min() < 0 or items.max() >= mf.num_items):
        raise IndexError("item index out of range")
    out = np.empty(len(users))
    for lo in range(0, len(users), chunk):
        b, _ = transductive_batch(mf, users[lo:lo + chunk], items[lo:lo + chunk])
        out[lo:lo + chunk], _ = forward(mf, b)
    return out


def predict(mf: MfParams, u: int, i: int, embedding_override=None, user_nbrs=None,
            user_bias=None, predictor=None) -> float:
    """Score one pair. ``embedding_override`` replaces the user's row of P."""
    if not 0 <= i < mf.num_items:
        raise IndexError(f"item {i} out of range")
    if embedding_override is None:
        b, _ = transductive_batch(mf, [u], [i])
    else:
        p = np.asarray(embedding_override, dtype=np.float64).reshape(1, mf.dim)
        bu = mf.mean_user_bias() if user_bias is None else user_bias
        if mf.backbone == "gc" and user_nbrs is None:
            user_nbrs = empty_levels(1, num_levels(mf.feedback))
        b = Batch(p=p, bu=np.array([bu]), urow=np.zeros(1, dtype=np.int64),
                  items=np.array([i]), user_nbrs=user_nbrs)
    s, _ = forward(mf, b, predictor)
    return float(s[0])


def empty_levels(n_rows, levels) -> LevelCSR:
    return LevelCSR([np.zeros(n_rows + 1, dtype=np.int64) for _ in range(levels)],
                    [np.zeros(0, dtype=np.int64) for _ in range(levels)])


def batch_loss(mf, train: RatingDataset, idx, train_embeddings=True, l2=0.0):
    """Mean pointwise loss on ``train[idx]``; accumulates gradients into ``mf``.

    ``l2`` adds ``l2 * mean(|p_u|^2 + |q_i|^2)`` over the batch pairs, so
    only embeddings that occur in the batch are regularized.
    """
    users, items, vals = train.users[idx], train.items[idx], train.values[idx]
    batch, urows = transductive_batch(mf, users, items)
    score, cache = forward(mf, batch)
    n = len(idx)
    loss = float(pointwise_loss(score, vals, mf.feedback).sum() / n)
    ds = pointwise_loss_grad(score, vals, mf.feedback) / n
    dp, dbu = backward(mf, batch, cache, ds, train_embeddings=train_embeddings)
    if l2 and train_embeddings:
        pu = batch.p[batch.urow]
        qi = mf.Q.value[batch.items]
        loss += l2 * float((pu * pu).sum() + (qi * qi).sum()) / n
        kernels.scatter_add_rows(dp, batch.urow, (2.0 * l2 / n) * pu)
        kernels.scatter_add_rows(mf.Q.grad, batch.items, (2.0 * l2 / n) * qi)
    if train_embeddings:
        kernels.scatter_add_rows(mf.P.grad, urows, dp)
    kernels.scatter_add_rows(mf.user_bias.grad[:, None], urows, dbu[:, None])
    return loss


def dataset_loss(mf: MfParams, ds: RatingDataset) -> float:
    if len(ds) == 0:
        return float("nan")
    score = predict_pairs(mf, ds.users, ds.items)
    return float(pointwise_loss(score, ds.values, mf.feedback).mean())


# ---------------------------------------------------------------- training

def pretrain(train: RatingDataset, model: ModelConfig, cfg: PretrainConfig,
             validation: RatingDataset | None = None, users=None,
             init_seed=0, shuffle_seed=0) -> MfParams:
    """Mini-batch Adam on the observed ratings of ``users``; returns the best-validation snapshot.

    ``users`` defaults to everyone with a training rating. Without a
    validation set the final epoch is returned.
    """
    if users is None:
        users = np.unique(train.users)
    users = np.unique(np.asarray(users, dtype=np.int64))
    train = train.restrict_users(users)
    if validation is not None:
        validation = validation.restrict_users(users)
        if len(validation) == 0:
            validation = None
    gmean = float(train.values.mean()) if len(train) else 0.0
    mf = init_params(users, train.num_items, model, train.feedback, init_seed, gmean)
    if model.backbone == "gc":
        attach_graph(mf, train, model.gc_neighbor_cap, init_seed)
    adam = AdamConfig(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    params = mf.trainable()
    rng = np.random.default_rng(shuffle_seed)

    best = mf.copy()
    best_val = dataset_loss(mf, validation) if validation is not None else float("inf")
    mf.history.append({"epoch": 0, "train_loss": float("nan"), "val_loss": best_val})
    best.history = list(mf.history)
    stale = 0
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            loss = batch_loss(mf, train, idx, l2=cfg.l2)
            if not math.isfinite(loss):
                raise TrainingError(f"nonfinite loss at epoch {epoch}, batch {b}")
            total += loss * len(idx)
            for p in params:
                adam_step(p, adam)
        val = dataset_loss(mf, validation) if validation is not None else float("nan")
        mf.history.append({"epoch": epoch, "train_loss": total / max(n, 1), "val_loss": val})
        logger.info("pretrain epoch %d train %.4f val %.4f", epoch, total / max(n, 1), val)
        if validation is None:
            best = mf
            continue
        if val < best_val:
            best_val, stale = val, 0
            best = mf.copy()
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    best.history = list(mf.history)
    for p in best.tensors():
        p.zero_grad()
        p.reset_optimizer()
    return best
