"""Finite-difference checks of every hand-written backward pass on small problems."""

from __future__ import annotations

import numpy as np

from .config import AdaptConfig, ModelConfig
from .data import RatingDataset, UserPartition, Threshold
from .mf import attach_graph, batch_loss, init_params
from .numerics import ParamTensor, grad_check
from .relation import AdaptData, contrastive_loss, init_relation, relation_batch_loss

PROBES = 32


def _toy_ratings(M=12, N=9, seed=0, feedback="explicit"):
    rng = np.random.default_rng(seed)
    mask = rng.random((M, N)) < 0.5
    mask[np.arange(M), rng.integers(N, size=M)] = True
    users, items = np.nonzero(mask)
    if feedback == "explicit":
        vals = rng.integers(1, 6, size=len(users)).astype(float)
    else:
        vals = (rng.random(len(users)) < 0.6).astype(float)
    return RatingDataset(M, N, users, items, vals, feedback, None, np.arange(M), np.arange(N))


def _toy_mf(backbone, ds, dim=4, hidden=6, seed=0, users=None):
    users = np.unique(ds.users) if users is None else users
    mf = init_params(users, ds.num_items, ModelConfig(backbone, dim, hidden), ds.feedback,
                     seed, float(ds.values.mean()))
    rng = np.random.default_rng(seed + 7)
    for t in mf.tensors():
        t.value[...] = rng.normal(0.0, 0.5, size=t.shape)
    if backbone == "gc":
        attach_graph(mf, ds.restrict_users(users), cap=50, seed=seed)
    return mf


def check_backbone(backbone, feedback="explicit", probes=PROBES, seed=0) -> float:
    ds = _toy_ratings(seed=seed, feedback=feedback)
    mf = _toy_mf(backbone, ds, seed=seed)
    idx = np.arange(len(ds))
    return grad_check(lambda: batch_loss(mf, ds, idx), mf.trainable(), probes, seed=seed)


def _toy_relation(backbone="nn", normalization="softmax", score="concat_bilinear", seed=0,
                  weight=0.0):
    ds = _toy_ratings(M=14, N=9, seed=seed)
    key = np.arange(8)
    query = np.arange(8, 14)
    mf = _toy_mf(backbone, ds, seed=seed, users=key)
    rel = init_relation(mf, heads=2, sample_size=5, normalization=normalization, score=score,
                        seed=seed)
    rng = np.random.default_rng(seed + 11)
    for t in rel.attention_tensors():
        t.value[...] = rng.normal(0.0, 0.4, size=t.shape)
    if normalization == "linear_ratio":
        # keep score sums well away from zero so the ratio is smooth
        rel.e.value[...] = np.abs(rel.e.value) + 0.5
        for W in (rel.Wq, rel.Wk):
            W.value[...] = np.abs(W.value)
        mf.P.value[...] = np.abs(mf.P.value) + 0.1
        mf.Q.value[...] = np.abs(mf.Q.value) + 0.1
    users = key if weight > 0 else query
    data = AdaptData.build(ds, users)
    cfg = AdaptConfig(contrastive_weight=weight, normalization=normalization, score=score)
    return mf, rel, data, cfg


def check_relation(normalization="softmax", score="concat_bilinear", backbone="nn",
                   probes=PROBES, seed=0, weight=0.0) -> float:
    mf, rel, data, cfg = _toy_relation(backbone, normalization, score, seed, weight)
    rows = np.arange(len(data.users))
    return grad_check(lambda: relation_batch_loss(mf, rel, data, rows, cfg, weight > 0, seed),
                      rel.trainable(), probes, seed=seed)


def check_contrastive(probes=PROBES, seed=0, sign="nll") -> float:
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(6, 4))
    T = ParamTensor("P_tilde", rng.normal(size=(6, 4)))

    def loss():
        val, g = contrastive_loss(P, T.value, sign, return_grad=True)
        T.grad += g
        return val

    return grad_check(loss, [T], probes, seed=seed)


def run_all(probes=PROBES, seed=0) -> dict[str, float]:
    out = {}
    for bb in ("dot", "nn", "gc"):
        out[bb] = check_backbone(bb, probes=probes, seed=seed)
        out[f"{bb}_implicit"] = check_backbone(bb, "implicit", probes=probes, seed=seed)
    for norm in ("softmax", "linear_ratio"):
        for score in ("concat", "concat_bilinear"):
            out[f"attention_{norm}_{score}"] = check_relation(norm, score, probes=probes, seed=seed)
    out["attention_gc"] = check_relation(backbone="gc", probes=probes, seed=seed)
    out["attention_contrastive"] = check_relation(weight=10.0, probes=probes, seed=seed)
    out["contrastive"] = check_contrastive(probes, seed)
    return out
