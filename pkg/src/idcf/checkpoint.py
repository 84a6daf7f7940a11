"""JSON checkpoints for the factor model and the relation model.

Floats are written with ``repr`` (shortest round-trip form), so loading a
saved model reproduces every array bit for bit.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .mf import LevelCSR, MfParams, NeighborGraph
from .numerics import ParamTensor
from .relation import RelationParams, mf_fingerprint

FORMAT_VERSION = 1


def atomic_write(path, text: str):
    """Write ``text`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _arr(a) -> dict:
    a = np.asarray(a)
    kind = "int" if np.issubdtype(a.dtype, np.integer) else "float"
    return {"shape": list(a.shape), "dtype": kind, "data": a.reshape(-1).tolist()}


def _unarr(d) -> np.ndarray:
    try:
        dtype = np.int64 if d["dtype"] == "int" else np.float64
        return np.asarray(d["data"], dtype=dtype).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed array: {exc}") from None


def _tensor(t: ParamTensor) -> dict:
    return {"name": t.name, "decay": t.decay, **_arr(t.value)}


def _untensor(d) -> ParamTensor:
    return ParamTensor(d["name"], _unarr(d), bool(d.get("decay", False)))


def _levels(l: LevelCSR) -> dict:
    return {"indptr": [_arr(p) for p in l.indptr], "indices": [_arr(i) for i in l.indices]}


def _unlevels(d) -> LevelCSR:
    return LevelCSR([_unarr(p) for p in d["indptr"]], [_unarr(i) for i in d["indices"]])


def mf_to_dict(mf: MfParams, meta: dict | None = None) -> dict:
    graph = None
    if mf.graph is not None:
        graph = {"user_side": _levels(mf.graph.user_side), "item_side": _levels(mf.graph.item_side),
                 "cap": mf.graph.cap}
    return {
        "format_version": FORMAT_VERSION,
        "kind": "mf",
        "backbone": mf.backbone,
        "dim": mf.dim,
        "hidden": mf.hidden,
        "feedback": mf.feedback,
        "fixed_zero_offset": mf.fixed_zero_offset,
        "seed": mf.seed,
        "user_index": _arr(mf.user_index),
        "tensors": [_tensor(t) for t in (mf.P, mf.Q, mf.user_bias, mf.item_bias, mf.global_bias)],
        "predictor": [_tensor(t) for t in mf.predictor.values()],
        "graph": graph,
        "history": mf.history,
        "checksum": mf_fingerprint(mf),
        "meta": meta or {},
    }


def mf_from_dict(d: dict) -> MfParams:
    _check_header(d, "mf")
    try:
        P, Q, ub, ib, gb = (_untensor(t) for t in d["tensors"])
        graph = None
        if d.get("graph"):
            g = d["graph"]
            graph = NeighborGraph(_unlevels(g["user_side"]), _unlevels(g["item_side"]), g["cap"])
        mf = MfParams(
            backbone=d["backbone"], dim=d["dim"], hidden=d["hidden"], P=P, Q=Q,
            user_bias=ub, item_bias=ib, global_bias=gb,
            predictor={t["name"]: _untensor(t) for t in d["predictor"]},
            user_index=_unarr(d["user_index"]), feedback=d["feedback"],
            fixed_zero_offset=d["fixed_zero_offset"], graph=graph, seed=d["seed"],
            history=d.get("history", []),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed mf checkpoint: {exc}") from None
    if P.shape != (len(mf.user_index), mf.dim) or Q.shape[1] != mf.dim:
        raise CheckpointError("embedding shapes do not match the recorded dimension")
    if d.get("checksum") and mf_fingerprint(mf) != d["checksum"]:
        raise CheckpointError("mf checkpoint checksum mismatch")
    return mf


def rel_to_dict(rel: RelationParams, meta: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "relation",
        "heads": rel.heads,
        "dim": rel.dim,
        "normalization": rel.normalization,
        "score": rel.score,
        "tensors": [_tensor(t) for t in rel.attention_tensors()],
        "key_samples": _arr(rel.key_samples),
        "predictor": [_tensor(t) for t in rel.predictor.values()],
        "mf_checksum": rel.mf_checksum,
        "history": rel.history,
        "meta": meta or {},
    }


def rel_from_dict(d: dict, mf: MfParams | None = None) -> RelationParams:
    _check_header(d, "relation")
    try:
        e, Wq, Wk, Wv, Wo = (_untensor(t) for t in d["tensors"])
        rel = RelationParams(
            heads=d["heads"], dim=d["dim"], e=e, Wq=Wq, Wk=Wk, Wv=Wv, Wo=Wo,
            key_samples=_unarr(d["key_samples"]), normalization=d["normalization"],
            score=d["score"], predictor={t["name"]: _untensor(t) for t in d["predictor"]},
            mf_checksum=d["mf_checksum"], history=d.get("history", []),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed relation checkpoint: {exc}") from None
    if mf is not None:
        if mf_fingerprint(mf) != rel.mf_checksum:
            raise CheckpointError("relation checkpoint was trained on a different mf checkpoint")
        if set(rel.predictor) != set(mf.predictor) or rel.dim != mf.dim:
            raise CheckpointError("relation checkpoint does not match the mf backbone")
    return rel


def _check_header(d, kind):
    if not isinstance(d, dict) or d.get("kind") != kind:
        raise CheckpointError(f"not a {kind} checkpoint")
    if d.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {d.get('format_version')!r}")


def _dump(d) -> str:
    return json.dumps(d, separators=(",", ":")) + "\n"


def _read(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} not found") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {exc}") from None


def save_mf(path, mf: MfParams, meta: dict | None = None):
    atomic_write(path, _dump(mf_to_dict(mf, meta)))


def load_mf(path) -> tuple[MfParams, dict]:
    d = _read(path)
    return mf_from_dict(d), d.get("meta", {})


def save_relation(path, rel: RelationParams, meta: dict | None = None):
    atomic_write(path, _dump(rel_to_dict(rel, meta)))


def load_relation(path, mf: MfParams | None = None) -> tuple[RelationParams, dict]:
    d = _read(path)
    return rel_from_dict(d, mf), d.get("meta", {})
