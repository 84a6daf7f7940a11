import json

import numpy as np
import pytest

from idcf.checkpoint import atomic_write, load_mf, load_relation, save_mf, save_relation
from idcf.errors import CheckpointError
from idcf.gradcheck import _toy_relation


@pytest.mark.parametrize("backbone", ["dot", "nn", "gc"])
def test_mf_round_trip_is_bit_exact(tmp_path, backbone):
    mf, rel, *_ = _toy_relation(backbone=backbone)
    save_mf(tmp_path / "mf.ckpt", mf, {"note": "x"})
    back, meta = load_mf(tmp_path / "mf.ckpt")
    assert meta == {"note": "x"}
    for a, b in zip(mf.tensors(), back.tensors()):
        assert a.name == b.name and np.array_equal(a.value, b.value)
    assert np.array_equal(mf.user_index, back.user_index)
    if backbone == "gc":
        for x, y in zip(mf.graph.user_side.indices, back.graph.user_side.indices):
            assert np.array_equal(x, y)
    save_relation(tmp_path / "rel.ckpt", rel)
    rback, _ = load_relation(tmp_path / "rel.ckpt", back)
    for a, b in zip(rel.trainable(), rback.trainable()):
        assert np.array_equal(a.value, b.value)
    assert np.array_equal(rel.key_samples, rback.key_samples)


def test_relation_refuses_other_mf(tmp_path):
    mf, rel, *_ = _toy_relation()
    save_relation(tmp_path / "rel.ckpt", rel)
    mf.P.value[0, 0] += 1.0
    with pytest.raises(CheckpointError):
        load_relation(tmp_path / "rel.ckpt", mf)


def test_corrupt_checkpoints(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_text("not json")
    with pytest.raises(CheckpointError):
        load_mf(p)
    p.write_text(json.dumps({"kind": "relation", "format_version": 1}))
    with pytest.raises(CheckpointError):
        load_mf(p)
    with pytest.raises(CheckpointError):
        load_mf(tmp_path / "missing.ckpt")


def test_tampered_values_fail_checksum(tmp_path):
    mf, *_ = _toy_relation()
    save_mf(tmp_path / "mf.ckpt", mf)
    d = json.loads((tmp_path / "mf.ckpt").read_text())
    d["tensors"][0]["data"][0] += 1.0
    (tmp_path / "mf.ckpt").write_text(json.dumps(d))
    with pytest.raises(CheckpointError, match="checksum"):
        load_mf(tmp_path / "mf.ckpt")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write(tmp_path / "a" / "b.txt", "hello\n")
    assert (tmp_path / "a" / "b.txt").read_text() == "hello\n"
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["b.txt"]
