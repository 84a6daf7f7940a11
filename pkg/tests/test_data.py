import numpy as np
import pytest

from idcf.data import (
    RandomFraction, RatingDataset, Threshold, holdout_split, load_movielens, negative_sample,
    partition_users, synth_low_rank,
)
from idcf.errors import ConfigError, DataValidationError, ParseError

from .conftest import ML100K, needs_ml100k


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_udata_remaps_ids(tmp_path):
    p = _write(tmp_path, "u.data", "10\t7\t4\t100\n3\t7\t5\t101\n10\t2\t1\t102\n")
    ds = load_movielens(p)
    assert (ds.num_users, ds.num_items) == (2, 2)
    assert ds.user_ids.tolist() == [3, 10] and ds.item_ids.tolist() == [2, 7]
    assert ds.users.tolist() == [1, 0, 1]
    assert ds.items.tolist() == [1, 1, 0]


def test_load_reports_line_of_bad_record(tmp_path):
    p = _write(tmp_path, "u.data", "1\t1\t4\t1\n1\t2\t4\n")
    with pytest.raises(ParseError, match="line 2"):
        load_movielens(p)


def test_out_of_range_rating(tmp_path):
    p = _write(tmp_path, "u.data", "1\t1\t6\t1\n")
    with pytest.raises(DataValidationError, match="line 1"):
        load_movielens(p)


def test_empty_file(tmp_path):
    ds = load_movielens(_write(tmp_path, "u.data", ""))
    assert (ds.num_users, ds.num_items, len(ds)) == (0, 0, 0)


def test_duplicates_keep_latest_timestamp(tmp_path):
    p = _write(tmp_path, "u.data", "1\t1\t2\t50\n1\t2\t3\t10\n1\t1\t5\t40\n")
    ds = load_movielens(p)
    assert len(ds) == 2 and not ds.has_duplicates()
    assert ds.values.tolist() == [2.0, 3.0]


def test_generic_csv(tmp_path):
    p = _write(tmp_path, "r.csv", "user_id,item_id,rating\na,x,1\nb,y,0\n")
    ds = load_movielens(p, "generic_csv", "implicit")
    assert ds.values.tolist() == [1.0, 0.0]
    with pytest.raises(ParseError):
        load_movielens(_write(tmp_path, "bad.csv", "u,i,r\n1,1,1\n"), "generic_csv")


def test_implicit_validation():
    with pytest.raises(DataValidationError):
        RatingDataset(1, 1, [0], [0], [0.5], "implicit")


def test_holdout_split_partitions_indices(toy_ds):
    sp = holdout_split(toy_ds, 0.2, seed=1)
    allidx = np.concatenate([sp.train, sp.validation, sp.test])
    assert sorted(allidx.tolist()) == list(range(len(toy_ds)))
    assert len(sp.test) == round(0.2 * len(toy_ds))
    assert holdout_split(toy_ds, 0.2, seed=1).equals(sp)


def test_head_split_takes_file_prefix(toy_ds):
    sp = holdout_split(toy_ds, 0.25, seed=0, method="head")
    assert sp.test.tolist() == list(range(len(sp.test)))


def test_threshold_partition(toy_ds):
    sp = holdout_split(toy_ds, 0.2, seed=0)
    counts = np.bincount(toy_ds.users[sp.fit()], minlength=toy_ds.num_users)
    part = partition_users(toy_ds, sp, Threshold(3))
    assert np.all(counts[part.key_users] > 3)
    assert np.all(counts[part.query_users] <= 3)
    inc = partition_users(toy_ds, sp, Threshold(3, inclusive=True))
    assert np.all(counts[inc.key_users] >= 3)
    assert np.intersect1d(part.key_users, part.query_users).size == 0


def test_random_partition():
    ds = RatingDataset(10, 2, np.arange(10), np.zeros(10), np.ones(10))
    sp = holdout_split(ds, 0.2, 0)
    part = partition_users(ds, sp, RandomFraction(0.7, seed=3))
    assert len(part.key_users) == 7 and len(part.query_users) == 3
    with pytest.raises(ConfigError):
        partition_users(RatingDataset(1, 1, [0], [0], [1.0]), sp, RandomFraction(0.5))


def test_negative_sampling():
    ds = RatingDataset(2, 6, [0, 0, 1], [0, 1, 2], [1, 1, 1], "implicit")
    out = negative_sample(ds, ratio=2, seed=0)
    neg = out.values == 0
    assert neg.sum() == 6
    for u, i in zip(out.users[neg], out.items[neg]):
        assert (u, i) not in {(0, 0), (0, 1), (1, 2)}
    excl = RatingDataset(2, 6, [1], [3], [1], "implicit")
    out2 = negative_sample(ds, ratio=3, seed=0, exclude=excl)
    assert not np.any((out2.users == 1) & (out2.items == 3))


def test_negative_sampling_requires_implicit(toy_ds):
    with pytest.raises(ConfigError):
        negative_sample(toy_ds)


def test_negative_sampling_full_user_warns():
    ds = RatingDataset(1, 2, [0, 0], [0, 1], [1, 1], "implicit")
    with pytest.warns(UserWarning):
        out = negative_sample(ds, 1)
    assert len(out) == 2


def test_synth_low_rank_is_exact_rank():
    ds, truth = synth_low_rank(30, 20, 5, 0.4, seed=2)
    R = truth.ratings()
    assert np.linalg.matrix_rank(R) <= 5
    assert R.min() >= 1 - 1e-12 and R.max() <= 5 + 1e-12
    np.testing.assert_allclose(ds.values, R[ds.users, ds.items], atol=1e-12)


@needs_ml100k
def test_ml100k_shape_and_u1_partition():
    ds = load_movielens(ML100K)
    assert (ds.num_users, ds.num_items, len(ds)) == (943, 1682, 100000)
    sp = holdout_split(ds, 0.2, 0, method="head")
    part = partition_users(ds, sp, Threshold(30, inclusive=True))
    assert (len(part.key_users), len(part.query_users)) == (671, 272)
