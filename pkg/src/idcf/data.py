"""Rating data: loading, splits, key/query partitions, negative sampling, synthetic data."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigError, DataValidationError, ParseError

logger = logging.getLogger(__name__)

Feedback = Literal["explicit", "implicit"]
VALIDATION_FRACTION = 0.05


@dataclass(frozen=True, eq=False)
class RatingDataset:
    """Sparse (user, item, value) observations over dense 0-based indices.

    ``user_ids``/``item_ids`` map dense indices back to the raw ids in the
    source file. Triples keep file order.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    feedback: Feedback = "explicit"
    timestamps: np.ndarray | None = None
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "users", np.asarray(self.users, dtype=np.int64))
        object.__setattr__(self, "items", np.asarray(self.items, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.timestamps is not None:
            object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=np.int64))
        n = len(self.users)
        if len(self.items) != n or len(self.values) != n:
            raise DataValidationError("users, items and values must have equal length")
        if n and (self.users.min() < 0 or self.users.max() >= self.num_users):
            raise DataValidationError("user index out of range")
        if n and (self.items.min() < 0 or self.items.max() >= self.num_items):
            raise DataValidationError("item index out of range")
        if self.feedback == "explicit":
            if n and (self.values.min() < 1 or self.values.max() > 5):
                raise DataValidationError("explicit ratings must lie in [1, 5]")
        elif self.feedback == "implicit":
            if n and not np.all((self.values == 0) | (self.values == 1)):
                raise DataValidationError("implicit values must be 0 or 1")
        else:
            raise ConfigError(f"unknown feedback kind {self.feedback!r}")

    def __len__(self):
        return len(self.users)

    def subset(self, indices) -> "RatingDataset":
        """Triples at ``indices``, keeping the full user/item index space."""
        idx = np.asarray(indices, dtype=np.int64)
        return RatingDataset(
            self.num_users, self.num_items, self.users[idx], self.items[idx], self.values[idx],
            self.feedback, None if self.timestamps is None else self.timestamps[idx],
            self.user_ids, self.item_ids,
        )

    def restrict_users(self, users) -> "RatingDataset":
        mask = np.isin(self.users, np.asarray(users, dtype=np.int64))
        return self.subset(np.flatnonzero(mask))

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.num_users)

    def has_duplicates(self) -> bool:
        key = self.users * max(self.num_items, 1) + self.items
        return len(np.unique(key)) != len(key)

    def equals(self, other: "RatingDataset") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.array_equal(a, b))

        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and self.feedback == other.feedback
            and all(same(getattr(self, f), getattr(other, f))
                    for f in ("users", "items", "values", "timestamps", "user_ids", "item_ids"))
        )


# ---------------------------------------------------------------- loading

def _dense_ids(raw: Sequence):
    """Sorted unique raw ids (numeric order when every id is an integer) and dense codes."""
    try:
        arr = np.asarray([int(x) for x in raw], dtype=np.int64)
    except ValueError:
        arr = np.asarray(raw, dtype=object).astype(str)
    uniq, codes = np.unique(arr, return_inverse=True)
    return uniq, codes.astype(np.int64)


def _parse_udata(path: Path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", lineno)
            try:
                rows.append((parts[0], parts[1], float(parts[2]), int(parts[3]), lineno))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    return rows


def _parse_csv(path: Path):
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        header = [h.strip() for h in header]
        if header[:3] != ["user_id", "item_id", "rating"] or len(header) > 4 or (
            len(header) == 4 and header[3] != "timestamp"
        ):
            raise ParseError("header must be user_id,item_id,rating[,timestamp]", 1)
        has_ts = len(header) == 4
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", lineno)
            try:
                ts = int(rec[3]) if has_ts and rec[3].strip() else None
                rows.append((rec[0].strip(), rec[1].strip(), float(rec[2]), ts, lineno))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    return rows


def load_movielens(path, format: str = "ml100k_udata", feedback: Feedback = "explicit") -> RatingDataset:
    """Load ratings and remap raw ids to dense 0-based indices.

    A repeated (user, item) pair keeps the record with the latest
    timestamp (the later line on ties) at that record's file position.
    """
    path = Path(path)
    if format == "ml100k_udata":
        rows = _parse_udata(path)
    elif format == "generic_csv":
        rows = _parse_csv(path)
    else:
        raise ConfigError(f"unknown dataset format {format!r}")

    for u, i, r, ts, lineno in rows:
        if feedback == "explicit" and not 1 <= r <= 5:
            raise DataValidationError(f"line {lineno}: rating {r:g} outside [1, 5]")
        if feedback == "implicit" and r not in (0.0, 1.0):
            raise DataValidationError(f"line {lineno}: implicit value {r:g} not in {{0, 1}}")

    if not rows:
        empty = np.zeros(0, dtype=np.int64)
        return RatingDataset(0, 0, empty, empty, np.zeros(0), feedback, empty,
                             np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    user_ids, ucode = _dense_ids([r[0] for r in rows])
    item_ids, icode = _dense_ids([r[1] for r in rows])
    has_ts = all(r[3] is not None for r in rows)

    keep: dict[tuple[int, int], int] = {}
    for pos, (row, u, i) in enumerate(zip(rows, ucode, icode)):
        k = (int(u), int(i))
        prev = keep.get(k)
        if prev is None or not has_ts or row[3] >= rows[prev][3]:
            keep[k] = pos
    order = np.sort(np.fromiter(keep.values(), dtype=np.int64, count=len(keep)))
    if len(order) < len(rows):
        logger.info("dropped %d duplicate ratings", len(rows) - len(order))

    values = np.asarray([rows[p][2] for p in order], dtype=np.float64)
    ts = np.asarray([rows[p][3] for p in order], dtype=np.int64) if has_ts else None
    return RatingDataset(
        len(user_ids), len(item_ids), ucode[order], icode[order], values, feedback, ts,
        user_ids, item_ids,
    )


# ---------------------------------------------------------------- splits

@dataclass(frozen=True, eq=False)
class SplitIndices:
    """Indices into a dataset's triples. Each array is sorted."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def fit(self) -> np.ndarray:
        """Every non-test index (the training ratings before the validation holdout)."""
        return np.sort(np.concatenate([self.train, self.validation]))

    def equals(self, other: "SplitIndices") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("train", "validation", "test"))


def holdout_split(ds: RatingDataset, test_fraction: float, seed: int,
                  method: Literal["random", "head"] = "random") -> SplitIndices:
    """Train/validation/test split.

    ``random`` draws the test set uniformly over all triples; ``head``
    takes the first ``test_fraction`` of triples in file order (the
    convention behind the stock ML-100K ``u1.base``/``u1.test`` files).
    Either way 5% of the remaining ratings become the validation set.
    """
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(ds)
    n_test = int(round(test_fraction * n))
    rng = np.random.default_rng(seed)
    if method == "random":
        perm = rng.permutation(n)
        test, rest = perm[:n_test], perm[n_test:]
    elif method == "head":
        test = np.arange(n_test)
        rest = rng.permutation(np.arange(n_test, n))
    else:
        raise ConfigError(f"unknown split method {method!r}")
    n_val = int(round(VALIDATION_FRACTION * len(rest)))
    return SplitIndices(np.sort(rest[n_val:]), np.sort(rest[:n_val]), np.sort(test))


# ---------------------------------------------------------------- partitions

@dataclass(frozen=True)
class Threshold:
    """Key users have more than ``delta`` training ratings (at least ``delta`` when inclusive)."""

    delta: int
    inclusive: bool = False

    def __post_init__(self):
        if self.delta < 0:
            raise ConfigError("delta must be >= 0")


@dataclass(frozen=True)
class RandomFraction:
    gamma: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class UserPartition:
    key_users: np.ndarray
    query_users: np.ndarray
    strategy: Threshold | RandomFraction = field(default=None)  # type: ignore[assignment]

    def equals(self, other: "UserPartition") -> bool:
        return (np.array_equal(self.key_users, other.key_users)
                and np.array_equal(self.query_users, other.query_users))


def partition_users(ds: RatingDataset, split: SplitIndices, strategy) -> UserPartition:
    """Split users into key and query sets by training-rating count or at random.

    Training ratings are all non-test ratings (train plus validation).
    """
    m = ds.num_users
    if isinstance(strategy, Threshold):
        counts = np.bincount(ds.users[split.fit()], minlength=m)
        is_key = counts >= strategy.delta if strategy.inclusive else counts > strategy.delta
        key = np.flatnonzero(is_key)
        query = np.flatnonzero(~is_key)
    elif isinstance(strategy, RandomFraction):
        k = math.ceil(strategy.gamma * m)
        if k <= 0 or k >= m:
            raise ConfigError(f"gamma={strategy.gamma} leaves an empty key or query set for {m} users")
        rng = np.random.default_rng(strategy.seed)
        key = np.sort(rng.choice(m, size=k, replace=False))
        query = np.setdiff1d(np.arange(m), key)
    else:
        raise ConfigError(f"unknown partition strategy {strategy!r}")
    return UserPartition(key.astype(np.int64), query.astype(np.int64), strategy)


# ---------------------------------------------------------------- negative sampling

def negative_sample(ds: RatingDataset, ratio: int = 5, seed: int = 0,
                    exclude: RatingDataset | None = None) -> RatingDataset:
    """Append ``ratio`` uniformly drawn non-interacted items (label 0) per positive.

    Interactions in ``exclude`` (e.g. the training set when sampling test
    negatives) also count as seen. Draws for one positive are independent,
    so a user with a single remaining item gets that item ``ratio`` times.
    """
    if ds.feedback != "implicit":
        raise ConfigError("negative sampling needs implicit feedback")
    if ratio < 0:
        raise ConfigError("ratio must be >= 0")
    if ratio == 0 or len(ds) == 0:
        return ds
    rng = np.random.default_rng(seed)
    seen = [set() for _ in range(ds.num_users)]
    for u, i in zip(ds.users.tolist(), ds.items.tolist()):
        seen[u].add(i)
    if exclude is not None:
        for u, i in zip(exclude.users.tolist(), exclude.items.tolist()):
            seen[u].add(i)
    pos_idx = np.flatnonzero(ds.values == 1)
    neg_users, neg_items = [], []
    pos_users = ds.users[pos_idx]
    for u in np.unique(pos_users).tolist():
        need = int(np.sum(pos_users == u)) * ratio
        taken = seen[u]
        if len(taken) >= ds.num_items:
            warnings.warn(f"user {u} has interacted with every item; no negatives drawn", stacklevel=2)
            continue
        got = np.empty(0, dtype=np.int64)
        while len(got) < need:
            draw = rng.integers(ds.num_items, size=2 * (need - len(got)) + 8)
            draw = draw[~np.isin(draw, np.fromiter(taken, dtype=np.int64, count=len(taken)))]
            got = np.concatenate([got, draw])
        neg_users.append(np.full(need, u, dtype=np.int64))
        neg_items.append(got[:need])
    if not neg_users:
        return ds
    nu = np.concatenate(neg_users)
    ni = np.concatenate(neg_items)
    ts = None
    if ds.timestamps is not None:
        ts = np.concatenate([ds.timestamps, np.zeros(len(nu), dtype=np.int64)])
    return RatingDataset(
        ds.num_users, ds.num_items,
        np.concatenate([ds.users, nu]), np.concatenate([ds.items, ni]),
        np.concatenate([ds.values, np.zeros(len(nu))]),
        "implicit", ts, ds.user_ids, ds.item_ids,
    )


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True, eq=False)
class TrueFactors:
    """Noiseless ratings are exactly ``P @ Q.T``; the last column carries the rescale offset."""

    P: np.ndarray
    Q: np.ndarray
    scale: float
    offset: float

    def ratings(self) -> np.ndarray:
        return self.P @ self.Q.T


def synth_low_rank(M: int, N: int, d: int, density: float, noise_sd: float = 0.0,
                   seed: int = 0) -> tuple[RatingDataset, TrueFactors]:
    """Random rank-``d`` rating matrix, observed entrywise with probability ``density``.

    Latent entries are N(0, 1)/sqrt(d). Values are affinely rescaled into
    [1, 5]; the constant offset is folded into the factors as one of the
    ``d`` dimensions so the noiseless matrix has rank at most ``d``.
    """
    if not 1 <= d <= min(M, N):
        raise ConfigError("rank must satisfy 1 <= d <= min(M, N)")
    if not 0 < density <= 1:
        raise ConfigError("density must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    inner = d - 1
    P0 = rng.standard_normal((M, inner)) / math.sqrt(d)
    Q0 = rng.standard_normal((N, inner)) / math.sqrt(d)
    clean = P0 @ Q0.T
    noisy = clean + (rng.standard_normal((M, N)) * noise_sd if noise_sd > 0 else 0.0)
    observed = rng.random((M, N)) < density
    lo, hi = float(noisy.min()), float(noisy.max())
    scale = 4.0 / (hi - lo) if hi > lo else 1.0
    offset = 1.0 - scale * lo if hi > lo else 3.0 - lo
    P = np.hstack([P0 * scale, np.full((M, 1), offset)])
    Q = np.hstack([Q0, np.ones((N, 1))])
    values = np.clip(scale * noisy + offset, 1.0, 5.0)
    users, items = np.nonzero(observed)
    ds = RatingDataset(M, N, users, items, values[users, items], "explicit", None,
                       np.arange(M), np.arange(N))
    return ds, TrueFactors(P, Q, scale, offset)
