"""Glue between a TrainConfig and the training / evaluation functions."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .data import (
    RandomFraction, RatingDataset, SplitIndices, Threshold, UserPartition, holdout_split,
    load_movielens, partition_users,
)
from .metrics import MetricsReport, evaluate
from .mf import MfParams, pretrain
from .relation import RelationParams, adapt

logger = logging.getLogger(__name__)


@dataclass
class Prepared:
    data: RatingDataset
    split: SplitIndices
    partition: UserPartition
    train: RatingDataset
    validation: RatingDataset
    test: RatingDataset
    histories: RatingDataset


def strategy_of(cfg: TrainConfig):
    if cfg.split.partition == "threshold":
        return Threshold(cfg.split.delta, cfg.split.inclusive)
    return RandomFraction(cfg.split.gamma, cfg.seeds.split)


def prepare(cfg: TrainConfig, data: RatingDataset | None = None) -> Prepared:
    ds = data if data is not None else load_movielens(cfg.data.path, cfg.data.format, cfg.data.feedback)
    sp = holdout_split(ds, cfg.split.test_fraction, cfg.seeds.split, cfg.split.method)
    part = partition_users(ds, sp, strategy_of(cfg))
    return Prepared(ds, sp, part, ds.subset(sp.train), ds.subset(sp.validation),
                    ds.subset(sp.test), ds.subset(sp.fit()))


def run_pretrain(cfg: TrainConfig, prep: Prepared) -> MfParams:
    users = prep.partition.key_users if cfg.pretrain.users == "key" else np.unique(prep.train.users)
    return pretrain(prep.train, cfg.model, cfg.pretrain, prep.validation, users=users,
                    init_seed=cfg.seeds.init, shuffle_seed=cfg.seeds.shuffle)


def run_adapt(cfg: TrainConfig, prep: Prepared, mf: MfParams) -> RelationParams:
    return adapt(cfg.adapt.mode, mf, prep.train, prep.partition, cfg.adapt, prep.validation,
                 init_seed=cfg.seeds.init, shuffle_seed=cfg.seeds.shuffle)


def run_eval(cfg: TrainConfig, prep: Prepared, mf: MfParams,
             rel: RelationParams | None = None, cohorts=None) -> list[MetricsReport]:
    return [
        evaluate(mf, rel, prep.test, prep.partition, c, prep.histories, cfg.eval.ndcg_k,
                 cfg.eval.negative_ratio, cfg.seeds.split, cfg.adapt.fallback_size)
        for c in (cohorts or cfg.eval.cohorts)
    ]
