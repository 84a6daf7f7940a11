"""Inductive collaborative filtering: matrix factorization on key users plus an
attention relation model that embeds unseen users from their rated items."""

from .data import RatingDataset, load_movielens, holdout_split, partition_users
from .mf import MfParams, pretrain, predict
from .relation import RelationParams, adapt, infer_user
from .metrics import MetricsReport, evaluate, rmse, ndcg, auc

__version__ = "0.1.0"
