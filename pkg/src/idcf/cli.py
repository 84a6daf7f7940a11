"""Command-line driver.

Every subcommand reads the same TOML config and recomputes the split from
it, so ``split`` only writes files for inspection. Exit codes: 2 bad
config, 3 checkpoint mismatch, 4 cold start, 1 any other failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import atomic_write, load_mf, load_relation, save_mf, save_relation
from .config import TrainConfig, config_from_dict, load_config
from .data import synth_low_rank
from .errors import CheckpointError, ColdStartError, ConfigError, IdcfError
from .metrics import format_reports
from .pipeline import prepare, run_adapt, run_eval, run_pretrain
from .relation import export_attention, infer_user

logger = logging.getLogger("idcf")

EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_COLD_START = 2, 3, 4
GRADCHECK_TOL = 1e-4


def _config(args, require_data=True) -> TrainConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = config_from_dict({}, require_data=require_data)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "ndcg_k", None) is not None:
        cfg = cfg.replace(eval=dataclasses.replace(cfg.eval, ndcg_k=args.ndcg_k))
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _lines(values) -> str:
    return "".join(f"{v}\n" for v in values)


def _meta(cfg: TrainConfig) -> dict:
    return {"config": cfg.to_dict(), "config_hash": cfg.pretrain_hash(),
            "seeds": dataclasses.asdict(cfg.seeds)}


def _load_mf_checked(cfg: TrainConfig, path):
    mf, meta = load_mf(path)
    if meta.get("config_hash") != cfg.pretrain_hash():
        raise CheckpointError(f"{path} was pretrained under a different config")
    if mf.backbone != cfg.model.backbone:
        raise CheckpointError(f"{path} has backbone {mf.backbone!r}, config says {cfg.model.backbone!r}")
    return mf


def cmd_split(args):
    cfg = _config(args)
    prep = prepare(cfg)
    out = _out(args)
    part = prep.partition
    atomic_write(out / "partition.txt",
                 "# key\n" + _lines(part.key_users) + "# query\n" + _lines(part.query_users))
    for name in ("train", "validation", "test"):
        atomic_write(out / f"{name}.idx", _lines(getattr(prep.split, name)))
    print(f"key users: {len(part.key_users)}  query users: {len(part.query_users)}")
    print(f"train {len(prep.split.train)}  validation {len(prep.split.validation)}  test {len(prep.split.test)}")
    return 0


def cmd_pretrain(args):
    cfg = _config(args)
    prep = prepare(cfg)
    mf = run_pretrain(cfg, prep)
    meta = _meta(cfg)
    meta["item_ids"] = prep.data.item_ids.tolist()
    save_mf(_out(args) / "mf.ckpt", mf, meta)
    last = mf.history[-1] if mf.history else {}
    print(f"pretrained {len(mf.user_index)} users over {len(mf.history) - 1} epochs; "
          f"last val loss {last.get('val_loss', float('nan')):.4f}")
    return 0


def cmd_adapt(args):
    cfg = _config(args)
    out = _out(args)
    mf = _load_mf_checked(cfg, args.mf or out / "mf.ckpt")
    prep = prepare(cfg)
    rel = run_adapt(cfg, prep, mf)
    save_relation(out / "rel.ckpt", rel, _meta(cfg))
    print(f"adapted ({cfg.adapt.mode}) over {len(rel.history) - 1} epochs")
    return 0


def _load_pair(cfg, args, out, need_rel):
    mf = _load_mf_checked(cfg, args.mf or out / "mf.ckpt")
    rel_path = Path(args.rel) if args.rel else out / "rel.ckpt"
    rel = None
    if rel_path.exists() or need_rel:
        rel, _ = load_relation(rel_path, mf)
    return mf, rel


def cmd_eval(args):
    cfg = _config(args)
    out = _out(args)
    mf, rel = _load_pair(cfg, args, out, need_rel="new" in cfg.eval.cohorts)
    prep = prepare(cfg)
    text = format_reports(run_eval(cfg, prep, mf, rel))
    atomic_write(out / "metrics.csv", text)
    sys.stdout.write(text)
    return 0


def _parse_history(text, item_ids):
    """``"i1,i2"`` or ``"i1:r1,i2:r2"`` with raw item ids -> (indices, ratings or None)."""
    lookup = {str(v): k for k, v in enumerate(item_ids)}
    items, ratings = [], []
    for tok in filter(None, (t.strip() for t in (text or "").split(","))):
        raw, _, r = tok.partition(":")
        if raw not in lookup:
            raise ConfigError(f"--history: unknown item id {raw!r}")
        items.append(lookup[raw])
        ratings.append(float(r) if r else None)
    if any(r is None for r in ratings) or not ratings:
        return items, None
    return items, ratings


def cmd_infer(args):
    cfg = _config(args)
    out = _out(args)
    mf, rel = _load_pair(cfg, args, out, need_rel=True)
    _, meta = load_mf(args.mf or out / "mf.ckpt")
    item_ids = meta.get("item_ids") or list(range(mf.num_items))
    items, ratings = _parse_history(args.history, item_ids)
    res = infer_user(items, mf, rel, ratings, seed=cfg.seeds.init, fallback_size=cfg.adapt.fallback_size)
    top = res.top_k(args.k)
    rows = [f"{r + 1},{item_ids[i]},{float(res.scores[i])!r}" for r, i in enumerate(top.tolist())]
    text = "rank,item_id,score\n" + _lines(rows)
    atomic_write(out / "ranked.csv", text)
    sys.stdout.write(text)
    return 0


def cmd_synth(args):
    cfg = _config(args, require_data=False)
    s = cfg.synth
    ds, truth = synth_low_rank(s.users, s.items, s.rank, s.density, s.noise_sd, cfg.seeds.split)
    out = _out(args)
    rows = [f"{u},{i},{v!r}" for u, i, v in zip(ds.users.tolist(), ds.items.tolist(), ds.values.tolist())]
    atomic_write(out / "synth.csv", "user_id,item_id,rating\n" + _lines(rows))
    atomic_write(out / "true_factors.json", json.dumps({
        "P": truth.P.tolist(), "Q": truth.Q.tolist(), "scale": truth.scale, "offset": truth.offset,
    }) + "\n")
    print(f"wrote {len(ds)} ratings for {s.users} users x {s.items} items")
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run_all(probes=args.probes, seed=args.seed or 0)
    worst = 0.0
    for name, err in results.items():
        flag = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"{name:40s} {err:.3e} {flag}")
        worst = max(worst, err)
    return 0 if worst < GRADCHECK_TOL else 1


def cmd_dump_attention(args):
    cfg = _config(args)
    out = _out(args)
    mf, rel = _load_pair(cfg, args, out, need_rel=True)
    prep = prepare(cfg)
    users = prep.partition.query_users if not args.users else np.asarray(
        [int(u) for u in args.users.split(",")], dtype=np.int64)
    rows = export_attention(rel, mf, prep.histories, users, cfg.seeds.init, cfg.adapt.fallback_size)
    text = "query_user,head,key_user,weight\n" + _lines(f"{u},{h},{k},{float(w)!r}" for u, h, k, w in rows)
    atomic_write(out / "attention.csv", text)
    print(f"wrote {len(rows)} attention rows")
    return 0


COMMANDS = {
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
    "dump-attention": cmd_dump_attention,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idcf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int, help="override split/init/shuffle seeds")
        sp.add_argument("--out", default="runs", help="output directory")
        if name in ("adapt", "eval", "infer", "dump-attention"):
            sp.add_argument("--mf", help="factor checkpoint (default OUT/mf.ckpt)")
        if name in ("eval", "infer", "dump-attention"):
            sp.add_argument("--rel", help="relation checkpoint (default OUT/rel.ckpt)")
        if name == "eval":
            sp.add_argument("--ndcg-k", type=int, help="NDCG cutoff (0 = full list)")
        if name == "infer":
            sp.add_argument("--history", default="", help='rated item ids, "i1,i2" or "i1:5,i2:3"')
            sp.add_argument("--k", type=int, default=10)
        if name == "gradcheck":
            sp.add_argument("--probes", type=int, default=64)
        if name == "dump-attention":
            sp.add_argument("--users", help="comma-separated user indices (default: query users)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ColdStartError as exc:
        print(f"cold start: {exc}", file=sys.stderr)
        return EXIT_COLD_START
    except IdcfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
