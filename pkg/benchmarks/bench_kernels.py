"""Time the compiled kernels against the numpy fallback.

Reports per-kernel timings on shapes typical of ML-100K training, one
pretraining epoch end to end, and checks the two backends agree bit for bit.
Run: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from idcf import kernels
from idcf.config import ModelConfig, PretrainConfig
from idcf.data import holdout_split, synth_low_rank


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def kernel_cases(rng):
    a = rng.normal(size=(256, 48))
    b = rng.normal(size=(48, 32))
    x = rng.normal(size=(1682, 16))
    lens = rng.integers(0, 60, size=256)
    ptr = np.concatenate([[0], np.cumsum(lens)])
    idx = rng.integers(0, 1682, size=ptr[-1])
    rows = rng.normal(size=(256, 16))
    tgt_idx = rng.integers(0, 1682, size=256)
    val = rng.normal(size=(1682, 16))
    grad = rng.normal(size=(1682, 16))

    def adam():
        v, m, s = val.copy(), np.zeros_like(val), np.zeros_like(val)
        kernels.adam_update(v, grad, m, s, 1e-3, 0.9, 0.999, 1, 1e-8)
        return v

    def scatter():
        t = np.zeros((1682, 16))
        kernels.scatter_add_rows(t, tgt_idx, rows)
        return t

    return {
        "matmul 256x48 @ 48x32": lambda: kernels.matmul(a, b),
        "rowdot 256x48": lambda: kernels.rowdot(a, a),
        "segment_sum 256 segs": lambda: kernels.segment_sum(ptr, idx, x),
        "scatter_add_rows 256": scatter,
        "adam_update 1682x16": adam,
    }


def epoch_case():
    from idcf.mf import pretrain

    ds, _ = synth_low_rank(943, 1682, 16, 0.06, 0.1, seed=0)
    sp = holdout_split(ds, 0.1, 0)
    tr = ds.subset(sp.train)

    def run():
        mf = pretrain(tr, ModelConfig("nn", 16, 32), PretrainConfig("all", 1e-3, 256, 0.0, 0.0, 1, 5),
                      None)
        return mf.P.value

    return f"pretrain epoch nn ({len(tr)} ratings)", run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    try:
        kernels.backend_module("cython")
    except ImportError:
        print("compiled extension not built; only the fallback is available")
        return
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    name, fn = epoch_case()
    cases[name] = fn
    print(f"{'case':36s} {'python':>11s} {'cython':>11s} {'speedup':>8s}  identical")
    for label, fn in cases.items():
        rep = 1 if label.startswith("pretrain") else args.repeat
        res = {}
        for backend in ("python", "cython"):
            prev = kernels.set_backend(backend)
            res[backend] = _time(fn, rep)
            kernels.set_backend(prev)
        tp, op = res["python"]
        tc, oc = res["cython"]
        same = np.array_equal(op, oc)
        print(f"{label:36s} {tp * 1e3:9.3f}ms {tc * 1e3:9.3f}ms {tp / tc:7.1f}x  {same}")


if __name__ == "__main__":
    main()
