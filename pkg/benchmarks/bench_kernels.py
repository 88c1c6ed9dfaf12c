"""Time the numba kernels against their numpy twins on representative sizes.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json PATH]

Each kernel is run once untimed on both backends (JIT warm-up and a parity
check), then timed as the best of ``--repeat`` runs.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from tubeletkit import kernels
from tubeletkit._accel import HAVE_NUMBA


def _boxes(rng, n):
    xy = rng.uniform(0, 480, size=(n, 2))
    wh = rng.uniform(20, 80, size=(n, 2))
    return np.ascontiguousarray(np.hstack([xy, wh]))


def cases(rng):
    a, b = _boxes(rng, 400), _boxes(rng, 300)
    x = rng.normal(size=(512, 160))
    w = rng.normal(size=(160, 16))
    bias = rng.normal(size=16)
    keys = rng.integers(0, 2**62, size=(4000, 7), dtype=np.int64).view(np.uint64)
    q = rng.uniform(0, 480, size=(2000, 2))
    pts = rng.uniform(0, 480, size=(6, 2))
    valid = np.ones(6, dtype=np.bool_)
    det_frame = rng.integers(0, 50, size=3000).astype(np.int64)
    gt_frame = rng.integers(0, 50, size=200).astype(np.int64)
    det_b, gt_b = _boxes(rng, 3000), _boxes(rng, 200)
    return {
        "iou_matrix": (a, b),
        "affine_rows": (x, w, bias),
        "hash_normal": (keys, 32),
        "nearest_within": (q, pts, valid, 90.0),
        "greedy_match": (det_frame, det_b, gt_frame, gt_b, 0.5),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write results to this file")
    args = p.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
        return 1
    rng = np.random.default_rng(0)
    results = {}
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, arg in cases(rng).items():
        fn_np = kernels.NUMPY_KERNELS[name]
        fn_nb = kernels.NUMBA_KERNELS[name]
        ref, got = fn_np(*arg), fn_nb(*arg)
        diff = float(np.max(np.abs(np.asarray(ref, dtype=np.float64) - np.asarray(got, dtype=np.float64))))
        t_np = min(timeit.repeat(lambda: fn_np(*arg), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fn_nb(*arg), number=1, repeat=args.repeat))
        results[name] = {"numpy_s": t_np, "numba_s": t_nb, "max_abs_diff": diff}
        print(f"{name:<16}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.1f}{diff:>14.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
