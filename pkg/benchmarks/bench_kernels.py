"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --n 100000 --repeat 5
"""

import argparse
import timeit

import numpy as np

from idconfusion import _pykernels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000, help="scores per class")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    try:
        from idconfusion import _kernels
    except ImportError:
        _kernels = None
        print("compiled extension not built; timing the fallback only")

    rng = np.random.default_rng(args.seed)
    real = np.round(rng.normal(1.0, 1.0, args.n), 3)
    fake = np.round(rng.normal(0.0, 1.0, args.n), 3)
    grad = rng.random((64, 64))
    cases = {
        "rank_auc": lambda mod: mod.rank_auc(real, fake),
        "eer_scan": lambda mod: mod.eer_scan(real, fake),
        "select_blocks": lambda mod: mod.select_blocks(grad, 10, 8, 16),
    }
    print(f"{'kernel':<14}{'python (s)':>12}{'cython (s)':>12}{'speedup':>10}")
    for name, call in cases.items():
        py = min(timeit.repeat(lambda: call(_pykernels), number=1, repeat=args.repeat))
        if _kernels is None:
            print(f"{name:<14}{py:>12.4f}{'-':>12}{'-':>10}")
            continue
        cy = min(timeit.repeat(lambda: call(_kernels), number=1, repeat=args.repeat))
        print(f"{name:<14}{py:>12.4f}{cy:>12.4f}{py / cy:>9.1f}x")


if __name__ == "__main__":
    main()
