"""Compare the compiled and pure-Python kernels.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from hoiprompt import _kernels


def _boxes(rng, n, size=100.0):
    xy = rng.uniform(0, size * 0.8, (n, 2))
    wh = rng.uniform(size * 0.05, size * 0.3, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def cases(rng):
    for n_gt, n_q in [(4, 16), (16, 64), (64, 100)]:
        cost = rng.random((n_gt, n_q))
        yield f"assignment {n_gt}x{n_q}", "solve_assignment", (cost,)
    for n_det, n_gt, n_img in [(200, 50, 10), (2000, 400, 50)]:
        det_img = np.sort(rng.integers(0, n_img, n_det))
        gt_img = rng.integers(0, n_img, n_gt)
        args = (_boxes(rng, n_det), _boxes(rng, n_det), det_img, _boxes(rng, n_gt), _boxes(rng, n_gt), gt_img,
                np.zeros(n_gt, dtype=np.uint8), _kernels.MODE_DEFAULT, 0.5)
        yield f"greedy match {n_det} dets / {n_gt} gts", "greedy_match", args


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    names = sorted(_kernels.BACKENDS)
    print(f"{'case':36s}" + "".join(f"{n:>14s}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, fn, fargs in cases(rng):
        times = {}
        for name in names:
            f = getattr(_kernels.BACKENDS[name], fn)
            number = 3
            times[name] = min(timeit.repeat(lambda: f(*fargs), number=number, repeat=args.repeat)) / number
        row = f"{label:36s}" + "".join(f"{times[n] * 1e3:11.3f} ms" for n in names)
        if "compiled" in times:
            row += f"   {times['python'] / times['compiled']:7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
