"""Compare the compiled and numpy box kernels on timing and output agreement.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from incdet import kernels


def random_boxes(rng, n, span=500.0):
    xy = rng.uniform(0, span, (n, 2))
    return np.concatenate([xy, xy + rng.uniform(4, 80, (n, 2))], 1)


def cases(rng):
    a, b = random_boxes(rng, 2000), random_boxes(rng, 500)
    nb = random_boxes(rng, 6000)
    ns = rng.random(6000)
    ious = kernels.box_iou_matrix(random_boxes(rng, 3000, 200), random_boxes(rng, 200, 200))
    return {
        "iou 2000x500": lambda: kernels.box_iou_matrix(a, b),
        "nms 6000 @0.7": lambda: kernels.nms(nb, ns, 0.7),
        "match 3000x200": lambda: kernels.greedy_match(ious, 0.5),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        kernels.use_backend("cython")
        backends = ["cython", "python"]
    except ImportError:
        print("compiled extension not built; timing the numpy path only")
        backends = ["python"]
    rng = np.random.default_rng(0)
    fns = cases(rng)
    times, outputs = {}, {}
    for be in backends:
        kernels.use_backend(be)
        for name, fn in fns.items():
            outputs[be, name] = fn()
            times[be, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'kernel':<18}" + "".join(f"{be + ' ms':>12}" for be in backends)
          + ("   speedup  identical" if len(backends) == 2 else ""))
    for name in fns:
        row = f"{name:<18}" + "".join(f"{1e3 * times[be, name]:>12.2f}" for be in backends)
        if len(backends) == 2:
            a, b = outputs["cython", name], outputs["python", name]
            same = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) \
                else np.array_equal(a, b)
            row += f"{times['python', name] / times['cython', name]:>10.1f}x  {same}"
        print(row)


if __name__ == "__main__":
    main()
