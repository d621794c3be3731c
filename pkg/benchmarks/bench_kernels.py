"""Compare the compiled and pure-Python mask kernels.

    python3 benchmarks/bench_kernels.py [--size 256] [--repeat 5]
"""
import argparse
import timeit

import numpy as np
from scipy import ndimage

from changen import _kernels_py

try:
    from changen import _kernels
except ImportError:
    _kernels = None


def random_mask(size, seed=0, density=0.45):
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.random((size, size)), 2)
    return (noise > np.quantile(noise, 1 - density)).astype(np.int64)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    mask = random_mask(args.size)
    fp = np.ones((24, 24), dtype=bool)
    occupied = mask.astype(bool)
    backends = {"python": _kernels_py}
    if _kernels is not None:
        backends["cython"] = _kernels
    else:
        print("compiled extension not built; timing pure-Python only")

    results = {}
    for name, mod in backends.items():
        lab = min(timeit.repeat(lambda: mod.label_components(mask, 8), number=1, repeat=args.repeat))
        ovl = min(timeit.repeat(lambda: mod.footprint_overlaps(occupied, fp, 10, 10), number=200,
                                repeat=args.repeat)) / 200
        results[name] = (lab, ovl)
        print(f"{name:8s} label_components {lab * 1e3:9.3f} ms   footprint_overlaps {ovl * 1e6:9.2f} us")
    ref = min(timeit.repeat(lambda: ndimage.label(mask, np.ones((3, 3))), number=1, repeat=args.repeat))
    print(f"{'scipy':8s} label_components {ref * 1e3:9.3f} ms   (reference)")
    if "cython" in results:
        (lp, op), (lc, oc) = results["python"], results["cython"]
        print(f"speedup  label_components x{lp / lc:.1f}   footprint_overlaps x{op / oc:.1f}")
    n_py = _kernels_py.label_components(mask, 8)[1]
    n_ref = ndimage.label(mask, np.ones((3, 3)))[1]
    assert n_py == n_ref, (n_py, n_ref)


if __name__ == "__main__":
    main()
