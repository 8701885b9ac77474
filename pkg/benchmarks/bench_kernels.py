"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeats 5]

Each kernel is warmed up once (JIT compile) and then timed as the best of
``--repeats`` runs over a fixed batch of random inputs.  Results are also
checked for agreement.
"""

import argparse
import time

import numpy as np

from oah import _kernels as KN


def _lattice(rng, U, V):
    x = rng.normal(size=(U, V)) * 2.0
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def _cases(rng):
    ctc = []
    for _ in range(50):
        U = int(rng.integers(40, 120))
        lat = _lattice(rng, U, 30)
        ctc.append((lat, rng.integers(3, 30, size=int(rng.integers(5, 15)))))
    prefix = []
    for lat, _ in ctc:
        r = np.full((lat.shape[0], 2), -np.inf)
        r[:, 1] = np.cumsum(lat[:, 2])
        prefix.append((lat, r, np.arange(3, 30)))
    edit = [(rng.integers(3, 30, size=int(rng.integers(5, 40))), rng.integers(3, 30, size=int(rng.integers(5, 40))))
            for _ in range(500)]
    return ctc, prefix, edit


def _runners(ctc, prefix, edit):
    return {
        "ctc_forward_backward": lambda nb: [KN.ctc_forward_backward(l, y, 2, use_numba=nb)[0] for l, y in ctc],
        "ctc_prefix_extend": lambda nb: [KN.ctc_prefix_extend(l, r, -1, c, 2, False, use_numba=nb)[0]
                                         for l, r, c in prefix],
        "edit_distance": lambda nb: [KN.edit_distance(a, b, use_numba=nb) for a, b in edit],
    }


def _best(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not KN.HAVE_NUMBA:
        print("numba is not importable; only the numpy path can run")
        return 1
    runners = _runners(*_cases(np.random.default_rng(args.seed)))
    print(f"{'kernel':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  agree")
    for name, run in runners.items():
        ref, fast = run(False), run(True)  # the second call also compiles
        agree = all(np.allclose(a, b, rtol=1e-9, atol=0, equal_nan=True) for a, b in zip(ref, fast))
        t_np = _best(lambda: run(False), args.repeats)
        t_nb = _best(lambda: run(True), args.repeats)
        print(f"{name:<22} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} {t_np / t_nb:>7.1f}x  {agree}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
