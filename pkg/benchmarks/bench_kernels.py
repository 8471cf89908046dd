"""Compare the numba and numpy loss kernels.

    python benchmarks/bench_kernels.py [--repeat 200] [--end-to-end]

Per kernel it prints the median call time of both paths and the largest
absolute difference between their outputs. ``--end-to-end`` also times one
default CLIM training run in a subprocess per backend (the backend is fixed
at import time by ``CLIM_DISABLE_NUMBA``).
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from clim import _kernels as K

TRAIN_SNIPPET = (
    "import time; t=time.perf_counter();"
    "from clim import PRESETS, TrainConfig, synth_generate, train, BACKEND;"
    "from clim.config import DESK_LR;"
    "d=synth_generate(PRESETS['books'], PRESETS['electronics'], seed=0);"
    "train(TrainConfig(system='clim', lr=DESK_LR, seed=0), d);"
    "print(BACKEND, time.perf_counter()-t)"
)


def cases(rng):
    n = 64
    z = rng.normal(size=(n, 32))
    logits = rng.normal(size=(n, 2))
    labels = rng.integers(0, 2, size=n)
    p = rng.dirichlet([1.0, 1.0], size=n)
    thr = 0.9 * np.log(2)
    return {
        "info_nce": (K.info_nce_numpy, getattr(K, "info_nce_numba", None), (z, 0.05)),
        "xent": (K.xent_numpy, getattr(K, "xent_numba", None), (logits, labels)),
        "mi": (K.mi_numpy, getattr(K, "mi_numba", None), (p, thr, True)),
    }


def median_time(fn, args, repeat):
    fn(*args)  # warm-up, triggers JIT compilation
    times = timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)
    return float(np.median(times))


def max_diff(a, b):
    out = 0.0
    for x, y in zip(a, b):
        if isinstance(x, (bool, np.bool_)):
            continue
        out = max(out, float(np.max(np.abs(np.asarray(x) - np.asarray(y)))))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)

    print(f"selected backend: {K.BACKEND}")
    print(f"{'kernel':10s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, (np_fn, nb_fn, call) in cases(np.random.default_rng(0)).items():
        t_np = median_time(np_fn, call, args.repeat)
        if nb_fn is None:
            print(f"{name:10s} {t_np * 1e6:10.1f} {'n/a':>10s}")
            continue
        t_nb = median_time(nb_fn, call, args.repeat)
        diff = max_diff(np_fn(*call), nb_fn(*call))
        print(f"{name:10s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:8.2f} {diff:11.2e}")

    if args.end_to_end:
        for flag in ("0", "1"):
            env = {**os.environ, "CLIM_DISABLE_NUMBA": flag}
            t0 = time.perf_counter()
            r = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True)
            if r.returncode:
                print(r.stderr, file=sys.stderr)
                return 1
            backend, inner = r.stdout.split()
            print(f"train (10 epochs) backend={backend}: {float(inner):.2f}s "
                  f"(process {time.perf_counter() - t0:.2f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
