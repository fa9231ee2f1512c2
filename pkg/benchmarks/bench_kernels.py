"""Numba versus pure-numpy timings for the hot kernels.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--n 1152] [--d 64] [--out kernels.csv]
    python benchmarks/bench_kernels.py --decode   # also time a toy decode under each backend

Both kernel modules are imported directly, so one process compares them; the
``--decode`` rows rerun the decoder in a subprocess with ``D3TOM_NUMBA`` set
to 0 and 1, since the backend is fixed at import time.
"""

from __future__ import annotations

import argparse
import csv
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from d3tom.kernels import _jit, _np


def timeit(fn, repeat: int) -> float:
    fn()  # warm up (and compile, for numba)
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times) * 1e3


def kernel_cases(n: int, d: int, rng: np.random.Generator):
    x = rng.standard_normal((n, n)).astype(np.float32)
    q = rng.standard_normal((n, d)).astype(np.float32)
    k = rng.standard_normal((n, d)).astype(np.float32)
    v = rng.standard_normal((n, d)).astype(np.float32)
    a = rng.standard_normal((n // 4, d)).astype(np.float32)
    b = rng.standard_normal((d, d)).astype(np.float32)
    order = np.arange(-(-n // 64), dtype=np.int64)
    qd = q[:8]
    rows = rng.standard_normal((1024, 256)).astype(np.float32)
    perm = rng.permutation(1024)
    kept, merged = np.sort(perm[:103]), np.sort(perm[103:])
    target = _np.cosine_targets(rows, kept, merged)
    scale = 1.0 / np.sqrt(d)
    return {
        "softmax_rows": lambda m: m.softmax_rows(x, scale),
        "stream_attention": lambda m: m.stream_attention(q, k, v, 64, scale, order),
        "stream_decider_scores": lambda m: m.stream_decider_scores(qd, k, 0, n // 2, 64, scale, order),
        "cosine_targets": lambda m: m.cosine_targets(rows, kept, merged),
        "scatter_add_rows": lambda m: m.scatter_add_rows(rows, merged, target),
        "matmul_ordered": lambda m: m.matmul_ordered(a, b),
        "splitmix64": lambda m: m.splitmix64(42, 1 << 20),
    }


def decode_time(numba_flag: str, repeat: int) -> float:
    code = (
        "import time,statistics;from d3tom.toymodel import ModelConfig,init_weights;"
        "from d3tom.diffusion import run_decode;"
        "c=ModelConfig(n_visual=256,n_prompt=32,n_output=32,n_steps=8);w=init_weights(c);"
        "run_decode(c,w,'d3tom_constant',alpha=0.9);t=[]\n"
        f"for _ in range({repeat}):\n"
        " s=time.perf_counter();run_decode(c,w,'d3tom_constant',alpha=0.9);t.append(time.perf_counter()-s)\n"
        "print(statistics.median(t)*1e3)"
    )
    env = dict(os.environ, D3TOM_NUMBA=numba_flag)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=1152)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--decode", action="store_true")
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    rows = []
    for name, call in kernel_cases(args.n, args.d, np.random.default_rng(args.seed)).items():
        t_np = timeit(lambda: call(_np), args.repeat)
        t_nb = timeit(lambda: call(_jit), args.repeat)
        rows.append([name, f"{t_np:.4g}", f"{t_nb:.4g}", f"{t_np / t_nb:.3g}"])
    if args.decode:
        t_np, t_nb = decode_time("0", args.repeat), decode_time("1", args.repeat)
        rows.append(["decode_toy_small", f"{t_np:.4g}", f"{t_nb:.4g}", f"{t_np / t_nb:.3g}"])

    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["kernel", "numpy_ms", "numba_ms", "speedup"])
    writer.writerows(rows)
    if args.out:
        fh.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
