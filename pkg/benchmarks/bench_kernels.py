"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20] [--end-to-end]

Shapes match one mini-batch of the default split-MNIST network. With
--end-to-end it also times a short training run under each path (the numpy
path is selected by setting FEATREHEARSE_NO_NUMBA=1 in a child process).
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from featrehearse import _kernels as K


def bench(fn, repeat):
    fn()  # warm-up (includes jit compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases():
    rng = np.random.default_rng(0)
    x1 = rng.normal(size=(128, 8, 24, 24)).astype(np.float32)
    conv_in = rng.normal(size=(128, 8, 12, 12)).astype(np.float32)
    cols = K.im2col_np(conv_in, 5)
    _, idx = K.maxpool2_np(x1)
    dpool = rng.normal(size=(128, 8, 12, 12)).astype(np.float32)
    feats = rng.normal(size=(400, 64))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    return [
        ("im2col  (128x8x12x12, k=5)", lambda: K.im2col_np(conv_in, 5), lambda: K._im2col_nb(conv_in, 5)),
        ("col2im  (128x8x12x12, k=5)", lambda: K.col2im_np(cols, 8, 12, 12, 5), lambda: K._col2im_nb(cols, 8, 12, 12, 5)),
        ("maxpool (128x8x24x24)", lambda: K.maxpool2_np(x1), lambda: K._maxpool2_nb(x1)),
        ("pool bw (128x8x24x24)", lambda: K.maxpool2_backward_np(dpool, idx, 24, 24),
         lambda: K._maxpool2_backward_nb(dpool, idx, 24, 24)),
        ("herding (400x64, L=200)", lambda: K.herding_np(feats, 200), lambda: K._herding_nb(feats, 200)),
    ]


END_TO_END = """
import time
from featrehearse.config import load_config
from featrehearse.data import split_tasks
from featrehearse.trainer import run
import sys
sys.path.insert(0, {tests!r})
from conftest import make_blobs
stream = split_tasks(make_blobs(100, 10, size=28, seed=0), make_blobs(10, 10, size=28, seed=1), 5, 0)
cfg = load_config(None, ["epochs=2", "milestones=1", "checkpoints=false"])
t = time.perf_counter()
run(cfg, stream)
print(time.perf_counter() - t)
"""


def end_to_end(numba: bool) -> float:
    env = dict(os.environ)
    env.pop(K.ENV_FLAG, None)
    if not numba:
        env[K.ENV_FLAG] = "1"
    tests = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "tests")
    src = END_TO_END.format(tests=tests)
    # first call compiles and fills the numba cache; time the second
    for _ in range(2):
        out = subprocess.run([sys.executable, "-c", src], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    if K.nb is None:
        sys.exit("numba is not installed; nothing to compare")
    print(f"{'kernel':<30} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, np_fn, nb_fn in kernel_cases():
        a, b = bench(np_fn, args.repeat), bench(nb_fn, args.repeat)
        print(f"{name:<30} {a * 1e3:>10.2f} {b * 1e3:>10.2f} {a / b:>7.1f}x")
    if args.end_to_end:
        t0 = time.perf_counter()
        a, b = end_to_end(False), end_to_end(True)
        print(f"{'2-task run, 1000 images':<30} {a * 1e3:>10.0f} {b * 1e3:>10.0f} {a / b:>7.1f}x")
        print(f"(benchmark wall time {time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
