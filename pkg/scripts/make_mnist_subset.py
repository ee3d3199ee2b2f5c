"""Write a desk-scale MNIST subset as IDX files.

Source: the 5000-image MNIST sample (500 per digit) bundled with the
``mlxtend`` wheel, which needs no network access.  Per digit, a seeded
``--test-per-class`` images go to ``t10k-*`` and the rest to ``train-*``.

    python scripts/make_mnist_subset.py OUT_DIR [--test-per-class 100]
"""

from __future__ import annotations

import argparse
import gzip
import io
import sys
from importlib.util import find_spec
from pathlib import Path

import numpy as np


def load_mlxtend_csv() -> tuple[np.ndarray, np.ndarray]:
    spec = find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise SystemExit("mlxtend is not installed (pip install mlxtend --no-deps)")
    path = Path(list(spec.submodule_search_locations)[0]) / "data" / "data" / "mnist_5k.csv.gz"
    table = np.loadtxt(io.StringIO(gzip.decompress(path.read_bytes()).decode()), delimiter=",")
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def write_subset(out_dir, test_per_class: int = 100, seed: int = 0) -> Path:
    sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
    from featrehearse.data import write_idx

    images, labels = load_mlxtend_csv()
    rng = np.random.default_rng(seed)
    test_rows = []
    for c in range(10):
        rows = np.flatnonzero(labels == c)
        test_rows.append(np.sort(rng.choice(rows, size=test_per_class, replace=False)))
    test_rows = np.concatenate(test_rows)
    is_test = np.zeros(labels.size, bool)
    is_test[test_rows] = True
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, mask in (("train", ~is_test), ("t10k", is_test)):
        write_idx(out / f"{name}-images-idx3-ubyte", images[mask])
        write_idx(out / f"{name}-labels-idx1-ubyte", labels[mask])
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out_dir")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    print(write_subset(args.out_dir, args.test_per_class, args.seed))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
