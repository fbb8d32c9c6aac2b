"""Write a shuffled 4000/1000 split of mlxtend's bundled 5k MNIST sample as IDX files.

The sandbox has no route to the canonical MNIST mirrors, so the bundled
500-per-class subset of the MNIST training set is repackaged in the standard
IDX layout. Any real IDX files can be dropped into data/mnist/ instead.

    python scripts/make_mnist_subset.py [outdir]
"""
import gzip
import struct
import sys
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

SEED = 20221
N_TRAIN = 4000


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main(outdir="data/mnist"):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    x, y = mnist_data()
    order = np.random.default_rng(SEED).permutation(len(y))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    splits = {"train": slice(0, N_TRAIN), "t10k": slice(N_TRAIN, None)}
    for name, sl in splits.items():
        write_idx(out / f"{name}-images-idx3-ubyte.gz", x[sl], 0x00000803)
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", y[sl], 0x00000801)
        print(f"{name}: {len(y[sl])} samples -> {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
