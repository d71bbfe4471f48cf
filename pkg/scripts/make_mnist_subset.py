"""Build the MNIST test fixture from the 5000-sample CSV bundled with mlxtend.

The CSV is sorted by class, so rows are written in a fixed permuted order;
the first 4000 become the training pool and the last 1000 the test split.

    pip download --no-deps mlxtend
    python scripts/make_mnist_subset.py mlxtend-*.whl tests/data
"""
import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from mfcap.data import serialize_idx

N_TRAIN = 4000


def main(wheel, out_dir):
    out = Path(out_dir)
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    order = np.random.Generator(np.random.PCG64(20190611)).permutation(len(table))
    table = table[order]
    pixels = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    splits = {"train": slice(0, N_TRAIN), "test": slice(N_TRAIN, None)}
    for name, sl in splits.items():
        for kind, arr in (("images-idx3", pixels[sl]), ("labels-idx1", labels[sl])):
            path = out / f"mnist5k-{name}-{kind}-ubyte.gz"
            path.write_bytes(gzip.compress(serialize_idx(arr), mtime=0))
            print(path, arr.shape)


if __name__ == "__main__":
    main(*sys.argv[1:])
