#!/usr/bin/env python3
"""Convert the 5000-example MNIST subset shipped with mlxtend into gzipped IDX files.

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/mnist_subset_to_idx.py /tmp/mlx/mlxtend-*.whl crates/core/data/mnist
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as zf:
        raw = zf.read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.genfromtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    pixels = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    n = pixels.shape[0]
    images = struct.pack(">IIII", 0x00000803, n, 28, 28) + pixels.tobytes()
    label_bytes = struct.pack(">II", 0x00000801, n) + labels.tobytes()
    # mtime=0 keeps the archives byte-reproducible
    for name, payload in (("mnist5k-images-idx3-ubyte.gz", images),
                          ("mnist5k-labels-idx1-ubyte.gz", label_bytes)):
        with open(f"{out_dir}/{name}", "wb") as fh:
            with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
