"""Build gzipped IDX files from the 10k-digit MNIST sample shipped in the
`mnist` npm package (https://www.npmjs.com/package/mnist).

usage: python3 scripts/mnist_subset.py <unpacked npm package dir> <out dir>

Pixels in the package are stored as value/255 rounded to three decimals; they
are mapped back to bytes with round(v * 255). Classes are interleaved with a
fixed permutation so any prefix of the files is class-balanced in expectation.
"""
import gzip
import json
import os
import struct
import sys

import numpy as np


def main(pkg, out):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
            raw = np.asarray(json.load(f)["data"], dtype=np.float64)
        n = raw.size // 784
        images.append(np.rint(raw[: n * 784] * 255.0).clip(0, 255).astype(np.uint8).reshape(n, 784))
        labels.append(np.full(n, digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.RandomState(0).permutation(len(labels))
    images, labels = images[order], labels[order]

    os.makedirs(out, exist_ok=True)
    with gzip.GzipFile(os.path.join(out, "images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(os.path.join(out, "labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.tobytes())
    print(len(labels), "images written to", out)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
