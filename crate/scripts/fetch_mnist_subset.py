#!/usr/bin/env python3
"""Build MNIST IDX files from the 10,000-digit subset bundled in the npm `mnist` package.

The npm package stores each digit class as a flat JSON array of intensities
rounded to three decimals. Multiplying by 255 and rounding recovers the
original bytes exactly. Digits are interleaved with a fixed-seed shuffle and
split into train/test files using the official MNIST file names.

Usage: python3 scripts/fetch_mnist_subset.py [--out data/mnist] [--test 2000]
"""

import argparse
import json
import random
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

PACKAGE = "mnist@1.1.0"
SIDE = 28


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=20190101)
    ap.add_argument("--tarball", help="use an already downloaded mnist-*.tgz")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball
        if tarball is None:
            subprocess.run(["npm", "pack", PACKAGE, "--silent"], cwd=tmp, check=True)
            tarball = next(Path(tmp).glob("mnist-*.tgz"))
        with tarfile.open(tarball) as tar:
            tar.extractall(tmp)
        samples = []
        for digit in range(10):
            raw = json.loads((Path(tmp) / "package/src/digits" / f"{digit}.json").read_text())["data"]
            assert len(raw) % (SIDE * SIDE) == 0
            for start in range(0, len(raw), SIDE * SIDE):
                pix = [int(round(v * 255)) for v in raw[start:start + SIDE * SIDE]]
                assert all(0 <= p <= 255 for p in pix)
                samples.append((pix, digit))

    random.Random(args.seed).shuffle(samples)
    test, train = samples[:args.test], samples[args.test:]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_images(out / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(out / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(out / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(out / "t10k-labels-idx1-ubyte", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")


if __name__ == "__main__":
    main()
