#!/usr/bin/env python3
"""Write MNIST IDX files from the 5,000-image subset shipped in the mlxtend wheel.

Usage: make_mnist_idx.py OUT_DIR [--wheel PATH]

Without --wheel the script runs `pip download mlxtend --no-deps` into a
temporary directory. Produces OUT_DIR/train-images-idx3-ubyte and
OUT_DIR/train-labels-idx1-ubyte.
"""

import argparse
import glob
import gzip
import os
import struct
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def find_wheel(tmp):
    subprocess.run([sys.executable, "-m", "pip", "download", "mlxtend", "--no-deps", "-q", "-d", tmp], check=True)
    wheels = glob.glob(os.path.join(tmp, "mlxtend-*.whl"))
    if not wheels:
        sys.exit("no mlxtend wheel downloaded")
    return wheels[0]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--wheel")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or find_wheel(tmp)
        rows = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER)).decode().splitlines()

    images = bytearray()
    labels = bytearray()
    for line in rows:
        values = [int(float(v)) for v in line.split(",")]
        if len(values) != 785:
            sys.exit(f"unexpected row width {len(values)}")
        images.extend(values[:784])
        labels.append(values[784])

    n = len(labels)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "train-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(images)
    with open(os.path.join(args.out_dir, "train-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels)
    print(f"wrote {n} images to {args.out_dir}")


if __name__ == "__main__":
    main()
