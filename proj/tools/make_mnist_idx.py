#!/usr/bin/env python3
"""Pack the 10k MNIST digits shipped in the npm `mnist` package into gzip'd IDX files.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 tools/make_mnist_idx.py package/src/digits data/mnist10k

Pixels are stored there as round(byte/255, 3); round(v*255) recovers the byte.
"""
import argparse
import gzip
import json
import random
import struct
from pathlib import Path


def write_idx(path, dims, payload):
    header = struct.pack(">BBBB", 0, 0, 0x08, len(dims)) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    samples = []
    for label in range(10):
        flat = json.loads(Path(args.digits_dir, f"{label}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            pix = [round(v * 255) for v in flat[i : i + 784]]
            assert all(0 <= p <= 255 for p in pix)
            samples.append((pix, label))
    random.Random(args.seed).shuffle(samples)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = {"t10k": samples[: args.test], "train": samples[args.test :]}
    for prefix, part in parts.items():
        images = [p for pix, _ in part for p in pix]
        labels = [y for _, y in part]
        write_idx(out / f"{prefix}-images-idx3-ubyte.gz", [len(part), 28, 28], images)
        write_idx(out / f"{prefix}-labels-idx1-ubyte.gz", [len(part)], labels)
        print(prefix, len(part))


if __name__ == "__main__":
    main()
