#!/usr/bin/env python3
"""Writes the tiny IDX fixtures used by the I/O unit tests (stdlib only)."""
import gzip
import os
import struct

here = os.path.dirname(os.path.abspath(__file__))

# image 0: 255 at the top-left corner, zero elsewhere; image 1: (r * 28 + c) mod 256
pixels = bytearray(2 * 28 * 28)
pixels[0] = 255
for r in range(28):
    for c in range(28):
        pixels[784 + r * 28 + c] = (r * 28 + c) % 256
images = struct.pack(">IIII", 0x00000803, 2, 28, 28) + bytes(pixels)
labels = struct.pack(">II", 0x00000801, 2) + bytes([3, 7])

with open(os.path.join(here, "tiny-images-idx3-ubyte"), "wb") as f:
    f.write(images)
with open(os.path.join(here, "tiny-labels-idx1-ubyte"), "wb") as f:
    f.write(labels)
# mtime pinned so the gzip bytes are reproducible
with open(os.path.join(here, "tiny-images-idx3-ubyte.gz"), "wb") as raw:
    with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as f:
        f.write(images)
with open(os.path.join(here, "tiny-images-truncated"), "wb") as f:
    f.write(images[:-100])
