#!/usr/bin/env python3
# Copyright 2026 The badd-mnist Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Convert the 10k digit sample shipped in the `mnist` npm package to IDX files.

Usage: mnist_from_npm.py <package-dir> <out-dir> [--train 8000]

The npm package stores each digit as 784 floats rounded to three decimals;
round(v * 255) recovers the original bytes exactly. Digits are interleaved
with a fixed permutation and split into train/t10k IDX pairs (gzip).
"""
import argparse
import gzip
import json
import pathlib
import random
import struct


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package")
    ap.add_argument("out")
    ap.add_argument("--train", type=int, default=8000)
    args = ap.parse_args()

    samples = []
    for digit in range(10):
        path = pathlib.Path(args.package) / "src" / "digits" / f"{digit}.json"
        data = json.loads(path.read_text())["data"]
        for i in range(len(data) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784])
            samples.append((px, digit))

    random.Random(20240521).shuffle(samples)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": samples[:args.train], "t10k": samples[args.train:]}
    for name, rows in splits.items():
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x00000803, [len(rows), 28, 28],
                  b"".join(px for px, _ in rows))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x00000801, [len(rows)],
                  bytes(d for _, d in rows))
        print(name, len(rows))


if __name__ == "__main__":
    main()
