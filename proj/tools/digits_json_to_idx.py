#!/usr/bin/env python3
"""Convert the per-digit JSON files of the npm `mnist` package into MNIST IDX files.

Each input file <digit>.json holds {"data": [...]}: a flat list of 28x28 images
with pixel values in [0, 1]. The output pair is written as
train-images-idx3-ubyte / train-labels-idx1-ubyte, with pixels round(v * 255)
and the digits interleaved in a seeded random order.

    npm pack mnist@1.1.0 && tar xf mnist-1.1.0.tgz
    python3 tools/digits_json_to_idx.py package/src/digits data/mnist
"""

import argparse
import json
import random
import struct
from pathlib import Path

SIDE = 28
PIXELS = SIDE * SIDE


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("digits_dir", type=Path, help="directory containing 0.json .. 9.json")
    ap.add_argument("out_dir", type=Path, help="output directory for the IDX pair")
    ap.add_argument("--seed", type=int, default=0, help="shuffle seed (default 0)")
    args = ap.parse_args()

    images: list[bytes] = []
    labels: list[int] = []
    for digit in range(10):
        path = args.digits_dir / f"{digit}.json"
        flat = json.loads(path.read_text())["data"]
        if len(flat) % PIXELS:
            raise SystemExit(f"{path}: {len(flat)} values is not a multiple of {PIXELS}")
        for start in range(0, len(flat), PIXELS):
            img = flat[start : start + PIXELS]
            images.append(bytes(min(255, max(0, round(v * 255))) for v in img))
            labels.append(digit)

    order = list(range(len(labels)))
    random.Random(args.seed).shuffle(order)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    with open(args.out_dir / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(order), SIDE, SIDE))
        for i in order:
            f.write(images[i])
    with open(args.out_dir / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(order)))
        f.write(bytes(labels[i] for i in order))
    print(f"wrote {len(order)} images to {args.out_dir}")


if __name__ == "__main__":
    main()
