#!/usr/bin/env python3
"""Convert the digit bundle of the npm `mnist` package (MIT, 10000 MNIST
digits stored as JSON floats) into standard IDX files.

Usage: convert_mnist_json.py <package>/src/digits OUT_DIR [--train 8500] [--seed 0]

Pixels are stored as round(v * 255); the bundle keeps three decimals of
p / 255, which is enough to recover every byte exactly. The pooled digits
are shuffled with a fixed seed and split into a train and a t10k part.
"""
import argparse
import json
import os
import random
import struct


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train", type=int, default=8500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    samples = []
    for digit in range(10):
        with open(os.path.join(args.digits_dir, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        assert len(flat) % 784 == 0
        for k in range(len(flat) // 784):
            px = [int(round(v * 255)) for v in flat[k * 784:(k + 1) * 784]]
            assert all(0 <= p <= 255 for p in px)
            samples.append((px, digit))

    random.Random(args.seed).shuffle(samples)
    os.makedirs(args.out_dir, exist_ok=True)
    parts = {"train": samples[:args.train], "t10k": samples[args.train:]}
    for name, part in parts.items():
        write_idx_images(os.path.join(args.out_dir, f"{name}-images-idx3-ubyte"), [p for p, _ in part])
        write_idx_labels(os.path.join(args.out_dir, f"{name}-labels-idx1-ubyte"), [d for _, d in part])
        print(name, len(part))


if __name__ == "__main__":
    main()
