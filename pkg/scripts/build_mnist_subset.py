"""Convert the 10,000 MNIST digits shipped in the `mnist` npm package
(src/digits/<label>.json, flattened 28x28 floats) into MNIST-layout IDX
files with a stratified train/test split.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist
"""

import argparse
import json
from pathlib import Path

import numpy as np

from dasnn.data import write_idx


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    parts = {"train": ([], []), "test": ([], [])}
    for label in range(10):
        flat = np.asarray(json.loads((args.digits_dir / f"{label}.json").read_text())["data"])
        imgs = np.rint(flat.reshape(-1, 28, 28) * 255).astype(np.uint8)
        order = rng.permutation(len(imgs))
        n_test = int(round(len(imgs) * args.test_fraction))
        for split, idx in (("test", order[:n_test]), ("train", order[n_test:])):
            parts[split][0].append(imgs[idx])
            parts[split][1].append(np.full(len(idx), label, np.uint8))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    names = {"train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
             "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz")}
    for split, (imgs, labels) in parts.items():
        x, y = np.concatenate(imgs), np.concatenate(labels)
        perm = rng.permutation(len(y))
        write_idx(args.out_dir / names[split][0], x[perm])
        write_idx(args.out_dir / names[split][1], y[perm])
        print(f"{split}: {len(y)} images")


if __name__ == "__main__":
    main()
