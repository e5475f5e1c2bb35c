#!/usr/bin/env python3
"""Fetch MNIST / CIFAR-10 in their canonical binary formats.

    fetch_data.py mnist --out data/mnist
    fetch_data.py cifar10 --out data
    fetch_data.py mnist --out data/mnist --from-mlxtend [CSV.GZ]

The --from-mlxtend path builds IDX files offline from the 5,000-example
MNIST sample bundled with the mlxtend package (500 per class). That sample
has no test split, so the t10k files repeat the same 5,000 examples.
"""

import argparse
import gzip
import shutil
import struct
import subprocess
import sys
import tarfile
import tempfile
import urllib.request
from pathlib import Path

import numpy as np

MNIST_MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]
MNIST_FILES = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
]
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"


def download(url, dest):
    with urllib.request.urlopen(url, timeout=60) as r, open(dest, "wb") as f:
        shutil.copyfileobj(r, f)


def fetch_mnist(out):
    out.mkdir(parents=True, exist_ok=True)
    for name in MNIST_FILES:
        if (out / name).exists():
            continue
        for mirror in MNIST_MIRRORS:
            try:
                with tempfile.NamedTemporaryFile(suffix=".gz") as tmp:
                    download(mirror + name + ".gz", tmp.name)
                    with gzip.open(tmp.name) as src, open(out / name, "wb") as dst:
                        shutil.copyfileobj(src, dst)
                break
            except OSError as e:
                print(f"{mirror}{name}.gz: {e}", file=sys.stderr)
        else:
            sys.exit(f"could not download {name}")


def fetch_cifar10(out):
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(suffix=".tar.gz") as tmp:
        download(CIFAR_URL, tmp.name)
        with tarfile.open(tmp.name) as tar:
            tar.extractall(out)


def locate_mlxtend_csv():
    try:
        import mlxtend.data

        path = Path(mlxtend.data.__file__).parent / "data" / "mnist_5k.csv.gz"
        if path.exists():
            return path
    except ImportError:
        pass
    tmp = Path(tempfile.mkdtemp())
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-d", str(tmp), "mlxtend"],
        check=True,
    )
    wheel = next(tmp.glob("mlxtend-*.whl"))
    shutil.unpack_archive(str(wheel), str(tmp / "whl"), "zip")
    return tmp / "whl" / "mlxtend" / "data" / "data" / "mnist_5k.csv.gz"


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, images.shape[0], 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def mnist_from_mlxtend(out, csv):
    data = np.loadtxt(csv or locate_mlxtend_csv(), delimiter=",")
    images, labels = data[:, :-1], data[:, -1].astype(int)
    # The CSV is sorted by class; a fixed shuffle gives a mixed file order.
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]
    out.mkdir(parents=True, exist_ok=True)
    for prefix in ("train", "t10k"):
        write_idx_images(out / f"{prefix}-images-idx3-ubyte", images)
        write_idx_labels(out / f"{prefix}-labels-idx1-ubyte", labels)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("dataset", choices=["mnist", "cifar10"])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--from-mlxtend", nargs="?", const="", default=None, metavar="CSV.GZ")
    args = p.parse_args()
    if args.dataset == "mnist":
        if args.from_mlxtend is not None:
            mnist_from_mlxtend(args.out, args.from_mlxtend or None)
        else:
            fetch_mnist(args.out)
    else:
        if args.from_mlxtend is not None:
            sys.exit("--from-mlxtend only applies to mnist")
        fetch_cifar10(args.out)
    print(f"wrote {args.dataset} files under {args.out}")


if __name__ == "__main__":
    main()
