"""Writes the bundled handwritten-digit corpus as MNIST-style IDX files.

Source: the UCI optical-recognition digits shipped with scikit-learn
(1797 images, 8x8, intensities 0..16). Images are bilinearly resized to
14x14 and scaled to 0..255 so they match the `mnist-small` preset.

    python3 scripts/make_digits_fixture.py data/digits
"""

import os
import struct
import sys

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

TRAIN = 1500


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.tobytes())


def main(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    digits = load_digits()
    images = np.stack([zoom(im, 14 / 8, order=1) for im in digits.images])
    images = np.clip(np.rint(images * 255.0 / 16.0), 0, 255).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    write_idx(os.path.join(out_dir, "train-images-idx3-ubyte"), images[:TRAIN])
    write_idx(os.path.join(out_dir, "train-labels-idx1-ubyte"), labels[:TRAIN])
    write_idx(os.path.join(out_dir, "t10k-images-idx3-ubyte"), images[TRAIN:])
    write_idx(os.path.join(out_dir, "t10k-labels-idx1-ubyte"), labels[TRAIN:])


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/digits")
