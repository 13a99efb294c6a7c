"""Regenerate the 256x256 grayscale benchmark set from scikit-image sample data.

All sources are public domain or CC0 (see skimage.data docstrings).
"""
import os
import sys

import numpy as np
from skimage import color, data, transform

NAMES = [
    "camera", "astronaut", "chelsea", "coffee", "coins", "moon",
    "brick", "grass", "gravel", "rocket", "retina", "clock",
]


def to_gray_u8(img):
    if img.ndim == 3:
        img = color.rgb2gray(img[..., :3]) * 255.0
    return img.astype(np.float64)


def square_256(img):
    h, w = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    img = img[top:top + s, left:left + s]
    img = transform.resize(img, (256, 256), order=1, anti_aliasing=True, preserve_range=True)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def write_pgm(path, img):
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def main(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for name in NAMES:
        img = square_256(to_gray_u8(getattr(data, name)()))
        write_pgm(os.path.join(out_dir, name + ".pgm"), img)
        print(name, img.shape, img.mean().round(1), img.std().round(1))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/data/bench")
