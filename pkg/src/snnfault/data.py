"""IDX (MNIST) file ingestion."""
import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _read(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path, expected_magic):
    """Parse an IDX file (optionally gzipped) into a uint8 array, validating header and length."""
    raw = _read(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset 0 (need 4 bytes, have {len(raw)})")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: magic number 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated dimension header at byte offset 4 "
                          f"(expected {header_len} header bytes, have {len(raw)})")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_len])
    expected = header_len + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: payload length mismatch at byte offset {header_len}: "
                          f"expected {expected} bytes in total, actual {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def load_mnist(image_path, label_path, subset=None):
    """Return ``(images, labels)``: images as float (N, 1, 28, 28) in [0, 1], labels int64.

    ``subset`` keeps the first ``subset`` samples in file order.
    """
    images = read_idx(image_path, IMAGE_MAGIC)
    labels = read_idx(label_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{image_path} has {images.shape[0]} images but {label_path} has {labels.shape[0]} labels")
    if subset is not None:
        images, labels = images[:subset], labels[:subset]
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return x, labels.astype(np.int64)


def mnist_paths(root, split="train"):
    """Locate ``{split}-images-idx3-ubyte[.gz]`` and the matching label file under ``root``."""
    root = Path(root)
    found = []
    for kind, suffix in (("images", "idx3-ubyte"), ("labels", "idx1-ubyte")):
        for name in (f"{split}-{kind}-{suffix}", f"{split}-{kind}.{suffix}"):
            cands = [root / name, root / (name + ".gz")]
            hit = next((c for c in cands if c.exists()), None)
            if hit:
                found.append(hit)
                break
        else:
            raise FileNotFoundError(f"no {split} {kind} IDX file under {root}")
    return tuple(found)
