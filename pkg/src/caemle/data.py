"""Dataset loaders for MNIST IDX and USPS matrix files, plus synthetic fixtures.

USPS matrix format (all integers big-endian)::

    bytes 0-3    b"USPS"
    byte  4      value type: 0x08 uint8 pixels, 0x0D float32, 0x0E float64
    byte  5      1 if a label block follows the pixel block, else 0
    bytes 6-7    reserved, zero
    bytes 8-19   n, H, W as uint32
    pixels       n*H*W values, row-major, big-endian
    labels       n uint8 values (only when byte 5 is 1)

Pixel values may use any range; loading maps them affinely onto [-1, 1].
``convert_usps`` writes this format from the common LIBSVM text and HDF5
distributions of USPS.
"""

import bz2
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
USPS_MAGIC = b"USPS"
_USPS_TYPES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Images (n, c, H, W) plus optional evaluation-only labels.

    Training code receives ``images`` only; ``labels`` are for metrics.
    ``normalization`` records ``scale`` and ``offset`` such that
    ``raw = (images - offset) / scale``.
    """

    images: np.ndarray
    labels: np.ndarray = None
    name: str = "dataset"
    normalization: dict = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]

    def denormalize(self):
        scale = self.normalization.get("scale", 1.0)
        offset = self.normalization.get("offset", 0.0)
        return (self.images - offset) / scale

    def subset(self, idx, name=None):
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, name or self.name, dict(self.normalization))


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, expected_magic):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x} at offset 0 (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataFormatError(
            f"{path}: truncated payload, expected {count} bytes after offset {header}, "
            f"found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * arr.ndim, *arr.shape))
        fh.write(arr.tobytes())


def load_idx(images_path, labels_path=None, name="mnist"):
    """Parse IDX images (and labels), scaling bytes to [0, 1]."""
    raw = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if labels.shape[0] != raw.shape[0]:
            raise DataFormatError(
                f"count mismatch: {raw.shape[0]} images vs {labels.shape[0]} labels")
    images = (raw.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(images, labels, name, {"scale": 1.0 / 255.0, "offset": 0.0})


def load_mnist(directory):
    """Concatenate the MNIST train and test IDX files (70000 images)."""
    d = Path(directory)
    parts = []
    for prefix in ("train", "t10k"):
        img = _first_existing(d, f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte")
        lab = _first_existing(d, f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte")
        parts.append(load_idx(img, lab))
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), "mnist", parts[0].normalization)


def _first_existing(directory, *stems):
    for stem in stems:
        for suffix in ("", ".gz"):
            p = directory / (stem + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"none of {stems} found in {directory}")


def _affine_to_unit_range(raw):
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        return np.zeros_like(raw, dtype=np.float64), {"scale": 1.0, "offset": -lo}
    scale = 2.0 / (hi - lo)
    offset = -1.0 - lo * scale
    return raw.astype(np.float64) * scale + offset, {"scale": scale, "offset": offset,
                                                     "raw_min": lo, "raw_max": hi}


def read_usps_matrix(path):
    """Raw (unnormalized) pixel array and labels from a USPS matrix file."""
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise DataFormatError(f"{path}: truncated header")
    if raw[:4] != USPS_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    code, has_labels = raw[4], raw[5]
    if code not in _USPS_TYPES:
        raise DataFormatError(f"{path}: unknown value type 0x{code:02x} at offset 4")
    if has_labels not in (0, 1):
        raise DataFormatError(f"{path}: bad label flag {has_labels} at offset 5")
    n, h, w = struct.unpack(">III", raw[8:20])
    if n < 1 or n > 10_000_000 or h < 1 or w < 1:
        raise DataFormatError(f"{path}: header n={n}, H={h}, W={w} out of range")
    dtype = _USPS_TYPES[code]
    count = n * h * w
    need = 20 + count * dtype.itemsize + (n if has_labels else 0)
    if len(raw) != need:
        raise DataFormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype=dtype, count=count, offset=20).reshape(n, h, w)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=20 + count * dtype.itemsize)
        labels = labels.astype(np.int64)
    return pixels, labels


def write_usps_matrix(path, pixels, labels=None):
    pixels = np.asarray(pixels)
    if pixels.ndim != 3:
        raise ValueError("pixels must be (n, H, W)")
    native = pixels.dtype.newbyteorder("=")
    if native == np.uint8:
        code = 0x08
    elif native == np.float32:
        code = 0x0D
    else:
        code = 0x0E
    dtype = _USPS_TYPES[code]
    with open(path, "wb") as fh:
        fh.write(USPS_MAGIC + bytes([code, 0 if labels is None else 1, 0, 0]))
        fh.write(struct.pack(">III", *pixels.shape))
        fh.write(np.ascontiguousarray(pixels, dtype=dtype).tobytes())
        if labels is not None:
            fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_usps(path, name="usps"):
    """Load a USPS matrix file, mapping pixel values affinely onto [-1, 1]."""
    pixels, labels = read_usps_matrix(path)
    images, record = _affine_to_unit_range(pixels.astype(np.float64))
    return Dataset(images[:, None, :, :], labels, name, record)


def convert_usps(sources, out_path):
    """Write a USPS matrix file from LIBSVM text (.bz2 ok) or HDF5 sources.

    Several sources (e.g. the train and test splits) are concatenated in order.
    LIBSVM labels 1..10 become 0..9.
    """
    pix, lab = [], []
    for src in sources:
        src = Path(src)
        if src.suffix in (".h5", ".hdf5"):
            import h5py

            with h5py.File(src, "r") as fh:
                for split in ("train", "test"):
                    if split in fh:
                        pix.append(np.asarray(fh[split]["data"], dtype=np.float64).reshape(-1, 16, 16))
                        lab.append(np.asarray(fh[split]["target"], dtype=np.int64))
        else:
            opener = bz2.open if src.suffix == ".bz2" else open
            with opener(src, "rt") as fh:
                rows, ys = [], []
                for line in fh:
                    parts = line.split()
                    if not parts:
                        continue
                    ys.append(int(float(parts[0])) - 1)
                    row = np.zeros(256)
                    for tok in parts[1:]:
                        k, v = tok.split(":")
                        row[int(k) - 1] = float(v)
                    rows.append(row)
            pix.append(np.array(rows).reshape(-1, 16, 16))
            lab.append(np.array(ys, dtype=np.int64))
    write_usps_matrix(out_path, np.concatenate(pix), np.concatenate(lab))


def make_synthetic_blobs(classes=3, per_class=100, image_size=16, sigma=0.1, seed=0, channels=1):
    """Each class is a fixed random template plus Gaussian pixel noise.

    Templates are smooth random fields in [0, 1]; instances are ordered class
    by class.
    """
    if classes < 1 or per_class < 1 or image_size < 1 or sigma < 0:
        raise ValueError("classes, per_class and image_size must be positive, sigma >= 0")
    rng = np.random.default_rng(seed)
    coarse = max(image_size // 4, 2)
    templates = []
    for _ in range(classes):
        g = rng.random((channels, coarse, coarse))
        reps = -(-image_size // coarse)
        t = np.kron(g, np.ones((reps, reps)))[:, :image_size, :image_size]
        templates.append(t)
    templates = np.stack(templates)
    labels = np.repeat(np.arange(classes), per_class)
    images = templates[labels] + sigma * rng.standard_normal((len(labels), channels, image_size, image_size))
    return Dataset(images, labels, f"blobs{classes}x{per_class}", {"scale": 1.0, "offset": 0.0})
