"""Image ingestion and one-class train/test splits.

Two on-disk formats are supported:

* ``IMAGE_DIR``: a directory of image files described by a CSV manifest with
  the header ``id,relpath,label``.
* ``IDX_PAIR``: MNIST-style IDX files (an image tensor and a label vector,
  optionally gzip-compressed).

Every image is resized to a square ``image_size`` and scaled to [-1, 1] as
``2 * p / 255 - 1``.
"""

from __future__ import annotations

import csv
import enum
import gzip
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .exceptions import ConfigError, IngestionError

MANIFEST_COLUMNS = ("id", "relpath", "label")


class DatasetFormat(str, enum.Enum):
    IMAGE_DIR = "IMAGE_DIR"
    IDX_PAIR = "IDX_PAIR"


class Protocol(str, enum.Enum):
    FULL_TEST = "FULL_TEST"
    HOLDOUT_80_20 = "HOLDOUT_80_20"


def normalize(pixels):
    """Map 8-bit pixel values onto [-1, 1]."""
    return np.asarray(pixels, dtype=np.float32) * (2.0 / 255.0) - 1.0


def denormalize(values):
    """Inverse of :func:`normalize`, rounding back to uint8."""
    out = np.rint((np.asarray(values, dtype=np.float64) + 1.0) * 127.5)
    return np.clip(out, 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class ImageSample:
    """One normalized image. ``pixels`` has shape (C, H, W), values in [-1, 1]."""

    pixels: np.ndarray
    label: int
    id: str

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 3 or pixels.shape[0] not in (1, 3):
            raise IngestionError(
                f"sample {self.id!r}: expected (C, H, W) with C in {{1, 3}}, got {pixels.shape}"
            )
        if pixels.size and (pixels.min() < -1.0 or pixels.max() > 1.0):
            raise IngestionError(f"sample {self.id!r}: pixel values outside [-1, 1]")
        pixels = pixels.copy()
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "id", str(self.id))

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class OneClassSplit:
    target_class: int
    train: tuple
    test: tuple  # of (ImageSample, binary label) with 1 = in-class
    protocol: Protocol

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple((s, int(y)) for s, y in self.test))
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        if any(s.label != self.target_class for s in self.train):
            raise ConfigError("every training sample must belong to the target class")
        labels = {y for _, y in self.test}
        if labels != {0, 1}:
            raise ConfigError("test set must contain both in-class and out-of-class samples")
        overlap = {s.id for s in self.train} & {s.id for s, _ in self.test}
        if overlap:
            raise ConfigError(f"{len(overlap)} sample ids appear in both train and test")

    @property
    def test_samples(self):
        return [s for s, _ in self.test]

    @property
    def test_labels(self):
        return np.array([y for _, y in self.test], dtype=np.int64)

    def to_dict(self):
        """Id-level description of the split (no pixels)."""
        return {
            "target_class": self.target_class,
            "protocol": self.protocol.value,
            "train": [s.id for s in self.train],
            "test": [{"id": s.id, "label": y} for s, y in self.test],
        }


@dataclass(frozen=True)
class DatasetManifest:
    """Where a dataset lives and how to decode it.

    ``train_files`` / ``test_files`` are paths relative to ``root``: one CSV
    manifest for ``IMAGE_DIR``, or ``(images, labels)`` IDX files for
    ``IDX_PAIR``. ``test_files`` may be empty.
    """

    root: Path
    format: DatasetFormat
    train_files: tuple = ()
    test_files: tuple = ()
    class_names: tuple = ()
    image_size: int = 32
    channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "format", DatasetFormat(self.format))
        object.__setattr__(self, "train_files", tuple(self.train_files))
        object.__setattr__(self, "test_files", tuple(self.test_files))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.image_size <= 0:
            raise ConfigError("image_size must be positive")
        expected = 1 if self.format is DatasetFormat.IMAGE_DIR else 2
        for name in ("train_files", "test_files"):
            files = getattr(self, name)
            if files and len(files) != expected:
                raise ConfigError(f"{self.format.value} expects {expected} file(s) in {name}")
        if not self.train_files:
            raise ConfigError("manifest needs train_files")

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        root = Path(d.pop("root", "."))
        if base_dir is not None and not root.is_absolute():
            root = Path(base_dir) / root
        return cls(root=root, **d)

    def to_dict(self):
        return {
            "root": str(self.root),
            "format": self.format.value,
            "train_files": list(self.train_files),
            "test_files": list(self.test_files),
            "class_names": list(self.class_names),
            "image_size": self.image_size,
            "channels": self.channels,
        }


# --------------------------------------------------------------------------
# decoding helpers


def _resize_uint8(arr, size, channels):
    """Resize a uint8 HxW or HxWxC array to (C, size, size)."""
    img = Image.fromarray(arr)
    img = img.convert("L" if channels == 1 else "RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    out = np.asarray(img, dtype=np.uint8)
    if out.ndim == 2:
        out = out[None]
    else:
        out = out.transpose(2, 0, 1)
    return out


def read_image_file(path, size=32, channels=1):
    """Decode one image file into a normalized (C, size, size) array."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing image file: {path}")
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L" if channels == 1 else "RGB"))
    except Exception as exc:  # PIL raises a zoo of types
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc
    return normalize(_resize_uint8(arr, size, channels))


def _open_maybe_gz(path):
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing IDX file: {path}")
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path):
    """Read an IDX file (big-endian magic-number layout) into an ndarray."""
    with _open_maybe_gz(path) as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise IngestionError(f"{path}: bad IDX magic number")
    code, ndim = data[2], data[3]
    if code not in _IDX_DTYPES:
        raise IngestionError(f"{path}: unsupported IDX type code 0x{code:02x}")
    header = 4 + 4 * ndim
    shape = struct.unpack(f">{ndim}I", data[4:header])
    dtype = np.dtype(_IDX_DTYPES[code])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(data) - header != expected:
        raise IngestionError(f"{path}: IDX payload is {len(data) - header} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dtype, offset=header).reshape(shape)


def write_idx(path, array):
    """Write a uint8 or int32 array in IDX layout (gzip if the name ends in .gz)."""
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code, payload = 0x08, array.tobytes()
    else:
        code, payload = 0x0C, array.astype(">i4").tobytes()
    blob = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape) + payload
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(blob)


def _load_idx_pair(root, files, size, channels, prefix):
    images = read_idx(root / files[0])
    labels = read_idx(root / files[1])
    if images.ndim not in (3, 4):
        raise IngestionError(f"{files[0]}: expected an (N, H, W[, C]) image tensor")
    if len(images) != len(labels):
        raise IngestionError(f"{files[0]} has {len(images)} images but {files[1]} has {len(labels)} labels")
    width = len(str(max(len(images) - 1, 0)))
    samples = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        sid = f"{prefix}-{i:0{width}d}"
        try:
            pixels = normalize(_resize_uint8(np.ascontiguousarray(img, dtype=np.uint8), size, channels))
        except Exception as exc:
            raise IngestionError(f"cannot decode sample {sid}: {exc}") from exc
        samples.append(ImageSample(pixels, int(lab), sid))
    return samples


def read_csv_manifest(path):
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing manifest: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise IngestionError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}")
        return [(row["id"], row["relpath"], int(row["label"])) for row in reader]


def _load_image_dir(root, manifest_file, size, channels, n_jobs=4):
    manifest_path = root / manifest_file
    rows = read_csv_manifest(manifest_path)
    base = manifest_path.parent

    def load(row):
        sid, rel, label = row
        path = base / rel
        if not path.exists():
            raise IngestionError(f"missing image file: {path}")
        try:
            pixels = read_image_file(path, size, channels)
        except IngestionError as exc:
            raise IngestionError(f"cannot decode sample {sid}: {exc}") from exc
        return ImageSample(pixels, label, sid)

    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(load, rows))


def load_dataset(manifest: DatasetManifest, subset="train"):
    """Load one subset of a dataset, sorted by sample id."""
    files = manifest.train_files if subset == "train" else manifest.test_files
    if subset not in ("train", "test"):
        raise ConfigError(f"unknown subset {subset!r}")
    if not files:
        return []
    if manifest.format is DatasetFormat.IDX_PAIR:
        samples = _load_idx_pair(manifest.root, files, manifest.image_size, manifest.channels, subset)
    else:
        samples = _load_image_dir(manifest.root, files[0], manifest.image_size, manifest.channels)
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise IngestionError(f"duplicate sample ids in {subset} subset")
    return sorted(samples, key=lambda s: s.id)


def write_image_dir(root, samples: Iterable[ImageSample], manifest_name="manifest.csv"):
    """Materialize samples as PNG files plus a CSV manifest. Returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        arr = denormalize(s.pixels)
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
        rel = f"images/{s.id}.png"
        Image.fromarray(arr).save(root / rel)
        rows.append((s.id, rel, s.label))
    path = root / manifest_name
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return path


# --------------------------------------------------------------------------
# splits


def make_one_class_split(
    samples: Sequence[ImageSample],
    test_samples: Sequence[ImageSample] | None,
    target: int,
    protocol=Protocol.FULL_TEST,
    seed: int = 0,
) -> OneClassSplit:
    """Build a one-class split.

    FULL_TEST trains on every target-class sample and tests on the whole of
    ``test_samples``. HOLDOUT_80_20 trains on a seeded 80% of the target
    class and tests on the remaining 20% plus an equal number of randomly
    drawn out-of-class samples from ``test_samples`` (or from the non-target
    part of ``samples`` when no test set is given).
    """
    protocol = Protocol(protocol)
    target = int(target)
    samples = sorted(samples, key=lambda s: s.id)
    in_class = [s for s in samples if s.label == target]
    if not in_class:
        raise ConfigError(f"target class {target} has no training samples")

    if protocol is Protocol.FULL_TEST:
        if not test_samples:
            raise ConfigError("FULL_TEST needs a test set")
        test = [(s, int(s.label == target)) for s in sorted(test_samples, key=lambda s: s.id)]
        return OneClassSplit(target, in_class, test, protocol)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(in_class))
    n_train = int(round(0.8 * len(in_class)))
    if n_train == len(in_class) or n_train == 0:
        raise ConfigError(f"target class {target} has too few samples ({len(in_class)}) for an 80/20 holdout")
    train = [in_class[i] for i in sorted(order[:n_train])]
    held_in = [in_class[i] for i in sorted(order[n_train:])]

    pool = test_samples if test_samples else samples
    out_pool = sorted((s for s in pool if s.label != target), key=lambda s: s.id)
    if len(out_pool) < len(held_in):
        raise ConfigError(
            f"need {len(held_in)} out-of-class samples, only {len(out_pool)} available"
        )
    picks = sorted(rng.choice(len(out_pool), size=len(held_in), replace=False))
    held_out = [out_pool[i] for i in picks]
    test = [(s, 1) for s in held_in] + [(s, 0) for s in held_out]
    return OneClassSplit(target, train, test, protocol)


def split_from_ids(split_dict, samples, test_samples=None):
    """Rebuild a split from :meth:`OneClassSplit.to_dict` output."""
    by_id = {s.id: s for s in samples}
    test_by_id = {s.id: s for s in (test_samples or [])}
    try:
        train = [by_id[i] for i in split_dict["train"]]
        test = [((test_by_id.get(t["id"]) or by_id[t["id"]]), t["label"]) for t in split_dict["test"]]
    except KeyError as exc:
        raise ConfigError(f"split references unknown sample id {exc}") from None
    return OneClassSplit(split_dict["target_class"], train, test, split_dict["protocol"])


def stack_pixels(samples):
    """Stack sample pixels into one (N, C, H, W) float32 array."""
    if not samples:
        raise ConfigError("no samples to stack")
    return np.stack([s.pixels for s in samples]).astype(np.float32)
