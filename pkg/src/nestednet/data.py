"""Dataset ingestion and batching.

Supported containers: IDX (big-endian magic + dims header, unsigned-byte
payload) and the CIFAR-10 binary layout (3073-byte records, channel-planar
RGB). Images load as NHWC float32 scaled to [0, 1]; CIFAR additionally
gets per-channel mean/std normalization with constants from the training
split. Label hierarchies map fine classes onto coarser ones so nested
levels can target different granularities.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    """Malformed dataset container."""


@dataclass
class LabelHierarchy:
    """Fine-to-coarse lookup tables, one per level, core (coarsest) first;
    the last level is the identity over fine classes."""

    class_counts: tuple[int, ...]
    tables: tuple[np.ndarray, ...]

    def __post_init__(self):
        fine = self.class_counts[-1]
        for count, table in zip(self.class_counts, self.tables):
            if table.shape != (fine,):
                raise DataFormatError(f"hierarchy table must map all {fine} fine classes")
            if table.min() < 0 or table.max() >= count:
                raise DataFormatError(f"hierarchy table exceeds class count {count}")
            if len(np.unique(table)) != count:
                raise DataFormatError(f"hierarchy level is not surjective onto {count} classes")

    @property
    def levels(self) -> int:
        return len(self.class_counts)


@dataclass
class Dataset:
    """Images with fine labels and, once a hierarchy is attached, one label
    array per nested level (core first, last = fine)."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    hierarchy: LabelHierarchy | None = None
    level_labels: list = field(default_factory=list)
    norm_stats: tuple | None = None  # (mean, std) per channel when normalized

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def labels_for_levels(self, levels: int) -> list:
        """Per-level label arrays; without a hierarchy every level gets the
        fine labels."""
        if self.hierarchy is None:
            return [self.labels] * levels
        if self.hierarchy.levels != levels:
            raise DataFormatError(
                f"hierarchy has {self.hierarchy.levels} levels, network wants {levels}"
            )
        return list(self.level_labels)

    def class_counts(self, levels: int) -> tuple[int, ...]:
        if self.hierarchy is None:
            n = int(self.labels.max()) + 1 if len(self.labels) else 0
            return (n,) * levels
        return self.hierarchy.class_counts


def _read_be32(buf: bytes, offset: int, path) -> int:
    if offset + 4 > len(buf):
        raise DataFormatError(f"{path}: truncated header at offset {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def _load_idx_array(path, magic: int) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    got = _read_be32(buf, 0, path)
    if got != magic:
        raise DataFormatError(
            f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}"
        )
    ndim = magic & 0xFF
    dims = [_read_be32(buf, 4 + 4 * i, path) for i in range(ndim)]
    start = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(buf) - start < count:
        raise DataFormatError(
            f"{path}: payload holds {len(buf) - start} bytes, header promises {count}"
        )
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=start).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse an IDX image/label file pair; pixels scale to [0, 1]."""
    raw = _load_idx_array(images_path, IDX_IMAGES_MAGIC)
    labels = _load_idx_array(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if raw.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{raw.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}"
        )
    images = (raw.astype(np.float32) / 255.0)[..., None]  # N,H,W -> N,H,W,1
    return Dataset(images=images, labels=labels, split=split)


def write_idx(images_path, labels_path, images: np.ndarray, labels) -> None:
    """Write uint8 images (N,H,W) and labels as an IDX pair (test fixtures
    and the bundled synthetic dataset use this)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_cifar10(paths, split: str = "train", stats=None, normalize: bool = True) -> Dataset:
    """Parse CIFAR-10 binary batch files (1 label byte + 3072 channel-planar
    pixel bytes per record).

    ``stats`` carries (mean, std) from the training split; when omitted the
    constants are computed from the files being loaded (i.e. pass the test
    split its training stats).
    """
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    chunks, labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            buf = f.read()
        if len(buf) == 0 or len(buf) % CIFAR_RECORD != 0:
            raise DataFormatError(
                f"{path}: size {len(buf)} is not a positive multiple of {CIFAR_RECORD}"
            )
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0].astype(np.int64)
        if lab.max() >= 10:
            raise DataFormatError(f"{path}: label byte {lab.max()} out of range [0, 10)")
        # channel-planar R,G,B planes of 32x32
        imgs = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        chunks.append(imgs)
        labels.append(lab)
    images = np.concatenate(chunks).astype(np.float32) / 255.0
    labels = np.concatenate(labels)
    if normalize:
        if stats is None:
            mean = images.mean(axis=(0, 1, 2))
            std = images.std(axis=(0, 1, 2))
            std[std == 0] = 1.0
            stats = (mean, std)
        images = (images - stats[0]) / stats[1]
    return Dataset(images=images, labels=labels, split=split, norm_stats=stats)


def load_hierarchy(path) -> LabelHierarchy:
    """Parse the hierarchy text format: one line per fine class,
    ``fine-index <TAB> coarse-index`` with one column per coarse level,
    coarsest first."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                fields = [int(tok) for tok in line.split("\t")]
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from None
            if len(fields) < 2:
                raise DataFormatError(f"{path}:{lineno}: need fine index and >= 1 coarse column")
            rows.append(fields)
    if not rows:
        raise DataFormatError(f"{path}: empty hierarchy")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataFormatError(f"{path}: inconsistent column counts {sorted(widths)}")
    rows.sort()
    fine = len(rows)
    if [r[0] for r in rows] != list(range(fine)):
        raise DataFormatError(f"{path}: fine indices must cover 0..{fine - 1} exactly once")
    coarse_cols = len(rows[0]) - 1
    tables = []
    counts = []
    for c in range(coarse_cols):
        table = np.array([r[c + 1] for r in rows], dtype=np.int64)
        counts.append(int(table.max()) + 1)
        tables.append(table)
    tables.append(np.arange(fine, dtype=np.int64))
    counts.append(fine)
    return LabelHierarchy(class_counts=tuple(counts), tables=tuple(tables))


def attach_hierarchy(ds: Dataset, h: LabelHierarchy) -> Dataset:
    """Return the dataset with per-level coarse labels computed by lookup."""
    fine = h.class_counts[-1]
    if len(ds.labels) and (ds.labels.min() < 0 or ds.labels.max() >= fine):
        raise DataFormatError(
            f"fine label {int(ds.labels.max())} outside hierarchy range [0, {fine})"
        )
    level_labels = [table[ds.labels] for table in h.tables]
    return Dataset(
        images=ds.images,
        labels=ds.labels,
        split=ds.split,
        hierarchy=h,
        level_labels=level_labels,
        norm_stats=ds.norm_stats,
    )


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int):
    """Deterministic shuffled index batches for one epoch; the final
    partial batch is kept."""
    n = len(ds)
    if batch_size < 1 or batch_size > n:
        raise ValueError(f"batch size {batch_size} not in [1, {n}]")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
