"""Scene data pipeline: portable cube format, PCA, patches, stratified split.

File format (HSIF, little-endian): magic "HSIF", u16 version=1, u32 H, W, V,
C; then H*W*V float32 reflectance values band-sequential (V planes, each
row-major H*W); then H*W u16 labels row-major (0 = unlabeled, 1..C classes);
then C class names (u16 byte length + UTF-8); then CRC32 (zlib) over every
preceding byte. Parse failures raise distinct error types carrying the byte
offset of the problem.

The patch pipeline follows the usual HSI protocol: PCA over all pixels
(labeled and unlabeled) to `pca_dim` channels, per-band min-max normalization
of the reduced cube, mirror padding at the borders, one patch per labeled
pixel centered on it. Splits are drawn per class with a seeded PCG64
generator; the bundled per-class train-count tables reproduce the reference
protocol for the three standard scenes, with all remaining samples as test.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from igmamba.errors import (
    ChecksumError,
    ConfigError,
    DataFormatError,
    MagicError,
    TruncationError,
    VersionError,
)

HSIF_MAGIC = b"HSIF"
HSIF_VERSION = 1

# Per-class training-sample counts of the standard evaluation protocol, keyed
# by class count. All remaining labeled pixels form the test set.
INDIAN_PINES_TRAIN = (5, 143, 83, 24, 48, 73, 3, 48, 2, 97, 245, 59, 20, 126, 39, 9)
PAVIA_UNIVERSITY_TRAIN = (332, 932, 105, 153, 67, 251, 67, 184, 47)
HOUSTON_TRAIN = (125, 125, 70, 124, 124, 33, 127, 124, 125, 123, 123, 123, 47, 43, 66)
TRAIN_COUNT_TABLES = {
    len(INDIAN_PINES_TRAIN): INDIAN_PINES_TRAIN,
    len(PAVIA_UNIVERSITY_TRAIN): PAVIA_UNIVERSITY_TRAIN,
    len(HOUSTON_TRAIN): HOUSTON_TRAIN,
}
FALLBACK_TRAIN_FRACTION = 0.1


@dataclass
class HsiCube:
    """A full scene: reflectance volume, label map, class names."""

    reflectance: np.ndarray  # [H, W, V] float32
    labels: np.ndarray  # [H, W] integers, 0 = unlabeled
    class_names: list

    @property
    def height(self):
        return self.reflectance.shape[0]

    @property
    def width(self):
        return self.reflectance.shape[1]

    @property
    def bands(self):
        return self.reflectance.shape[2]

    @property
    def num_classes(self):
        return len(self.class_names)

    def class_counts(self):
        """Labeled-pixel count per class (index 0 = class 1)."""
        counts = np.bincount(self.labels.reshape(-1), minlength=self.num_classes + 1)
        return counts[1 : self.num_classes + 1]

    def labeled_total(self):
        return int((self.labels > 0).sum())

    def validate(self):
        if self.reflectance.ndim != 3 or self.labels.shape != self.reflectance.shape[:2]:
            raise DataFormatError(
                f"cube geometry mismatch: reflectance {self.reflectance.shape}, "
                f"labels {self.labels.shape}"
            )
        if self.labels.max(initial=0) > self.num_classes:
            raise DataFormatError(
                f"label value {int(self.labels.max())} exceeds declared class count "
                f"{self.num_classes}"
            )
        missing = [self.class_names[i] for i, c in enumerate(self.class_counts()) if c == 0]
        if missing:
            raise DataFormatError(f"declared classes with no labeled pixels: {missing}")
        return self


def synthesize_scene(height, width, bands, num_classes, seed):
    """Deterministic toy scene; the converter reproduces this byte rule."""
    rng = np.random.default_rng(seed)
    reflectance = rng.random((height, width, bands), dtype=np.float32)
    grid = np.arange(height * width, dtype=np.int64).reshape(height, width)
    labels = (grid % (num_classes + 1)).astype(np.uint16)
    names = [f"class_{i}" for i in range(1, num_classes + 1)]
    return HsiCube(reflectance, labels, names).validate()


# -- HSIF serialization ------------------------------------------------------


def save_hsif(cube, path):
    cube.validate()
    h, w, v = cube.reflectance.shape
    blob = bytearray()
    blob += HSIF_MAGIC
    blob += struct.pack("<H", HSIF_VERSION)
    blob += struct.pack("<IIII", h, w, v, cube.num_classes)
    bands_first = np.ascontiguousarray(cube.reflectance.transpose(2, 0, 1), dtype="<f4")
    blob += bands_first.tobytes()
    blob += np.ascontiguousarray(cube.labels, dtype="<u2").tobytes()
    for name in cube.class_names:
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Cursor:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, count, what):
        if self.pos + count > len(self.blob):
            raise TruncationError(
                f"file truncated while reading {what}: expected {count} more bytes, "
                f"found {len(self.blob) - self.pos}",
                offset=self.pos,
            )
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_hsif(path):
    """Parse an HSIF file; checksum-verified, errors carry byte offsets."""
    with open(path, "rb") as fh:
        blob = fh.read()
    cur = _Cursor(blob)
    magic = cur.take(4, "magic")
    if magic != HSIF_MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {HSIF_MAGIC!r}", offset=0)
    (version,) = cur.unpack("<H", "version")
    if version != HSIF_VERSION:
        raise VersionError(f"unsupported format version {version}", offset=4)
    h, w, v, c = cur.unpack("<IIII", "header extents")
    data_bytes = cur.take(4 * h * w * v, "reflectance values")
    reflectance = (
        np.frombuffer(data_bytes, dtype="<f4").reshape(v, h, w).transpose(1, 2, 0).copy()
    )
    labels = np.frombuffer(cur.take(2 * h * w, "label map"), dtype="<u2").reshape(h, w).copy()
    names = []
    for i in range(c):
        (name_len,) = cur.unpack("<H", f"class name {i + 1} length")
        names.append(cur.take(name_len, f"class name {i + 1}").decode("utf-8"))
    crc_offset = cur.pos
    (stored_crc,) = cur.unpack("<I", "checksum")
    if cur.pos != len(blob):
        raise TruncationError(
            f"{len(blob) - cur.pos} unexpected trailing bytes", offset=cur.pos
        )
    actual = zlib.crc32(blob[:crc_offset])
    if actual != stored_crc:
        raise ChecksumError(
            f"checksum mismatch: stored 0x{stored_crc:08x}, computed 0x{actual:08x}",
            offset=crc_offset,
        )
    return HsiCube(reflectance, labels.astype(np.int64), names).validate()


# -- PCA ---------------------------------------------------------------------


def pca_fit(reflectance, n_components):
    """Principal axes of the band covariance over all pixels.

    Returns (components [V, n], band mean [V], eigenvalues [n] descending).
    Sign convention: each component's largest-magnitude loading is positive.
    """
    v = reflectance.shape[-1]
    if n_components > v:
        raise ConfigError(f"cannot keep {n_components} components of {v} bands")
    if n_components < 1:
        raise ConfigError(f"component count must be >= 1, got {n_components}")
    flat = reflectance.reshape(-1, v).astype(np.float64)
    mean = flat.mean(axis=0)
    centered = flat - mean
    denom = max(flat.shape[0] - 1, 1)
    cov = centered.T @ centered / denom
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:n_components]
    components = eigenvectors[:, order]
    eigenvalues = eigenvalues[order]
    anchor = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[anchor, np.arange(n_components)])
    signs[signs == 0] = 1.0
    return components * signs, mean, eigenvalues


def pca_reduce(cube, n_components):
    """Project the cube onto its top principal bands (fit on all pixels)."""
    components, mean, _ = pca_fit(cube.reflectance, n_components)
    flat = cube.reflectance.reshape(-1, cube.bands).astype(np.float64)
    projected = (flat - mean) @ components
    reduced = projected.reshape(cube.height, cube.width, n_components).astype(np.float32)
    return HsiCube(reduced, cube.labels, list(cube.class_names))


def normalize_bands(reflectance):
    """Min-max each band to [0, 1]; constant bands map to 0."""
    lo = reflectance.min(axis=(0, 1))
    span = reflectance.max(axis=(0, 1)) - lo
    safe = np.where(span > 0, span, 1.0)
    out = (reflectance - lo) / safe
    return np.where(span > 0, out, 0.0).astype(np.float32)


# -- patches and splits ------------------------------------------------------


@dataclass
class PatchSet:
    """Labeled patches over a normalized, mirror-padded cube.

    Patches are materialized on demand from the padded volume (one patch per
    labeled pixel, centered on it), so the set costs one cube, not one cube
    per patch.
    """

    padded: np.ndarray  # [H + 2*pad, W + 2*pad, L]
    coords: np.ndarray  # [n, 2] source (row, col) per patch
    labels: np.ndarray  # [n] classes 1..C
    class_names: list
    patch_size: int
    train_indices: np.ndarray | None = None
    test_indices: np.ndarray | None = None
    seed: int | None = None
    channels: int = field(init=False)

    def __post_init__(self):
        self.channels = self.padded.shape[-1]

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def scene_shape(self):
        pad = 2 * (self.patch_size // 2)
        return (self.padded.shape[0] - pad, self.padded.shape[1] - pad)

    def patch(self, index):
        r, c = self.coords[index]
        b = self.patch_size
        return self.padded[r : r + b, c : c + b, :]

    def batch(self, indices):
        return np.stack([self.patch(i) for i in indices])

    def class_counts(self, indices=None):
        labels = self.labels if indices is None else self.labels[indices]
        return np.bincount(labels, minlength=self.num_classes + 1)[1:]


def extract_patches(cube, patch_size):
    """One centered patch per labeled pixel; mirror padding at scene borders.

    The cube is min-max normalized per band (once, before extraction).
    """
    if patch_size % 2 == 0 or patch_size < 1:
        raise ConfigError(f"patch size must be odd and positive, got {patch_size}")
    cube.validate()
    pad = patch_size // 2
    normalized = normalize_bands(cube.reflectance)
    padded = np.pad(normalized, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    coords = np.argwhere(cube.labels > 0)
    labels = cube.labels[coords[:, 0], coords[:, 1]].astype(np.int64)
    return PatchSet(padded, coords, labels, list(cube.class_names), patch_size)


def stratified_split(patchset, per_class_train, seed):
    """Seeded per-class draw of training patches; the rest become test.

    ``per_class_train`` holds one count per class in class-id order. The same
    seed always reproduces the same index lists.
    """
    c = patchset.num_classes
    if len(per_class_train) != c:
        raise ConfigError(
            f"need {c} per-class train counts, got {len(per_class_train)}"
        )
    rng = np.random.default_rng(seed)
    train, test = [], []
    for class_id in range(1, c + 1):
        pool = np.flatnonzero(patchset.labels == class_id)
        need = int(per_class_train[class_id - 1])
        if need < 1 or need >= pool.size:
            name = patchset.class_names[class_id - 1]
            raise ConfigError(
                f"class '{name}': cannot draw {need} train samples from {pool.size} "
                f"(need at least 1 and at least 1 left for test)"
            )
        perm = rng.permutation(pool.size)
        train.append(pool[perm[:need]])
        test.append(pool[perm[need:]])
    return PatchSet(
        patchset.padded,
        patchset.coords,
        patchset.labels,
        list(patchset.class_names),
        patchset.patch_size,
        train_indices=np.sort(np.concatenate(train)),
        test_indices=np.sort(np.concatenate(test)),
        seed=int(seed),
    )


def standard_train_counts(patchset):
    """Bundled protocol counts when the class count matches a known scene and
    the counts are feasible; otherwise a 10% per-class fraction (min 1)."""
    available = patchset.class_counts()
    table = TRAIN_COUNT_TABLES.get(patchset.num_classes)
    if table is not None and all(t < a for t, a in zip(table, available)):
        return list(table)
    return [max(1, int(a * FALLBACK_TRAIN_FRACTION)) for a in available]
