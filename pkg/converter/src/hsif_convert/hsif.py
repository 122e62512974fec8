"""HSIF byte layout: writer and checking reader.

Little-endian throughout: magic "HSIF", u16 version=1, u32 H, W, V, C;
H*W*V float32 reflectance band-sequential (V planes, each H*W row-major);
H*W u16 labels row-major; C class names (u16 byte length + UTF-8); CRC32
(zlib) over every preceding byte.

This mirrors the layout the classifier package reads but shares no code with
it; the file format is the only contract between the two.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"HSIF"
VERSION = 1


class HsifError(ValueError):
    """Malformed or corrupt HSIF content."""


def write_hsif(path, reflectance, labels, class_names):
    reflectance = np.asarray(reflectance, dtype="<f4")
    labels = np.asarray(labels)
    if reflectance.ndim != 3 or labels.shape != reflectance.shape[:2]:
        raise HsifError(
            f"geometry mismatch: data {reflectance.shape}, labels {labels.shape}"
        )
    if labels.min() < 0 or labels.max() > len(class_names):
        raise HsifError(
            f"labels must lie in 0..{len(class_names)}, got "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    h, w, v = reflectance.shape
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    blob += struct.pack("<IIII", h, w, v, len(class_names))
    blob += np.ascontiguousarray(reflectance.transpose(2, 0, 1)).tobytes()
    blob += np.ascontiguousarray(labels, dtype="<u2").tobytes()
    for name in class_names:
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_hsif(path):
    """Parse and CRC-check; returns (reflectance [H,W,V], labels [H,W], names)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(count, what):
        nonlocal pos
        if pos + count > len(blob):
            raise HsifError(f"truncated while reading {what} at byte {pos}")
        out = blob[pos : pos + count]
        pos += count
        return out

    if take(4, "magic") != MAGIC:
        raise HsifError("bad magic, not an HSIF file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise HsifError(f"unsupported version {version}")
    h, w, v, c = struct.unpack("<IIII", take(16, "extents"))
    reflectance = (
        np.frombuffer(take(4 * h * w * v, "reflectance"), dtype="<f4")
        .reshape(v, h, w)
        .transpose(1, 2, 0)
        .copy()
    )
    labels = np.frombuffer(take(2 * h * w, "labels"), dtype="<u2").reshape(h, w).copy()
    names = []
    for i in range(c):
        (length,) = struct.unpack("<H", take(2, f"name {i + 1} length"))
        names.append(take(length, f"name {i + 1}").decode("utf-8"))
    crc_offset = pos
    (stored,) = struct.unpack("<I", take(4, "checksum"))
    if pos != len(blob):
        raise HsifError(f"{len(blob) - pos} unexpected trailing bytes")
    actual = zlib.crc32(blob[:crc_offset])
    if actual != stored:
        raise HsifError(
            f"checksum mismatch: stored 0x{stored:08x}, computed 0x{actual:08x}"
        )
    return reflectance, labels, names


def synthesize(height, width, bands, num_classes, seed):
    """Deterministic toy scene; the classifier's test fixture uses this rule."""
    rng = np.random.default_rng(seed)
    reflectance = rng.random((height, width, bands), dtype=np.float32)
    grid = np.arange(height * width, dtype=np.int64).reshape(height, width)
    labels = (grid % (num_classes + 1)).astype(np.uint16)
    names = [f"class_{i}" for i in range(1, num_classes + 1)]
    return reflectance, labels, names
