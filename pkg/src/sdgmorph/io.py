"""On-disk formats: SDGV volumes, SDGC checkpoints and sample manifests.

SDGV (little-endian)::

    offset  size  field
    0       4     magic b"SDGV"
    4       4     version u32 = 1
    8       12    D, H, W as u32
    20      1     label u8
    21      1     domain u8
    22      2     reserved, zero
    24      4*N   float32 values, index ((z*H)+y)*W+x

SDGC::

    magic b"SDGC", version u32, 32-byte config digest, then until EOF one
    record per parameter: name length u16, UTF-8 name, rank u8,
    extents u32 * rank, float64 values.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .phantoms import LabeledSample

SDGV_MAGIC = b"SDGV"
SDGC_MAGIC = b"SDGC"
SDGV_VERSION = 1
SDGC_VERSION = 1
SDGV_HEADER = struct.Struct("<4sI3IBB2s")


class FormatError(Exception):
    """Malformed file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


def encode_volume(sample: LabeledSample) -> bytes:
    vol = np.asarray(sample.volume)
    if vol.ndim != 3:
        raise ValueError(f"volume must be [D, H, W], got {vol.shape}")
    if not 0 <= sample.domain <= 255:
        raise ValueError(f"domain id {sample.domain} does not fit in a byte")
    D, H, W = vol.shape
    header = SDGV_HEADER.pack(SDGV_MAGIC, SDGV_VERSION, D, H, W, sample.label,
                              sample.domain, b"\0\0")
    return header + vol.astype("<f4").tobytes(order="C")


def decode_volume(data: bytes, path="<bytes>") -> LabeledSample:
    if len(data) < 4 or data[:4] != SDGV_MAGIC:
        raise FormatError(path, 0, f"bad magic {data[:4]!r}")
    if len(data) < SDGV_HEADER.size:
        raise FormatError(path, len(data), "truncated header")
    _, version, D, H, W, label, domain, _ = SDGV_HEADER.unpack_from(data)
    if version != SDGV_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    if label > 2:
        raise FormatError(path, 20, f"label {label} out of range")
    need = SDGV_HEADER.size + 4 * D * H * W
    if len(data) < need:
        raise FormatError(path, len(data), f"truncated payload, expected {need} bytes")
    if len(data) > need:
        raise FormatError(path, need, "trailing bytes after payload")
    vol = np.frombuffer(data, dtype="<f4", count=D * H * W, offset=SDGV_HEADER.size)
    return LabeledSample(vol.reshape(D, H, W).astype(np.float64), int(label), int(domain))


def save_volume(path, sample: LabeledSample):
    Path(path).write_bytes(encode_volume(sample))


def load_volume(path) -> LabeledSample:
    return decode_volume(Path(path).read_bytes(), path)


def config_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def encode_checkpoint(params: dict, digest: bytes) -> bytes:
    if len(digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    parts = [SDGC_MAGIC, struct.pack("<I", SDGC_VERSION), digest]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(data: bytes, path="<bytes>") -> tuple:
    if data[:4] != SDGC_MAGIC:
        raise FormatError(path, 0, f"bad magic {data[:4]!r}")
    if len(data) < 40:
        raise FormatError(path, len(data), "truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != SDGC_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    digest = data[8:40]
    params = {}
    pos = 40

    def need(n, what):
        if pos + n > len(data):
            raise FormatError(path, pos, f"truncated {what}")

    while pos < len(data):
        need(2, "name length")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(n, "name")
        try:
            name = data[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(path, pos, "name is not UTF-8") from None
        pos += n
        need(1, "rank")
        rank = data[pos]
        pos += 1
        need(4 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape, dtype=np.int64))
        need(8 * count, f"values of {name}")
        params[name] = np.frombuffer(data, "<f8", count, pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return params, digest


def save_checkpoint(path, params: dict, digest: bytes):
    Path(path).write_bytes(encode_checkpoint(params, digest))


def load_checkpoint(path) -> tuple:
    return decode_checkpoint(Path(path).read_bytes(), path)


MANIFEST = "manifest.tsv"


def write_dataset(root, samples: list, subdir: str = "") -> list:
    """Write samples as SDGV files; returns manifest lines."""
    root = Path(root)
    lines = []
    for i, s in enumerate(samples):
        rel = Path(subdir) / f"d{s.domain}_{i:05d}.sdgv"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        save_volume(root / rel, s)
        lines.append(f"{rel.as_posix()}\t{s.label}\t{s.domain}")
    return lines


def write_manifest(root, lines: list):
    Path(root, MANIFEST).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(root, domain: int = None) -> list:
    """Load every sample listed in ``root/manifest.tsv`` (optionally one domain)."""
    root = Path(root)
    path = root / MANIFEST
    text = path.read_text(encoding="utf-8")
    samples = []
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), 1):
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 3 or not fields[1].isdigit() or not fields[2].isdigit():
            raise FormatError(path, offset, f"line {lineno}: expected 'path<TAB>label<TAB>domain'")
        offset += len(line.encode("utf-8"))
        label, dom = int(fields[1]), int(fields[2])
        if domain is not None and dom != domain:
            continue
        s = load_volume(root / fields[0])
        if (s.label, s.domain) != (label, dom):
            raise FormatError(root / fields[0], 20, "label/domain disagree with manifest")
        samples.append(s)
    return samples
