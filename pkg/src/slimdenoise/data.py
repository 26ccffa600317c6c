"""Synthetic patches, PGM images and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic     8 bytes  b"SLIMCKPT"
    version   u32
    spec      u64      FNV-1a digest of the canonical backbone spec JSON
    sections  u32
    repeated per section:
        name_len u16, name utf-8
        kind     u8    0 = tensor table, 1 = JSON
        length   u64
        digest   u64   FNV-1a of the payload
        payload
    tensor table payload:
        count u32, then per tensor: name_len u16, name, ndim u8, dims u32 * ndim,
        float32 data (little-endian, C order)
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SLIMCKPT"
FORMAT_VERSION = 1
_TENSORS, _JSON = 0, 1


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class PatchPair:
    clean: np.ndarray
    noisy: np.ndarray
    sigma: float


@dataclass
class PatchSet:
    clean: np.ndarray  # (N, 1, P, P) float32 in [0, 1]
    noisy: np.ndarray
    sigma: np.ndarray  # (N,)

    def __len__(self):
        return len(self.clean)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return PatchPair(self.clean[i:i + 1], self.noisy[i:i + 1], float(self.sigma[i]))
        return PatchSet(self.clean[i], self.noisy[i], self.sigma[i])


def _clean_patch(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = rng.uniform(0.25, 0.75)
    gx, gy = rng.uniform(-0.2, 0.2, size=2)
    img = base + gx * (xx - 0.5) + gy * (yy - 0.5)
    for _ in range(rng.integers(1, 6)):
        level = rng.uniform(0.15, 0.85)
        cx, cy = rng.uniform(0, 1, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.35)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        else:
            hw, hh = rng.uniform(0.05, 0.3, size=2)
            mask = (np.abs(xx - cx) < hw) & (np.abs(yy - cy) < hh)
        shade = rng.uniform(-0.1, 0.1) * (xx - cx)
        img = np.where(mask, level + shade, img)
    if rng.random() < 0.5:
        freq = rng.uniform(2, 8)
        theta = rng.uniform(0, np.pi)
        img = img + rng.uniform(0.02, 0.08) * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    return np.clip(img, 0.0, 1.0)


def synth_dataset(seed: int, count: int, patch_size: int = 32,
                  sigma_range: tuple[float, float] = (10 / 255, 50 / 255)) -> PatchSet:
    """Piecewise-smooth clean patches plus clipped Gaussian noise.

    ``sigma_range`` is in normalized intensity units; each patch draws its own
    sigma uniformly. Patch ``i`` depends only on (seed, i).
    """
    lo, hi = sigma_range
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= lo <= hi:
        raise ValueError(f"invalid sigma range {sigma_range}")
    clean = np.empty((count, 1, patch_size, patch_size), np.float32)
    noisy = np.empty_like(clean)
    sigma = np.empty(count, np.float32)
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        rng = np.random.default_rng(child)
        c = _clean_patch(rng, patch_size)
        s = rng.uniform(lo, hi) if hi > lo else lo
        clean[i, 0] = c
        noisy[i, 0] = np.clip(c + s * rng.standard_normal(c.shape), 0.0, 1.0)
        sigma[i] = s
    return PatchSet(clean, noisy, sigma)


# ---------------------------------------------------------------------------
# PGM


class PGMError(ValueError):
    pass


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def load_pgm(path) -> np.ndarray:
    """Binary P5 PGM with maxval 255 as a (1, 1, H, W) float32 tensor in [0, 1]."""
    raw = Path(path).read_bytes()
    pos, tokens = 0, []
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise PGMError(f"{path}: malformed PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PGMError(f"{path}: malformed PGM header") from exc
    if maxval != 255 or width < 1 or height < 1:
        raise PGMError(f"{path}: unsupported PGM ({width}x{height}, maxval {maxval})")
    if pos >= len(raw) or raw[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise PGMError(f"{path}: missing whitespace after PGM header")
    payload = raw[pos + 1:pos + 1 + width * height]
    if len(payload) != width * height:
        raise PGMError(f"{path}: truncated payload ({len(payload)} of {width * height} bytes)")
    img = np.frombuffer(payload, np.uint8).reshape(height, width)
    return (img.astype(np.float32) / 255.0)[None, None]


def save_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 4:
        if img.shape[:2] != (1, 1):
            raise PGMError(f"can only save a single grayscale image, got {img.shape}")
        img = img[0, 0]
    if img.ndim != 2:
        raise PGMError(f"expected a 2-D image, got {img.shape}")
    q = np.round(np.clip(img.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + q.tobytes())


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint (bad magic) or structurally invalid."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    """Payload or spec digest does not match."""


class CheckpointTruncatedError(CheckpointError):
    pass


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def spec_digest(spec) -> int:
    return fnv1a64(spec.canonical().encode())


@dataclass
class Checkpoint:
    spec_digest: int
    tensors: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    meta: dict[str, object] = field(default_factory=dict)

    def has(self, section: str) -> bool:
        return section in self.tensors or section in self.meta


def _pack_tensors(table: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(table))]
    for name, arr in table.items():
        arr = np.asarray(arr, dtype="<f4")
        bname = name.encode()
        out.append(struct.pack("<H", len(bname)) + bname + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"{self.what}: truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_tensors(payload: bytes, what: str) -> dict[str, np.ndarray]:
    r = _Reader(payload, what)
    (count,) = r.unpack("<I")
    table = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        table[name] = np.frombuffer(r.take(4 * size), "<f4").astype(np.float32).reshape(shape)
    if r.pos != len(payload):
        raise CheckpointFormatError(f"{what}: {len(payload) - r.pos} trailing bytes in tensor table")
    return table


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    sections = [(name, _TENSORS, _pack_tensors(table)) for name, table in ckpt.tensors.items()]
    sections += [(name, _JSON, json.dumps(obj, sort_keys=True).encode()) for name, obj in ckpt.meta.items()]
    out = [MAGIC, struct.pack("<IQI", FORMAT_VERSION, ckpt.spec_digest, len(sections))]
    for name, kind, payload in sections:
        bname = name.encode()
        out.append(struct.pack("<H", len(bname)) + bname)
        out.append(struct.pack("<BQQ", kind, len(payload), fnv1a64(payload)))
        out.append(payload)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


def load_checkpoint(path, expected_spec_digest: int | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    r = _Reader(buf, str(path))
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    version, digest, count = r.unpack("<IQI")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    ckpt = Checkpoint(digest)
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode(errors="replace")
        kind, length, payload_digest = r.unpack("<BQQ")
        payload = r.take(length)
        if fnv1a64(payload) != payload_digest:
            raise CheckpointDigestError(f"{path}: digest mismatch in section {name!r}")
        if kind == _TENSORS:
            ckpt.tensors[name] = _unpack_tensors(payload, f"{path}:{name}")
        elif kind == _JSON:
            ckpt.meta[name] = json.loads(payload)
        else:
            raise CheckpointFormatError(f"{path}: unknown section kind {kind}")
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{path}: {len(buf) - r.pos} trailing bytes")
    if "spec" in ckpt.meta:
        stored = fnv1a64(json.dumps(ckpt.meta["spec"], sort_keys=True).encode())
        if stored != digest:
            raise CheckpointDigestError(f"{path}: spec digest does not match the stored spec")
    if expected_spec_digest is not None and digest != expected_spec_digest:
        raise CheckpointDigestError(f"{path}: checkpoint was written for a different backbone spec")
    return ckpt
