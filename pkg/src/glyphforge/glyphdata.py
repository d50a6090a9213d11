"""Paired glyph ingestion: PGM bitmaps, validation, binary packs, batching.

Input trees hold binary PGM (P5, maxval 255) files named by uppercase hex
codepoint, e.g. ``4E00.pgm``. Validated pairs are serialized into a little-
endian pack file:

    magic "GLYP" | u16 version=1 | u16 side | u32 count
    | count x { u32 codepoint, u64 payload offset }
    | payload: count x (2*side*side bytes: source pixels then target pixels)
    | u32 CRC32 of payload

Offsets are relative to the start of the payload section and strictly
increasing; records are sorted by codepoint so packing is idempotent.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad
from .ndgrad import Tensor

PACK_MAGIC = b"GLYP"
PACK_VERSION = 1

INK_THRESHOLD = 128
MIN_INK_FRACTION = 0.005


class FormatError(ValueError):
    """Malformed input file; carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(ValueError):
    """Stored checksum does not match the payload."""


class ValidationError(ValueError):
    """Inputs violate a pack precondition (e.g. mismatched sides)."""


@dataclass
class GlyphBitmap:
    """Square 8-bit glyph raster: 0 = ink, 255 = background, row-major."""

    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height*width,)
    codepoint: int
    font_id: str = ""

    def ink_fraction(self):
        return float(np.count_nonzero(self.pixels < INK_THRESHOLD)) / self.pixels.size


@dataclass
class PairedSample:
    """One codepoint's (source, target) tensors, normalized into [-1, 1]."""

    source: Tensor
    target: Tensor
    codepoint: int


def _read_pgm_token(buf, pos):
    """Read one whitespace-delimited header token, skipping '#' comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header", offset=start)
    return buf[start:pos], pos


def load_bitmap(path, codepoint=None, font_id=""):
    """Load a binary PGM (P5, maxval 255) file into a GlyphBitmap."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        got = buf[:2].decode("ascii", "replace")
        raise FormatError(f"unsupported PGM variant {got!r}, expected P5", offset=0)
    pos = 2
    try:
        wtok, pos = _read_pgm_token(buf, pos)
        htok, pos = _read_pgm_token(buf, pos)
        mtok, pos = _read_pgm_token(buf, pos)
        width, height, maxval = int(wtok), int(htok), int(mtok)
    except ValueError:
        raise FormatError("non-numeric PGM header field", offset=pos) from None
    if maxval != 255:
        raise FormatError(f"PGM maxval {maxval} unsupported, expected 255", offset=pos)
    pos += 1  # single whitespace byte separates header from payload
    expect = width * height
    payload = buf[pos : pos + expect]
    if len(payload) != expect:
        raise FormatError(
            f"truncated PGM payload: expected {expect} bytes, got {len(payload)}",
            offset=pos + len(payload),
        )
    if codepoint is None:
        stem = os.path.splitext(os.path.basename(path))[0]
        try:
            codepoint = int(stem, 16)
        except ValueError:
            codepoint = 0
    pixels = np.frombuffer(payload, dtype=np.uint8).copy()
    return GlyphBitmap(width, height, pixels, codepoint, font_id)


def write_pgm(path, array2d):
    """Write a 2-d uint8 array as canonical binary PGM (P5)."""
    arr = np.asarray(array2d, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValidationError(f"write_pgm expects a 2-d array, got shape {arr.shape}")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def write_bitmap(bmp, path):
    """Write a GlyphBitmap as canonical binary PGM (P5)."""
    write_pgm(path, bmp.pixels.reshape(bmp.height, bmp.width))


def normalize(bmp, dtype=np.float32):
    """Map 8-bit intensities to [-1, 1] with ink at +1: v -> 1 - 2*(v/255)."""
    v = bmp.pixels.astype(np.float64) / 255.0
    t = (1.0 - 2.0 * v).astype(dtype)
    return Tensor(t.reshape(1, bmp.height, bmp.width))


def denormalize(t):
    """Inverse of normalize: [-1, 1] values back to uint8 intensities."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    v = np.rint(255.0 * (1.0 - arr) / 2.0)
    return np.clip(v, 0, 255).astype(np.uint8)


REJECT_MISSING_SOURCE = "missing_in_source"
REJECT_MISSING_TARGET = "missing_in_target"
REJECT_SIZE_MISMATCH = "size_mismatch"
REJECT_BLANK = "blank_glyph"
REJECT_MALFORMED = "malformed_file"


def _codepoint_files(directory):
    out = {}
    for name in os.listdir(directory):
        stem, ext = os.path.splitext(name)
        if ext.lower() != ".pgm":
            continue
        try:
            cp = int(stem, 16)
        except ValueError:
            continue
        out[cp] = os.path.join(directory, name)
    return out


def scan_pairs(source_dir, target_dir, min_ink_fraction=MIN_INK_FRACTION):
    """Pair codepoints across two glyph trees and validate each pair.

    Returns (valid, rejected): valid is a sorted list of codepoints whose
    bitmaps are square, share one side length, and carry at least
    min_ink_fraction ink pixels in both renders; rejected lists every
    excluded codepoint with one reason.
    """
    src_files = _codepoint_files(source_dir)
    tgt_files = _codepoint_files(target_dir)
    valid = []
    rejected = []
    for cp in sorted(set(src_files) | set(tgt_files)):
        if cp not in tgt_files:
            rejected.append((cp, REJECT_MISSING_TARGET))
            continue
        if cp not in src_files:
            rejected.append((cp, REJECT_MISSING_SOURCE))
            continue
        try:
            src = load_bitmap(src_files[cp], codepoint=cp)
            tgt = load_bitmap(tgt_files[cp], codepoint=cp)
        except FormatError:
            rejected.append((cp, REJECT_MALFORMED))
            continue
        if (
            src.width != src.height
            or tgt.width != tgt.height
            or src.width != tgt.width
        ):
            rejected.append((cp, REJECT_SIZE_MISMATCH))
            continue
        if src.ink_fraction() < min_ink_fraction or tgt.ink_fraction() < min_ink_fraction:
            rejected.append((cp, REJECT_BLANK))
            continue
        valid.append(cp)
    return valid, rejected


@dataclass
class PackSummary:
    path: str
    side: int
    count: int
    bytes_written: int


def pack(pairs, side, out_path):
    """Serialize validated (codepoint, source, target) bitmaps to a pack file.

    pairs: iterable of (codepoint, GlyphBitmap, GlyphBitmap). All bitmaps
    must be square with the given side.
    """
    records = sorted(pairs, key=lambda rec: rec[0])
    for cp, src, tgt in records:
        for which, bmp in (("source", src), ("target", tgt)):
            if bmp.width != side or bmp.height != side:
                raise ValidationError(
                    f"codepoint U+{cp:04X} {which} is {bmp.width}x{bmp.height}, pack side is {side}"
                )
    rec_size = 2 * side * side
    payload = bytearray()
    index = bytearray()
    for i, (cp, src, tgt) in enumerate(records):
        index += struct.pack("<IQ", cp, i * rec_size)
        payload += src.pixels.tobytes()
        payload += tgt.pixels.tobytes()
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    blob = (
        PACK_MAGIC
        + struct.pack("<HHI", PACK_VERSION, side, len(records))
        + bytes(index)
        + bytes(payload)
        + struct.pack("<I", crc)
    )
    with open(out_path, "wb") as fh:
        fh.write(blob)
    return PackSummary(str(out_path), side, len(records), len(blob))


class PackFile:
    """Read-only handle over a validated pack; safe to share across readers."""

    def __init__(self, path, side, codepoints, payload):
        self.path = path
        self.side = side
        self.codepoints = codepoints
        self._payload = payload

    def __len__(self):
        return len(self.codepoints)

    @property
    def count(self):
        return len(self.codepoints)

    def pixels(self, i):
        """Raw (source, target) uint8 arrays of shape (side, side) for record i."""
        s = self.side
        rec = 2 * s * s
        off = i * rec
        src = np.frombuffer(self._payload, dtype=np.uint8, count=s * s, offset=off)
        tgt = np.frombuffer(self._payload, dtype=np.uint8, count=s * s, offset=off + s * s)
        return src.reshape(s, s), tgt.reshape(s, s)

    def sample(self, i, dtype=np.float32):
        src, tgt = self.pixels(i)
        cp = self.codepoints[i]
        sb = GlyphBitmap(self.side, self.side, src.reshape(-1), cp)
        tb = GlyphBitmap(self.side, self.side, tgt.reshape(-1), cp)
        return PairedSample(normalize(sb, dtype), normalize(tb, dtype), cp)

    def indices(self):
        return range(len(self.codepoints))


def open_pack(path):
    """Open and validate a pack file written by pack()."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PACK_MAGIC:
        raise FormatError(f"bad pack magic {blob[:4]!r}", offset=0)
    version, side, count = struct.unpack_from("<HHI", blob, 4)
    if version != PACK_VERSION:
        raise FormatError(f"unsupported pack version {version}", offset=4)
    idx_start = 12
    idx_end = idx_start + 12 * count
    rec_size = 2 * side * side
    pay_end = idx_end + count * rec_size
    if len(blob) != pay_end + 4:
        raise FormatError(
            f"pack length {len(blob)} != expected {pay_end + 4}", offset=len(blob)
        )
    codepoints = []
    prev_off = -1
    for i in range(count):
        cp, off = struct.unpack_from("<IQ", blob, idx_start + 12 * i)
        if off != i * rec_size or off <= prev_off:
            raise FormatError(f"pack index offset {off} out of order at record {i}")
        prev_off = off
        codepoints.append(cp)
    payload = blob[idx_end:pay_end]
    (crc_stored,) = struct.unpack_from("<I", blob, pay_end)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError(f"pack payload CRC mismatch in {path}")
    return PackFile(str(path), side, codepoints, payload)


@dataclass
class PackView:
    """A subset of a pack's records, indexable like the pack itself."""

    pack: PackFile
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    @property
    def side(self):
        return self.pack.side

    @property
    def count(self):
        return len(self.rows)

    @property
    def codepoints(self):
        return [self.pack.codepoints[i] for i in self.rows]

    def sample(self, i, dtype=np.float32):
        return self.pack.sample(self.rows[i], dtype)

    def pixels(self, i):
        return self.pack.pixels(self.rows[i])

    def indices(self):
        return range(len(self.rows))


def as_view(pack_like):
    if isinstance(pack_like, PackView):
        return pack_like
    return PackView(pack_like, list(range(len(pack_like))))


def batch_iter(pack_like, batch, epoch_seed, dtype=np.float32):
    """Yield one epoch of PairedSample batches in a seed-determined order.

    Every record is visited exactly once; the final batch may be short.
    """
    if batch < 1:
        raise ndgrad.ParameterError(f"batch size must be >= 1, got {batch}")
    view = as_view(pack_like)
    gen = np.random.Generator(np.random.Philox(key=epoch_seed & ((1 << 64) - 1)))
    order = gen.permutation(len(view))

    def batches():
        for start in range(0, len(view), batch):
            chunk = order[start : start + batch]
            yield [view.sample(int(i), dtype) for i in chunk]

    return batches()


def split(pack_like, holdout_fraction, seed):
    """Deterministically split a pack into disjoint (train, holdout) views."""
    if not (0.0 <= holdout_fraction < 1.0):
        raise ndgrad.ParameterError(
            f"holdout_fraction must lie in [0,1), got {holdout_fraction}"
        )
    view = as_view(pack_like)
    n = len(view)
    gen = np.random.Generator(np.random.Philox(key=seed & ((1 << 64) - 1)))
    order = gen.permutation(n)
    n_holdout = int(n * holdout_fraction)
    holdout_rows = sorted(view.rows[i] for i in order[:n_holdout])
    train_rows = sorted(view.rows[i] for i in order[n_holdout:])
    return PackView(view.pack, train_rows), PackView(view.pack, holdout_rows)


def stack_batch(samples, requires_grad=False):
    """Stack a list of PairedSample into (N,1,S,S) source/target tensors."""
    src = np.stack([s.source.data for s in samples])
    tgt = np.stack([s.target.data for s in samples])
    return Tensor(src, requires_grad=requires_grad), Tensor(tgt)
