"""On-disk formats: tensor records, checkpoint containers, PGM/TIFF images.

Two binary formats are native to the toolkit. A tensor record holds one
row-major float32 array: magic ``MDTN``, a version byte, a dtype code
(0 = float32), a rank byte, the shape as little-endian 64-bit integers,
then the payload. A container holds a text manifest plus named tensor
records, sorted by name so identical contents always serialize to
identical bytes: magic ``MDTC``, version byte, manifest length and bytes,
entry count, then (name length, name, tensor record) triples.

Image ingest covers 8/16-bit PGM (both the ASCII ``P2`` and binary ``P5``
variants), uncompressed single-strip grayscale TIFF at 8/16/32 bits, and
rank-2 tensor records. Readers return raw sample values as float32 along
with an :class:`ImageMeta` so writers can reproduce the source format.

Manifests come in two text flavors: line-oriented ``key=value`` (used by
checkpoints and config files) and one-path-per-line corpus lists. Both
skip blank lines and ``#`` comments.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

MAGIC_TENSOR = b"MDTN"
MAGIC_CONTAINER = b"MDTC"
FORMAT_VERSION = 1
DTYPE_F32 = 0

_MAX_RANK = 32


def pack_tensor(arr) -> bytes:
    """Serialize one array as a float32 tensor record."""
    a = np.asarray(arr, dtype="<f4")
    if a.ndim > _MAX_RANK:
        raise FormatError(f"tensor rank {a.ndim} exceeds limit {_MAX_RANK}")
    head = MAGIC_TENSOR + struct.pack("<BBB", FORMAT_VERSION, DTYPE_F32, a.ndim)
    dims = struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b""
    return head + dims + a.tobytes(order="C")


def unpack_tensor(buf: bytes, offset: int = 0):
    """Parse one tensor record at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC_TENSOR:
        raise FormatError("bad magic: not a tensor record")
    if len(buf) < offset + 7:
        raise FormatError("truncated tensor header")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    if code != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {code}")
    if rank > _MAX_RANK:
        raise FormatError(f"tensor rank {rank} exceeds limit {_MAX_RANK}")
    pos = offset + 7
    if len(buf) < pos + 8 * rank:
        raise FormatError("truncated tensor shape")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
    pos += 8 * rank
    count = 1
    for d in shape:
        count *= d
    nbytes = 4 * count
    if len(buf) < pos + nbytes:
        raise FormatError("truncated tensor payload")
    a = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
    return a.reshape(shape).astype(np.float32), pos + nbytes


def save_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        f.write(pack_tensor(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    try:
        arr, end = unpack_tensor(buf)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor record")
    return arr


def format_manifest(pairs) -> str:
    """Render a mapping as key=value lines, preserving insertion order."""
    lines = []
    for key, value in dict(pairs).items():
        text = str(value)
        if "=" in key or any(c in "\n\r#" for c in key) or not key.strip():
            raise FormatError(f"manifest key not representable: {key!r}")
        if "\n" in text or "\r" in text:
            raise FormatError(f"manifest value for {key!r} contains a newline")
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n" if lines else ""


def parse_manifest(text: str, source: str = "manifest") -> dict:
    """Parse key=value lines; blank lines and # comments allowed."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise FormatError(f"{source}:{lineno}: empty key")
        if key in out:
            raise FormatError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def pack_container(arrays, manifest) -> bytes:
    """Serialize named arrays plus a manifest; entries sorted by name."""
    man = format_manifest(manifest).encode("utf-8")
    parts = [MAGIC_CONTAINER, struct.pack("<B", FORMAT_VERSION),
             struct.pack("<I", len(man)), man,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        nb = name.encode("utf-8")
        if not nb or len(nb) > 0xFFFF:
            raise FormatError(f"container entry name not representable: {name!r}")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(pack_tensor(arrays[name]))
    return b"".join(parts)


def unpack_container(buf: bytes):
    """Parse a container; returns (arrays dict, manifest dict)."""
    if buf[:4] != MAGIC_CONTAINER:
        raise FormatError("bad magic: not a container")
    if len(buf) < 9:
        raise FormatError("truncated container header")
    (version,) = struct.unpack_from("<B", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    (man_len,) = struct.unpack_from("<I", buf, 5)
    pos = 9
    if len(buf) < pos + man_len + 4:
        raise FormatError("truncated container manifest")
    manifest = parse_manifest(buf[pos:pos + man_len].decode("utf-8"))
    pos += man_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays: dict = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError("truncated container entry")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if name in arrays:
            raise FormatError(f"duplicate container entry {name!r}")
        arrays[name], pos = unpack_tensor(buf, pos)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after container entries")
    return arrays, manifest


def save_container(path, arrays, manifest) -> None:
    with open(path, "wb") as f:
        f.write(pack_container(arrays, manifest))


def load_container(path):
    with open(path, "rb") as f:
        buf = f.read()
    try:
        return unpack_container(buf)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


def read_corpus_manifest(path) -> list:
    """Read a one-path-per-line corpus list; relative paths resolve
    against the manifest's own directory."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            out.append(line if os.path.isabs(line) else os.path.join(base, line))
    if not out:
        raise FormatError(f"{path}: corpus manifest lists no files")
    return out


@dataclass(frozen=True)
class ImageMeta:
    """How an image was stored, enough to write a matching output.

    ``kind`` is one of pgm-ascii, pgm, tiff, mdtn. ``maxval`` is the
    full-scale sample value (1.0 for float storage); readers return raw
    sample values, so callers divide by ``maxval`` for [0,1] data.
    """
    kind: str
    bit_depth: int
    maxval: float


def _pgm_tokens(buf: bytes):
    """Yield whitespace-separated header tokens, honoring # comments."""
    pos = 0
    while True:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos] not in (0x0A, 0x0D):
                pos += 1
            continue
        if pos >= len(buf):
            return
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        yield buf[start:pos], pos


def read_pgm(path):
    """Read a P2 or P5 grayscale image; returns (float32 samples, meta)."""
    with open(path, "rb") as f:
        buf = f.read()
    toks = _pgm_tokens(buf)
    try:
        magic, _ = next(toks)
    except StopIteration:
        raise FormatError(f"{path}: malformed PGM header") from None
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"{path}: not a PGM image (magic {magic!r})")
    try:
        (w_tok, _), (h_tok, _), (max_tok, end) = next(toks), next(toks), next(toks)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except (StopIteration, ValueError):
        raise FormatError(f"{path}: malformed PGM header") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad PGM dimensions {width}x{height} maxval {maxval}")
    if magic == b"P5":
        # exactly one whitespace byte separates the header from samples
        data = buf[end + 1:]
        if maxval < 256:
            n, dt = width * height, np.uint8
        else:
            n, dt = width * height, ">u2"  # 16-bit samples are big-endian
        expect = n * np.dtype(dt).itemsize
        if len(data) < expect:
            raise FormatError(f"{path}: PGM payload truncated")
        img = np.frombuffer(data[:expect], dtype=dt).astype(np.float32)
    else:
        try:
            values = [int(t) for t, _ in _pgm_tokens(buf[end:])]
        except ValueError:
            raise FormatError(f"{path}: non-numeric P2 sample") from None
        if len(values) != width * height:
            raise FormatError(f"{path}: P2 sample count {len(values)}, "
                              f"expected {width * height}")
        img = np.asarray(values, dtype=np.float32)
    if img.size and img.max() > maxval:
        raise FormatError(f"{path}: PGM sample exceeds maxval {maxval}")
    kind = "pgm" if magic == b"P5" else "pgm-ascii"
    depth = 8 if maxval < 256 else 16
    return img.reshape(height, width), ImageMeta(kind, depth, float(maxval))


def write_pgm(path, img01, bit_depth: int = 16, ascii_form: bool = False) -> None:
    """Write a [0,1] image as PGM, scaling to full range and rounding."""
    if bit_depth not in (8, 16):
        raise FormatError(f"PGM bit depth must be 8 or 16, got {bit_depth}")
    img01 = np.asarray(img01, dtype=np.float64)
    if img01.ndim != 2:
        raise FormatError(f"PGM images are 2-D, got shape {img01.shape}")
    maxval = (1 << bit_depth) - 1
    q = np.rint(np.clip(img01, 0.0, 1.0) * maxval).astype(np.uint32)
    h, w = img01.shape
    if ascii_form:
        body = []
        for row in q:
            body.append(" ".join(str(int(v)) for v in row))
        text = f"P2\n{w} {h}\n{maxval}\n" + "\n".join(body) + "\n"
        with open(path, "w", encoding="ascii") as f:
            f.write(text)
        return
    payload = q.astype(np.uint8 if bit_depth == 8 else ">u2").tobytes()
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(payload)


# TIFF tag ids used by the minimal reader/writer.
_T_WIDTH, _T_HEIGHT, _T_BITS, _T_COMPRESSION = 256, 257, 258, 259
_T_PHOTOMETRIC, _T_STRIP_OFFSETS, _T_SAMPLES = 262, 273, 277
_T_ROWS_PER_STRIP, _T_STRIP_COUNTS, _T_SAMPLE_FORMAT = 278, 279, 339

_TIFF_TYPE_SIZE = {1: 1, 3: 2, 4: 4}


def _tiff_entry_values(buf, entry_off, bo):
    tag, typ, count = struct.unpack_from(bo + "HHI", buf, entry_off)
    if typ not in _TIFF_TYPE_SIZE:
        return tag, None
    size = _TIFF_TYPE_SIZE[typ] * count
    where = entry_off + 8 if size <= 4 else struct.unpack_from(bo + "I", buf, entry_off + 8)[0]
    if where + size > len(buf):
        raise FormatError("TIFF tag data out of bounds")
    fmt = {1: "B", 3: "H", 4: "I"}[typ]
    return tag, list(struct.unpack_from(bo + str(count) + fmt, buf, where))


def read_tiff(path):
    """Read an uncompressed single-strip grayscale TIFF (8/16/32-bit)."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 8 or buf[:2] not in (b"II", b"MM"):
        raise FormatError(f"{path}: not a TIFF file")
    bo = "<" if buf[:2] == b"II" else ">"
    magic, ifd_off = struct.unpack_from(bo + "HI", buf, 2)
    if magic != 42:
        raise FormatError(f"{path}: bad TIFF magic number {magic}")
    if ifd_off + 2 > len(buf):
        raise FormatError(f"{path}: TIFF directory out of bounds")
    (n_entries,) = struct.unpack_from(bo + "H", buf, ifd_off)
    tags: dict = {}
    for i in range(n_entries):
        off = ifd_off + 2 + 12 * i
        if off + 12 > len(buf):
            raise FormatError(f"{path}: truncated TIFF directory")
        tag, values = _tiff_entry_values(buf, off, bo)
        if values is not None:
            tags[tag] = values

    def one(tag, default=None):
        if tag not in tags:
            if default is None:
                raise FormatError(f"{path}: TIFF missing required tag {tag}")
            return default
        return tags[tag][0]

    width, height = one(_T_WIDTH), one(_T_HEIGHT)
    bits = one(_T_BITS, 1)
    if one(_T_COMPRESSION, 1) != 1:
        raise FormatError(f"{path}: compressed TIFF not supported")
    if one(_T_PHOTOMETRIC) != 1:
        raise FormatError(f"{path}: only BlackIsZero grayscale TIFF supported")
    if one(_T_SAMPLES, 1) != 1:
        raise FormatError(f"{path}: multi-sample TIFF not supported")
    offsets = tags.get(_T_STRIP_OFFSETS)
    counts = tags.get(_T_STRIP_COUNTS)
    if not offsets or not counts:
        raise FormatError(f"{path}: TIFF missing strip location tags")
    if len(offsets) != 1 or len(counts) != 1:
        raise FormatError(f"{path}: multi-strip TIFF not supported")
    fmt = one(_T_SAMPLE_FORMAT, 1)
    if bits == 8 and fmt == 1:
        dt, maxval, depth = np.uint8, 255.0, 8
    elif bits == 16 and fmt == 1:
        dt, maxval, depth = np.dtype(bo + "u2"), 65535.0, 16
    elif bits == 32 and fmt == 3:
        dt, maxval, depth = np.dtype(bo + "f4"), 1.0, 32
    elif bits == 32 and fmt == 1:
        dt, maxval, depth = np.dtype(bo + "u4"), float(2 ** 32 - 1), 32
    else:
        raise FormatError(f"{path}: unsupported TIFF sample layout "
                          f"({bits}-bit, format {fmt})")
    need = width * height * np.dtype(dt).itemsize
    if counts[0] < need or offsets[0] + need > len(buf):
        raise FormatError(f"{path}: TIFF strip too small for {width}x{height}")
    img = np.frombuffer(buf, dtype=dt, count=width * height, offset=offsets[0])
    return (img.astype(np.float32).reshape(height, width),
            ImageMeta("tiff", depth, maxval))


def write_tiff(path, img01, bit_depth: int = 16) -> None:
    """Write a [0,1] image as a little-endian single-strip grayscale TIFF.

    8 and 16 bits store scaled unsigned samples; 32 stores float32 as-is.
    """
    img01 = np.asarray(img01, dtype=np.float64)
    if img01.ndim != 2:
        raise FormatError(f"TIFF images are 2-D, got shape {img01.shape}")
    h, w = img01.shape
    if bit_depth == 8:
        payload = np.rint(np.clip(img01, 0, 1) * 255).astype("<u1").tobytes()
        fmt = 1
    elif bit_depth == 16:
        payload = np.rint(np.clip(img01, 0, 1) * 65535).astype("<u2").tobytes()
        fmt = 1
    elif bit_depth == 32:
        payload = img01.astype("<f4").tobytes()
        fmt = 3
    else:
        raise FormatError(f"TIFF bit depth must be 8, 16 or 32, got {bit_depth}")

    entries = [
        (_T_WIDTH, 4, 1, w),
        (_T_HEIGHT, 4, 1, h),
        (_T_BITS, 3, 1, bit_depth),
        (_T_COMPRESSION, 3, 1, 1),
        (_T_PHOTOMETRIC, 3, 1, 1),
        (_T_STRIP_OFFSETS, 4, 1, 0),  # patched once the layout is known
        (_T_SAMPLES, 3, 1, 1),
        (_T_ROWS_PER_STRIP, 4, 1, h),
        (_T_STRIP_COUNTS, 4, 1, len(payload)),
        (_T_SAMPLE_FORMAT, 3, 1, fmt),
    ]
    ifd_off = 8
    data_off = ifd_off + 2 + 12 * len(entries) + 4
    entries[5] = (_T_STRIP_OFFSETS, 4, 1, data_off)
    parts = [b"II", struct.pack("<HI", 42, ifd_off),
             struct.pack("<H", len(entries))]
    for tag, typ, count, value in entries:
        if typ == 3:
            packed = struct.pack("<HH", value, 0)
        else:
            packed = struct.pack("<I", value)
        parts.append(struct.pack("<HHI", tag, typ, count) + packed)
    parts.append(struct.pack("<I", 0))  # no next directory
    parts.append(payload)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_image(path):
    """Read any ingestible image; returns (float32 samples, ImageMeta).

    Dispatches on extension, falling back to magic-byte sniffing.
    """
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        return read_pgm(path)
    if ext in (".tif", ".tiff"):
        return read_tiff(path)
    if ext == ".mdtn":
        arr = load_tensor(path)
        if arr.ndim != 2:
            raise FormatError(f"{path}: image tensors must be rank 2, got rank {arr.ndim}")
        return arr, ImageMeta("mdtn", 32, 1.0)
    with open(path, "rb") as f:
        head = f.read(4)
    if head[:2] in (b"P2", b"P5"):
        return read_pgm(path)
    if head[:2] in (b"II", b"MM"):
        return read_tiff(path)
    if head == MAGIC_TENSOR:
        arr = load_tensor(path)
        if arr.ndim != 2:
            raise FormatError(f"{path}: image tensors must be rank 2, got rank {arr.ndim}")
        return arr, ImageMeta("mdtn", 32, 1.0)
    raise FormatError(f"{path}: unrecognized image format")


def save_image(path, img01, meta: ImageMeta) -> None:
    """Write a [0,1] image in the format described by ``meta``."""
    if meta.kind == "pgm":
        write_pgm(path, img01, bit_depth=meta.bit_depth)
    elif meta.kind == "pgm-ascii":
        write_pgm(path, img01, bit_depth=meta.bit_depth, ascii_form=True)
    elif meta.kind == "tiff":
        write_tiff(path, img01, bit_depth=meta.bit_depth)
    elif meta.kind == "mdtn":
        save_tensor(path, np.asarray(img01, dtype=np.float32))
    else:
        raise FormatError(f"unknown image kind {meta.kind!r}")
