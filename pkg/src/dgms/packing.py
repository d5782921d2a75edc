"""Bit-packed deployable layers and the ``QSMD`` packed model file.

Index packing: with 4-bit indices each byte holds two indices, high nibble
first; with 2-bit indices each byte holds four, most significant pair first.
The element count is padded with index 0 (the zero centroid) up to a whole
byte.  Each layer carries a 256-entry extended codebook whose entry ``e`` holds
the 2 (or 4) centroid values that byte ``e`` decodes to.

File layout (all integers little-endian, floats IEEE-754 float32 LE)::

    b"QSMD" | u16 version | u32 n_layers
    per layer:
      u16 name_len | name (utf-8) | u8 bits | u8 ndim | u32 dims[ndim]
      | u32 pad | u8 layout (0=row-major, 1=output-channel-major)
      | u8 n_base | f32 base[n_base]
      | f32 extended[256 * 8/bits]
      | u32 n_bytes | u8 indices[n_bytes]
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .data_io import DataError
from .gm_core import AdaptiveCodebook, LayerGM

MAGIC = b"QSMD"
VERSION = 1
LAYOUTS = {"row": 0, "ocm": 1}
_LAYOUT_NAMES = {v: k for k, v in LAYOUTS.items()}


def lanes_per_byte(bits: int) -> int:
    if bits not in (2, 4):
        raise ValueError(f"packed layers support 2 or 4 bits, got {bits}")
    return 8 // bits


@dataclass
class PackedLayer:
    name: str
    bits: int
    shape: tuple
    layout: str
    pad: int
    base: np.ndarray        # float32, K+1 centroids
    extended: np.ndarray    # float32, (256, 8 // bits)
    indices: np.ndarray     # uint8 packed index stream

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.shape))

    def nbytes_payload(self) -> int:
        return self.indices.size + self.extended.nbytes + self.base.nbytes

    def __eq__(self, other):
        if not isinstance(other, PackedLayer):
            return NotImplemented
        return (self.name == other.name and self.bits == other.bits
                and tuple(self.shape) == tuple(other.shape) and self.layout == other.layout
                and self.pad == other.pad
                and self.base.tobytes() == other.base.tobytes()
                and self.extended.tobytes() == other.extended.tobytes()
                and self.indices.tobytes() == other.indices.tobytes())


def build_extended_codebook(base, bits: int) -> np.ndarray:
    """``(256, 8/bits)`` float32 table: entry ``e`` lists the centroids its bit fields select."""
    lanes = lanes_per_byte(bits)
    values = base.values if isinstance(base, AdaptiveCodebook) else np.asarray(base)
    if len(values) > 2 ** bits:
        raise ValueError(f"{len(values)} centroids do not fit in {bits} bits")
    full = np.zeros(2 ** bits, dtype=np.float32)
    full[:len(values)] = values
    e = np.arange(256)
    mask = 2 ** bits - 1
    fields = np.stack([(e >> (8 - bits * (l + 1))) & mask for l in range(lanes)], axis=1)
    return full[fields]


def pack_indices(idx, bits: int) -> tuple[np.ndarray, int]:
    lanes = lanes_per_byte(bits)
    idx = np.asarray(idx, dtype=np.uint8).reshape(-1)
    if idx.size and idx.max() >= 2 ** bits:
        raise ValueError(f"index {int(idx.max())} does not fit in {bits} bits")
    pad = (-idx.size) % lanes
    idx = np.concatenate([idx, np.zeros(pad, dtype=np.uint8)]).reshape(-1, lanes)
    out = np.zeros(idx.shape[0], dtype=np.uint8)
    for l in range(lanes):
        out |= idx[:, l] << (8 - bits * (l + 1))
    return out, pad


def unpack_indices(stream, bits: int, count: int) -> np.ndarray:
    lanes = lanes_per_byte(bits)
    stream = np.asarray(stream, dtype=np.uint8)
    mask = 2 ** bits - 1
    fields = np.stack([(stream >> (8 - bits * (l + 1))) & mask for l in range(lanes)], axis=1)
    return fields.reshape(-1)[:count]


def pack_layer(weights, gm: LayerGM | AdaptiveCodebook, bits: int, name: str = "",
               layout: str | None = None) -> PackedLayer:
    """Pack hard-quantized weights; every value must equal one of the centroids exactly."""
    w = np.asarray(weights)
    mu = gm.mu if isinstance(gm, LayerGM) else gm.values
    if len(mu) > 2 ** bits:
        raise ValueError(f"{len(mu)} centroids do not fit in {bits} bits")
    flat = w.reshape(-1)
    idx = np.full(flat.size, -1, dtype=np.int64)
    # first match wins so duplicate centroids resolve deterministically
    for k in range(len(mu) - 1, -1, -1):
        idx[flat == mu[k]] = k
    missing = np.flatnonzero(idx < 0)
    if missing.size:
        j = int(missing[0])
        raise ValueError(f"weight {flat[j]!r} at flat index {j} is not a codebook value")
    if layout is None:
        layout = "ocm" if w.ndim == 4 else "row"
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    stream, pad = pack_indices(idx, bits)
    base = np.asarray(mu, dtype=np.float32)
    return PackedLayer(name, bits, tuple(w.shape), layout, pad, base,
                       build_extended_codebook(base, bits), stream)


def layer_indices(layer: PackedLayer) -> np.ndarray:
    return unpack_indices(layer.indices, layer.bits, layer.n_elements).reshape(layer.shape)


def unpack_layer(layer: PackedLayer) -> np.ndarray:
    """Decode through the extended codebook (one byte -> 2 or 4 values); float32."""
    vals = layer.extended[layer.indices].reshape(-1)
    return vals[:layer.n_elements].reshape(layer.shape)


# --- file format -----------------------------------------------------------------

def _write_layer(buf, layer: PackedLayer) -> None:
    nb = layer.name.encode()
    lanes = lanes_per_byte(layer.bits)
    buf.write(struct.pack("<H", len(nb)) + nb)
    buf.write(struct.pack("<BB", layer.bits, len(layer.shape)))
    buf.write(struct.pack(f"<{len(layer.shape)}I", *layer.shape))
    buf.write(struct.pack("<IBB", layer.pad, LAYOUTS[layer.layout], len(layer.base)))
    buf.write(np.asarray(layer.base, dtype="<f4").tobytes())
    ext = np.asarray(layer.extended, dtype="<f4")
    if ext.shape != (256, lanes):
        raise ValueError(f"{layer.name}: extended codebook has shape {ext.shape}")
    buf.write(ext.tobytes())
    buf.write(struct.pack("<I", layer.indices.size))
    buf.write(np.asarray(layer.indices, dtype=np.uint8).tobytes())


def write_packed_model(path, layers) -> None:
    buf = io.BytesIO()
    layers = list(layers)
    buf.write(MAGIC + struct.pack("<HI", VERSION, len(layers)))
    for layer in layers:
        _write_layer(buf, layer)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: truncated packed model", offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_packed_model(path) -> list[PackedLayer]:
    r = _Reader(open(path, "rb").read(), path)
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: bad magic, not a QSMD file", offset=0)
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise DataError(f"{path}: unsupported QSMD version {version}", offset=4)
    out = []
    for _ in range(count):
        start = r.pos
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        at = r.pos
        bits, ndim = r.unpack("<BB")
        if bits not in (2, 4):
            raise DataError(f"{path}: layer {name!r} has unsupported bit width {bits}", offset=at)
        shape = r.unpack(f"<{ndim}I")
        at = r.pos
        pad, layout, n_base = r.unpack("<IBB")
        lanes = 8 // bits
        if layout not in _LAYOUT_NAMES:
            raise DataError(f"{path}: layer {name!r} has unknown layout tag {layout}", offset=at + 4)
        if n_base < 1 or n_base > 2 ** bits:
            raise DataError(f"{path}: layer {name!r} has {n_base} centroids for {bits} bits",
                            offset=at + 5)
        n = int(np.prod(shape))
        if pad != (-n) % lanes:
            raise DataError(f"{path}: layer {name!r} pad {pad} inconsistent with shape", offset=at)
        base = np.frombuffer(r.take(4 * n_base), dtype="<f4").astype(np.float32)
        ext = np.frombuffer(r.take(4 * 256 * lanes), dtype="<f4").astype(np.float32)
        at = r.pos
        (nbytes,) = r.unpack("<I")
        if nbytes != (n + pad) // lanes:
            raise DataError(f"{path}: layer {name!r} index stream length {nbytes} "
                            f"does not match {n + pad} elements", offset=at)
        idx = np.frombuffer(r.take(nbytes), dtype=np.uint8).copy()
        layer = PackedLayer(name, bits, tuple(shape), _LAYOUT_NAMES[layout], pad, base,
                            ext.reshape(256, lanes), idx)
        if unpack_indices(idx, bits, n).max(initial=0) >= n_base:
            raise DataError(f"{path}: layer {name!r} has an index beyond its codebook", offset=start)
        out.append(layer)
    if r.pos != len(r.data):
        raise DataError(f"{path}: trailing bytes after {count} layers", offset=r.pos)
    return out


def describe(layers) -> str:
    """Human-readable header dump used by ``dgms inspect``."""
    lines = []
    for l in layers:
        lines.append(
            f"{l.name}: bits={l.bits} shape={'x'.join(map(str, l.shape))} layout={l.layout} "
            f"pad={l.pad} centroids={len(l.base)} index_bytes={l.indices.size} "
            f"base=[{', '.join('%.6g' % v for v in l.base)}]")
    return "\n".join(lines)


def packed_file_size(n_elements: int, bits: int, n_base: int, name_len: int, ndim: int) -> int:
    """Exact byte size of a single-layer QSMD file."""
    lanes = lanes_per_byte(bits)
    n_bytes = -(-n_elements // lanes)
    header = 10 + 2 + name_len + 2 + 4 * ndim + 4 + 1 + 1
    return header + 4 * n_base + 4 * 256 * lanes + 4 + n_bytes
