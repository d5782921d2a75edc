"""Packed-codebook inference kernels and a dense-vs-packed timing harness.

Kernels read the packed index stream one byte at a time and fetch that
byte's 2 (4-bit) or 4 (2-bit) weights from the extended codebook with a
single indexed load.  Accumulation runs in float32 by default (``acc64=True``
switches to float64) in a fixed order: reduction index ascending, so a dense
loop over the unpacked weights in the same order gives identical bits.

Convolution loop nest, outermost first::

    n, oh, ow-tile, co, packed bytes (ci, kh, kw ascending), ow within tile

Output rows/tiles stay outermost so one tile of activations is reused across
every output channel, and the tile's accumulators stay in a small local buffer.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import layers
from .packing import PackedLayer, lanes_per_byte, unpack_layer

DEFAULT_OW_TILE = 8


@njit(cache=True)
def _dense_kernel(x, idx, ext, lanes, n_in, bias, out):
    n_batch, n_out = out.shape
    for n in range(n_batch):
        for o in range(n_out):
            acc = bias[o]
            f0 = o * n_in
            f1 = f0 + n_in
            for bi in range(f0 // lanes, (f1 - 1) // lanes + 1):
                e = idx[bi]
                for l in range(lanes):
                    f = bi * lanes + l
                    if f >= f0 and f < f1:
                        acc += x[n, f - f0] * ext[e, l]
            out[n, o] = acc


@njit(cache=True)
def _dense_reference(x, w, bias, out):
    n_batch, n_out = out.shape
    n_in = w.shape[1]
    for n in range(n_batch):
        for o in range(n_out):
            acc = bias[o]
            for r in range(n_in):
                acc += x[n, r] * w[o, r]
            out[n, o] = acc


@njit(cache=True)
def _conv_kernel(x, idx, ext, lanes, kh, kw, stride, pad, bias, scale, shift,
                 ow_tile, out, acc, trace, tpos):
    n_batch, ci, h, w = x.shape
    co_n, oh_n, ow_n = out.shape[1], out.shape[2], out.shape[3]
    khw = kh * kw
    red = ci * khw
    for n in range(n_batch):
        for oh in range(oh_n):
            for ow0 in range(0, ow_n, ow_tile):
                tw = min(ow_tile, ow_n - ow0)
                for co in range(co_n):
                    if tpos[0] < trace.shape[0]:
                        trace[tpos[0], 0] = oh
                        trace[tpos[0], 1] = ow0
                        trace[tpos[0], 2] = co
                        tpos[0] += 1
                    for t in range(tw):
                        acc[t] = bias[co]
                    f0 = co * red
                    f1 = f0 + red
                    for bi in range(f0 // lanes, (f1 - 1) // lanes + 1):
                        e = idx[bi]
                        for l in range(lanes):
                            f = bi * lanes + l
                            if f < f0 or f >= f1:
                                continue
                            wv = ext[e, l]
                            r = f - f0
                            c = r // khw
                            rem = r - c * khw
                            i = rem // kw
                            j = rem - i * kw
                            ih = oh * stride - pad + i
                            if ih < 0 or ih >= h:
                                continue
                            for t in range(tw):
                                iw = (ow0 + t) * stride - pad + j
                                if iw >= 0 and iw < w:
                                    acc[t] += x[n, c, ih, iw] * wv
                    for t in range(tw):
                        out[n, co, oh, ow0 + t] = acc[t] * scale[co] + shift[co]


@njit(cache=True)
def _conv_reference(x, wt, bias, stride, pad, out):
    n_batch, ci, h, w = x.shape
    co_n, _, kh, kw = wt.shape
    for n in range(n_batch):
        for co in range(co_n):
            for oh in range(out.shape[2]):
                for ow in range(out.shape[3]):
                    acc = bias[co]
                    for c in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                ih = oh * stride - pad + i
                                iw = ow * stride - pad + j
                                if ih >= 0 and ih < h and iw >= 0 and iw < w:
                                    acc += x[n, c, ih, iw] * wt[co, c, i, j]
                    out[n, co, oh, ow] = acc


def _dtype(acc64: bool):
    return np.float64 if acc64 else np.float32


def _bias(bias, n, dt):
    return np.zeros(n, dt) if bias is None else np.ascontiguousarray(bias, dtype=dt)


def packed_dense_matmul(x, layer: PackedLayer, bias=None, acc64: bool = False) -> np.ndarray:
    """``y = x @ W.T + bias`` with ``W`` decoded on the fly from the packed stream."""
    if layer.layout != "row" or len(layer.shape) != 2:
        raise ValueError(f"{layer.name}: dense kernel needs a row-major 2-D layer, "
                         f"got {layer.layout} {layer.shape}")
    n_out, n_in = layer.shape
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != n_in:
        raise ValueError(f"{layer.name}: input {x.shape} incompatible with weight {layer.shape}")
    dt = _dtype(acc64)
    out = np.empty((x.shape[0], n_out), dtype=dt)
    _dense_kernel(np.ascontiguousarray(x, dtype=dt), layer.indices, layer.extended.astype(dt),
                  lanes_per_byte(layer.bits), n_in, _bias(bias, n_out, dt), out)
    return out


def dense_reference(x, w, bias=None, acc64: bool = False) -> np.ndarray:
    """Dense matmul with the packed kernel's accumulation order."""
    dt = _dtype(acc64)
    out = np.empty((x.shape[0], w.shape[0]), dtype=dt)
    _dense_reference(np.ascontiguousarray(x, dtype=dt), np.ascontiguousarray(w, dtype=dt),
                     _bias(bias, w.shape[0], dt), out)
    return out


def packed_conv2d(x, layer: PackedLayer, stride: int = 1, pad: int = 0, bias=None,
                  epilogue=None, ow_tile: int = DEFAULT_OW_TILE, acc64: bool = False,
                  trace: np.ndarray | None = None) -> np.ndarray:
    """NCHW convolution over a packed output-channel-major weight.

    ``epilogue=(scale, shift)`` applies a per-output-channel affine map to the
    finished accumulators (batchnorm folded into the conv).  ``trace``, an
    ``(T, 3)`` int64 array, records ``(oh, ow_tile_start, co)`` each time an
    output-channel accumulation starts.
    """
    if layer.layout != "ocm" or len(layer.shape) != 4:
        raise ValueError(f"{layer.name}: conv kernel needs an output-channel-major 4-D layer, "
                         f"got {layer.layout} {layer.shape}")
    co, ci, kh, kw = layer.shape
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != ci:
        raise ValueError(f"{layer.name}: input {x.shape} incompatible with weight {layer.shape}")
    dt = _dtype(acc64)
    oh = layers.conv_output_size(x.shape[2], kh, stride, pad)
    ow = layers.conv_output_size(x.shape[3], kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError(f"{layer.name}: kernel does not fit input {x.shape}")
    out = np.empty((x.shape[0], co, oh, ow), dtype=dt)
    scale, shift = (np.ones(co, dt), np.zeros(co, dt)) if epilogue is None else (
        np.ascontiguousarray(epilogue[0], dtype=dt), np.ascontiguousarray(epilogue[1], dtype=dt))
    tr = np.zeros((0, 3), np.int64) if trace is None else trace
    _conv_kernel(np.ascontiguousarray(x, dtype=dt), layer.indices, layer.extended.astype(dt),
                 lanes_per_byte(layer.bits), kh, kw, stride, pad, _bias(bias, co, dt),
                 scale, shift, ow_tile, out, np.empty(ow_tile, dt), tr, np.zeros(1, np.int64))
    return out


def conv_reference(x, w, bias=None, stride=1, pad=0, acc64: bool = False) -> np.ndarray:
    """Naive conv with the packed kernel's per-output accumulation order."""
    dt = _dtype(acc64)
    oh = layers.conv_output_size(x.shape[2], w.shape[2], stride, pad)
    ow = layers.conv_output_size(x.shape[3], w.shape[3], stride, pad)
    out = np.empty((x.shape[0], w.shape[0], oh, ow), dtype=dt)
    _conv_reference(np.ascontiguousarray(x, dtype=dt), np.ascontiguousarray(w, dtype=dt),
                    _bias(bias, w.shape[0], dt), stride, pad, out)
    return out


def fold_batchnorm(scale, shift, mean, var, eps=1e-5):
    """Per-channel ``(s, t)`` such that ``bn(y) = y * s + t``."""
    s = scale / np.sqrt(var + eps)
    return s, shift - mean * s


def run_packed_model(spec, params, buffers, packed: dict, x, acc64=False,
                     capture: dict | None = None) -> np.ndarray:
    """Inference through packed kernels for packed layers, float32 numpy elsewhere.

    A batchnorm directly after a packed conv is folded into that conv's epilogue.
    ``capture``, if given, receives the input of every weight layer.
    """
    dt = _dtype(acc64)
    x = np.asarray(x, dtype=dt)
    ls = list(spec.layers)
    i = 0
    while i < len(ls):
        l = ls[i]
        if l.kind in ("dense", "conv2d"):
            b = params[f"{l.name}.bias"]
            if capture is not None:
                capture[l.name] = x
            if l.name in packed:
                if l.kind == "dense":
                    x = packed_dense_matmul(x, packed[l.name], b, acc64)
                else:
                    epi = None
                    nxt = ls[i + 1] if i + 1 < len(ls) else None
                    if nxt is not None and nxt.kind == "batchnorm":
                        epi = fold_batchnorm(params[f"{nxt.name}.scale"], params[f"{nxt.name}.shift"],
                                             buffers[f"{nxt.name}.mean"], buffers[f"{nxt.name}.var"])
                        i += 1
                    x = packed_conv2d(x, packed[l.name], l.stride, l.pad, b, epi, acc64=acc64)
            else:
                w = params[f"{l.name}.weight"].astype(dt)
                x = (layers.dense_forward(x, w, b.astype(dt)) if l.kind == "dense"
                     else layers.conv2d_forward(x, w, b.astype(dt), l.stride, l.pad))
        elif l.kind == "batchnorm":
            x = layers.batchnorm_forward(x, params[f"{l.name}.scale"].astype(dt),
                                         params[f"{l.name}.shift"].astype(dt),
                                         buffers[f"{l.name}.mean"].astype(dt),
                                         buffers[f"{l.name}.var"].astype(dt))
        elif l.kind == "relu":
            x = layers.relu(x)
        elif l.kind == "avgpool":
            x = layers.avgpool(x, l.kernel)
        elif l.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        i += 1
    return x


# --- benchmark -------------------------------------------------------------------

@dataclass
class BenchRow:
    model: str
    layer: str
    path: str
    batch: int
    median_us: float
    iqr_us: float
    weight_bytes: int


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    max_rel_diff: dict = field(default_factory=dict)
    low_confidence: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "layer", "path", "batch", "median_us", "iqr_us", "weight_bytes"])
            for r in self.rows:
                w.writerow([r.model, r.layer, r.path, r.batch, f"{r.median_us:.3f}",
                            f"{r.iqr_us:.3f}", r.weight_bytes])


def _time(fn, repeats: int, warmup: int):
    for _ in range(warmup):
        fn()
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append((time.perf_counter() - t0) * 1e6)
    q1, med, q3 = np.percentile(ts, [25, 50, 75])
    return float(med), float(q3 - q1)


def rel_diff(a, b) -> float:
    """Normwise relative difference ``max|a-b| / max|b|``."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = np.abs(b).max(initial=0.0)
    return float(np.abs(a - b).max(initial=0.0) / scale) if scale else float(np.abs(a).max(initial=0.0))


def bench(model: str, cases, repeats: int = 10, warmup: int = 3, tol: float = 1e-5) -> BenchReport:
    """Time dense float32 against packed kernels on identical inputs.

    ``cases`` yields ``(layer_name, PackedLayer, input, stride, pad)``.  Outputs
    are cross-checked before timing; a mismatch above ``tol`` raises.
    """
    if warmup < 3:
        raise ValueError("at least 3 warmup runs are required")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    report = BenchReport(low_confidence=repeats < 3)
    for name, layer, x, stride, pad in cases:
        w = unpack_layer(layer)
        x = np.ascontiguousarray(x, dtype=np.float32)
        if layer.layout == "row":
            dense_fn = lambda: x @ w.T
            packed_fn = lambda: packed_dense_matmul(x, layer)
        else:
            dense_fn = lambda: layers.conv2d_forward(x, w, None, stride, pad)
            packed_fn = lambda: packed_conv2d(x, layer, stride, pad)
        d = rel_diff(packed_fn(), dense_fn())
        report.max_rel_diff[name] = d
        if d > tol:
            raise ArithmeticError(f"{name}: packed and dense outputs differ by {d:.2e}")
        n = layer.n_elements
        for path, fn, nbytes in (("dense", dense_fn, 4 * n),
                                 ("packed", packed_fn, -(-n * layer.bits // 8))):
            med, iqr = _time(fn, repeats, warmup)
            report.rows.append(BenchRow(model, name, path, x.shape[0], med, iqr, nbytes))
    return report
