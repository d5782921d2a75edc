"""Datasets (CIFAR-10 binary, synthetic blobs) and checkpoint files.

Binary model checkpoint (``.ckpt``), all integers little-endian::

    b"DGMS" | u16 version | u32 n_tensors
    per tensor: u16 name_len | name (utf-8) | u8 dtype (0=f64, 1=i64)
                | u8 ndim | u32 dims[ndim] | payload (little-endian, C order)

Mixture checkpoint (``.gm``) is line-oriented text, see :func:`save_gm`.
"""
from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .gm_core import LayerGM

CIFAR_RECORD = 3073
CIFAR_BATCH_RECORDS = 10000
# per-channel (R, G, B) standardisation of [0, 1] pixels
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

CKPT_MAGIC = b"DGMS"
CKPT_VERSION = 1
GM_HEADER = "# dgms mixture checkpoint v1"


class DataError(ValueError):
    """Malformed dataset or checkpoint; ``offset`` is the byte position when known."""

    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        self.x.flags.writeable = False
        self.y.flags.writeable = False

    def __len__(self):
        return len(self.y)


def read_cifar10_records(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw records of one CIFAR-10 binary batch: uint8 images ``(n, 3, 32, 32)`` and labels."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD
        raise DataError(f"{path}: truncated record {whole}", offset=whole * CIFAR_RECORD)
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{path}: label {labels[i]} >= 10 in record {i}", offset=i * CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def _standardize(img: np.ndarray, mean, std) -> np.ndarray:
    x = img.astype(np.float64) / 255.0
    return (x - np.asarray(mean)[None, :, None, None]) / np.asarray(std)[None, :, None, None]


def load_cifar10_binary(path, train_n: int, test_n: int, seed: int = 0, classes=None,
                        mean=CIFAR_MEAN, std=CIFAR_STD) -> tuple[Dataset, Dataset]:
    """Seeded subsample of the CIFAR-10 binary release under ``path``.

    ``classes`` optionally restricts (and relabels, in the given order) the
    classes kept, which gives label-subset domains for transfer runs.
    """
    tr = [os.path.join(path, f"data_batch_{i}.bin") for i in range(1, 6)]
    tr = [p for p in tr if os.path.exists(p)]
    te = os.path.join(path, "test_batch.bin")
    if not tr or not os.path.exists(te):
        raise DataError(f"no CIFAR-10 binary batches under {path!r}")

    def subset(files, n, split, salt):
        parts = [read_cifar10_records(f) for f in files]
        imgs = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        nc = 10
        if classes is not None:
            keep = np.isin(labels, classes)
            imgs, labels = imgs[keep], labels[keep]
            remap = {c: i for i, c in enumerate(classes)}
            labels = np.array([remap[int(l)] for l in labels], dtype=np.int64)
            nc = len(classes)
        if n > len(labels):
            raise DataError(f"{split}: requested {n} examples, only {len(labels)} available")
        idx = np.sort(np.random.default_rng([seed, salt]).permutation(len(labels))[:n])
        x = _standardize(imgs[idx], mean, std) if n else np.zeros((0, 3, 32, 32))
        return Dataset(x, labels[idx], nc, split, f"{path}:{split}:seed={seed}")

    return subset(tr, train_n, "train", 0), subset([te], test_n, "test", 1)


def synth_blobs(classes: int, n: int, spread: float, seed: int, dim: int | None = None,
                offset: float = 0.0, split: str = "train") -> Dataset:
    """Isotropic Gaussian clusters centred on the standard simplex vertices ``e_i + offset``."""
    if classes < 2:
        raise ValueError("need at least two classes")
    dim = dim or classes
    if dim < classes:
        raise ValueError("dim must be >= classes")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, n)
    centers = np.zeros((classes, dim))
    centers[np.arange(classes), np.arange(classes)] = 1.0
    x = centers[y] + offset + spread * rng.standard_normal((n, dim))
    return Dataset(x, y.astype(np.int64), classes, split,
                   f"blobs:c={classes},n={n},s={spread},seed={seed},off={offset}")


# --- model checkpoints ---------------------------------------------------------

def state_tensors(state) -> dict:
    """Flatten a TrainState into named arrays (float64, or int64 for counters)."""
    t = {}
    for k, v in state.params.items():
        t[f"param/{k}"] = v
    for k, v in state.buffers.items():
        t[f"buffer/{k}"] = v
    for k, v in state.momentum.items():
        t[f"momentum/{k}"] = np.asarray(v, dtype=np.float64)
    for name, gm in state.gms.items():
        t[f"gm/{name}/mu"] = gm.mu
        t[f"gm/{name}/pi_logits"] = gm.pi_logits
        t[f"gm/{name}/log_gamma"] = gm.log_gamma
        t[f"gm/{name}/log_tau"] = np.array([gm.log_tau])
        flags = [gm.simplex, gm.effective_k, *(gm.trainable[g] for g in ("mu", "pi", "gamma", "tau"))]
        t[f"gm/{name}/meta"] = np.array(flags, dtype=np.int64)
    t["meta/counters"] = np.array([state.step, state.skipped, state.seed], dtype=np.int64)
    return t


def write_tensors(path, tensors: dict) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = 1 if arr.dtype.kind in "iu" else 0
        arr = np.ascontiguousarray(arr, dtype="<i8" if tag else "<f8")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_tensors(path) -> dict:
    data = open(path, "rb").read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DataError(f"{path}: unexpected end of file", offset=pos)
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4) != CKPT_MAGIC:
        raise DataError(f"{path}: bad magic, not a DGMS checkpoint", offset=0)
    version, count = struct.unpack("<HI", take(6))
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}", offset=4)
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        at = pos
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in (0, 1):
            raise DataError(f"{path}: unknown dtype tag {tag} for {name!r}", offset=at)
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * n), dtype="<i8" if tag else "<f8").reshape(shape)
        out[name] = arr.astype(np.int64 if tag else np.float64)
    if pos != len(data):
        raise DataError(f"{path}: trailing bytes", offset=pos)
    return out


def save_checkpoint(path, state) -> None:
    write_tensors(path, state_tensors(state))


def load_checkpoint(path, spec):
    """Rebuild a TrainState for ``spec`` from a checkpoint written by :func:`save_checkpoint`."""
    from .train import TrainState

    t = read_tensors(path)
    params, buffers, momentum, gm_parts = {}, {}, {}, {}
    for name, arr in t.items():
        kind, _, rest = name.partition("/")
        if kind == "param":
            params[rest] = arr
        elif kind == "buffer":
            buffers[rest] = arr
        elif kind == "momentum":
            momentum[rest] = arr
        elif kind == "gm":
            layer, _, field = rest.rpartition("/")
            gm_parts.setdefault(layer, {})[field] = arr
    expected = spec.param_shapes()
    for k, shape in expected.items():
        if k not in params:
            raise DataError(f"{path}: missing parameter {k!r}")
        if params[k].shape != tuple(shape):
            raise DataError(f"{path}: parameter {k!r} has shape {params[k].shape}, expected {shape}")
    gms = {}
    for layer, p in gm_parts.items():
        meta = p["meta"]
        gm = LayerGM(p["mu"], p["pi_logits"], p["log_gamma"], float(p["log_tau"][0]),
                     simplex=bool(meta[0]), effective_k=int(meta[1]),
                     trainable=dict(zip(("mu", "pi", "gamma", "tau"), map(bool, meta[2:6]))))
        gms[layer] = gm
    step, skipped, seed = (int(v) for v in t["meta/counters"])
    return TrainState(spec, params, buffers, gms, momentum, step, skipped, seed)


# --- mixture checkpoints -------------------------------------------------------

def _fmt(values) -> str:
    return " ".join("%.17g" % v for v in np.atleast_1d(values))


def save_gm(path, gms: dict) -> None:
    """Write mixtures as text, every float with 17 significant digits.

    Per layer block::

        layer <name>
        k <K>
        tau <value>
        simplex <0|1>
        pi <K+1 values>
        mu <K+1 values>
        gamma <K+1 values>
        pi_logits <K+1 values>      (exact trained parameterization)
        log_gamma <K+1 values>
        log_tau <value>
        end

    ``pi``, ``mu``, ``gamma`` and ``tau`` are authoritative; the three raw
    lines are optional on load and, when present, must agree with them.
    """
    lines = [GM_HEADER]
    for name, gm in gms.items():
        lines += [f"layer {name}", f"k {gm.k}", f"tau {_fmt(gm.tau)}",
                  f"simplex {int(gm.simplex)}", f"pi {_fmt(gm.pi)}", f"mu {_fmt(gm.mu)}",
                  f"gamma {_fmt(np.exp(gm.log_gamma))}", f"pi_logits {_fmt(gm.pi_logits)}",
                  f"log_gamma {_fmt(gm.log_gamma)}", f"log_tau {_fmt(gm.log_tau)}", "end"]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _close(a, b) -> bool:
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    return a.shape == b.shape and bool(np.all((a == b) | (np.abs(a - b) <= 1e-12 * np.abs(b))))


def load_gm(path) -> dict:
    """Parse a mixture file, rejecting anything that violates the mixture invariants."""
    blocks, cur = {}, None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key == "layer":
                cur = {"name": rest.strip(), "line": lineno}
            elif key == "end":
                if cur is None:
                    raise DataError(f"{path}:{lineno}: 'end' outside a layer block")
                blocks[cur["name"]] = cur
                cur = None
            elif cur is None:
                raise DataError(f"{path}:{lineno}: {key!r} outside a layer block")
            else:
                try:
                    cur[key] = np.array([float(v) for v in rest.split()])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: unparsable values for {key!r}") from None
    if cur is not None:
        raise DataError(f"{path}: layer {cur['name']!r} not terminated by 'end'")

    out = {}
    for name, b in blocks.items():
        where = f"{path}: layer {name!r}"
        for key in ("k", "tau", "pi", "mu", "gamma"):
            if key not in b:
                raise DataError(f"{where}: missing {key!r}")
        k = int(b["k"][0])
        simplex = bool(int(b.get("simplex", [1])[0]))
        pi, mu, gamma, tau = b["pi"], b["mu"], b["gamma"], float(b["tau"][0])
        if not (len(pi) == len(mu) == len(gamma) == k + 1) or k < 1:
            raise DataError(f"{where}: expected {k + 1} values for pi, mu and gamma")
        if np.any(~np.isfinite(gamma)) or np.any(gamma <= 0):
            raise DataError(f"{where}: gamma must be strictly positive, got {gamma}")
        if not (tau > 0 and math.isfinite(tau)):
            raise DataError(f"{where}: tau must be strictly positive, got {tau}")
        if mu[0] != 0.0 or np.any(~np.isfinite(mu)):
            raise DataError(f"{where}: mu must be finite with mu[0] == 0")
        if simplex and (np.any(pi < 0) or abs(pi.sum() - 1) > 1e-9):
            raise DataError(f"{where}: pi must be a probability vector")
        if "pi_logits" in b and "log_gamma" in b and "log_tau" in b:
            gm = LayerGM(mu, b["pi_logits"], b["log_gamma"], float(b["log_tau"][0]),
                         simplex=simplex)
            if not (_close(gm.pi, pi) and _close(np.exp(gm.log_gamma), gamma)
                    and _close(gm.tau, tau)):
                raise DataError(f"{where}: raw parameters disagree with pi/gamma/tau; "
                                "delete the pi_logits/log_gamma/log_tau lines after editing")
        else:
            gm = LayerGM.from_values(pi, mu, gamma, tau, simplex=simplex)
        out[name] = gm
    return out
