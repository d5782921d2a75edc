"""Reference architectures, parameter initialisation and the layer quantization policy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .gm_core import UniformQuantSpec, uniform_quantize

WEIGHT_KINDS = ("dense", "conv2d")


@dataclass(frozen=True)
class LayerDesc:
    kind: str          # dense | conv2d | batchnorm | relu | avgpool | flatten
    name: str
    in_features: int = 0
    out_features: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0

    def param_shapes(self) -> dict[str, tuple]:
        if self.kind == "dense":
            return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}
        if self.kind == "conv2d":
            k = self.kernel
            return {"weight": (self.out_features, self.in_features, k, k),
                    "bias": (self.out_features,)}
        if self.kind == "batchnorm":
            return {"scale": (self.in_features,), "shift": (self.in_features,)}
        return {}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple
    layers: tuple
    num_classes: int

    def weight_layers(self) -> list[str]:
        return [l.name for l in self.layers if l.kind in WEIGHT_KINDS]

    def layer(self, name: str) -> LayerDesc:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def param_shapes(self) -> dict[str, tuple]:
        out = {}
        for l in self.layers:
            for p, shape in l.param_shapes().items():
                out[f"{l.name}.{p}"] = shape
        return out

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))


@dataclass
class QuantPolicy:
    """Which layers get a mixture, with how many components and index bits.

    ``k_plus_one`` of 0 means ``2**bits`` components.
    """

    bits: int = 4
    k_plus_one: int = 0
    skip: tuple = ()
    quantize: bool = True
    act_bits: int = 32

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")
        if self.k_plus_one == 0:
            self.k_plus_one = 2 ** self.bits
        if self.k_plus_one < 2 or self.k_plus_one > 2 ** self.bits:
            raise ValueError(f"{self.k_plus_one} components do not fit in {self.bits} bits")
        self.skip = tuple(self.skip)

    @classmethod
    def for_model(cls, spec: ModelSpec, bits=4, k_plus_one=0, skip=(), **kw) -> "QuantPolicy":
        wl = spec.weight_layers()
        auto = (wl[0], wl[-1]) if wl else ()
        return cls(bits=bits, k_plus_one=k_plus_one,
                   skip=tuple(dict.fromkeys(tuple(auto) + tuple(skip))), **kw)

    @classmethod
    def none(cls) -> "QuantPolicy":
        return cls(bits=32, k_plus_one=2, quantize=False)

    def quantized_layers(self, spec: ModelSpec) -> list[str]:
        if not self.quantize:
            return []
        return [n for n in spec.weight_layers() if n not in self.skip]


def build_mlp(in_dim: int, hidden=(32, 32), classes: int = 2, name="mlp") -> ModelSpec:
    if in_dim < 1 or classes < 2 or len(hidden) != 2 or min(hidden) < 1:
        raise ValueError("mlp: need in_dim >= 1, two positive hidden sizes, classes >= 2")
    h1, h2 = hidden
    ls = (
        LayerDesc("dense", "fc1", in_dim, h1), LayerDesc("relu", "relu1"),
        LayerDesc("dense", "fc2", h1, h2), LayerDesc("relu", "relu2"),
        LayerDesc("dense", "fc3", h2, classes),
    )
    return ModelSpec(name, (in_dim,), ls, classes)


def build_cnn(in_shape=(3, 32, 32), widths=(16, 32, 64, 64), classes: int = 10,
              name="cnn") -> ModelSpec:
    """Four 3x3 conv-bn-relu blocks (stride 1, 2, 2, 2), global average pool, dense head."""
    c, h, w = in_shape
    if len(widths) != 4 or min(widths) < 1 or classes < 2 or h < 8 or w < 8:
        raise ValueError("cnn: need 4 positive widths, classes >= 2 and input at least 8x8")
    ls, cin = [], c
    for i, (co, st) in enumerate(zip(widths, (1, 2, 2, 2)), start=1):
        ls += [LayerDesc("conv2d", f"conv{i}", cin, co, kernel=3, stride=st, pad=1),
               LayerDesc("batchnorm", f"bn{i}", co),
               LayerDesc("relu", f"relu{i}")]
        cin = co
        h = layers.conv_output_size(h, 3, st, 1)
        w = layers.conv_output_size(w, 3, st, 1)
    ls += [LayerDesc("avgpool", "pool", kernel=min(h, w)), LayerDesc("flatten", "flat"),
           LayerDesc("dense", "fc", cin, classes)]
    return ModelSpec(name, tuple(in_shape), tuple(ls), classes)


def init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases, unit batchnorm scale."""
    rng = np.random.default_rng(seed)
    params = {}
    for key, shape in spec.param_shapes().items():
        kind = key.rsplit(".", 1)[1]
        if kind == "weight":
            fan_in = int(np.prod(shape[1:]))
            params[key] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif kind == "scale":
            params[key] = np.ones(shape)
        else:
            params[key] = np.zeros(shape)
    return params


def init_buffers(spec: ModelSpec) -> dict[str, np.ndarray]:
    bufs = {}
    for l in spec.layers:
        if l.kind == "batchnorm":
            bufs[f"{l.name}.mean"] = np.zeros(l.in_features)
            bufs[f"{l.name}.var"] = np.ones(l.in_features)
    return bufs


def activation_spec(absmax: float, bits: int) -> UniformQuantSpec | None:
    """Symmetric uniform grid covering ``[-absmax, absmax]``; None means passthrough."""
    if bits >= 32 or not absmax > 0:
        return None
    k = 2 ** (bits - 1) - 1
    return UniformQuantSpec(delta=absmax / k, k_max=k)


def quantize_activations_uniform(x, absmax: float, bits: int):
    """Post-training per-tensor activation quantization calibrated on ``absmax``."""
    spec = activation_spec(absmax, bits)
    if spec is None:
        return x
    return uniform_quantize(x, spec)
