"""Compression, sparsity and quantization-error accounting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FP_BITS = 32


@dataclass
class ModelCensus:
    """Parameter counts of a hard-quantized model.

    ``assignments`` holds the component index of every weight in each
    quantized layer; index 0 is the zero component.
    """

    n_total: int
    n_unquantized: int
    layer_sizes: list = field(default_factory=list)
    assignments: list = field(default_factory=list)

    @property
    def n_quantized(self) -> int:
        return int(sum(self.layer_sizes))

    @property
    def n_nonzero_quantized(self) -> int:
        return int(sum(np.count_nonzero(a) for a in self.assignments))


@dataclass
class MetricsReport:
    epoch: int
    loss: float
    top1: float
    mse: float
    cr: float
    nonzero: int
    n_params: int


def nonzero_params(assignments, n_unquantized: int = 0) -> int:
    """Weights not assigned to the zero component, plus every unquantized parameter."""
    return int(sum(np.count_nonzero(np.asarray(a)) for a in assignments)) + int(n_unquantized)


def compression_rate(n_total: int, n_nonzero_quantized: int, bits: int, n_layers: int = 0,
                     n_unquantized: int = 0, include_codebook: bool = True) -> float:
    """``32 N / (b * nnz + codebook_bits + 32 * N_unquantized)``, one ``2^b``-entry fp32 codebook per layer."""
    # b=32 is plain fp32 storage, no lookup table
    codebook = n_layers * (2 ** bits) * FP_BITS if include_codebook and bits < FP_BITS else 0
    denom = bits * n_nonzero_quantized + codebook + FP_BITS * n_unquantized
    if denom == 0:
        return float("inf")
    return FP_BITS * n_total / denom


def compression_rate_census(c: ModelCensus, bits: int, include_codebook: bool = True) -> float:
    if not c.layer_sizes:
        return compression_rate(c.n_total, 0, FP_BITS, 0, c.n_unquantized, False)
    return compression_rate(c.n_total, c.n_nonzero_quantized, bits, len(c.layer_sizes),
                            c.n_unquantized, include_codebook)


def quantization_mse(weights, quantized) -> float:
    """Mean squared deviation pooled over all given layers."""
    num, den = 0.0, 0
    for w, q in zip(weights, quantized):
        w, q = np.asarray(w), np.asarray(q)
        if w.shape != q.shape:
            raise ValueError(f"shape mismatch {w.shape} vs {q.shape}")
        num += float(((w - q) ** 2).sum())
        den += w.size
    return num / den if den else 0.0


def codebook_overhead(layer_param_counts, bits: int) -> float:
    """Codebook bits over index bits: ``sum 2^b*32 / sum(n_params*b)``."""
    counts = list(layer_param_counts)
    return len(counts) * (2 ** bits) * FP_BITS / (sum(counts) * bits)


def resnet_census(depth: int = 18) -> list[int]:
    """Weight counts of every conv/fc layer of an ImageNet ResNet, in forward order.

    Downsample 1x1 convs are listed after their block's convs.  The first conv
    and the classifier are included; callers drop them to mirror the usual
    "all but first and last" policy.
    """
    if depth == 18:
        blocks, bottleneck = (2, 2, 2, 2), False
    elif depth == 50:
        blocks, bottleneck = (3, 4, 6, 3), True
    else:
        raise ValueError(f"unsupported depth {depth}")
    counts = [7 * 7 * 3 * 64]
    cin = 64
    for stage, nb in enumerate(blocks):
        width = 64 * 2 ** stage
        cout = width * 4 if bottleneck else width
        for b in range(nb):
            if bottleneck:
                counts += [cin * width, 9 * width * width, width * cout]
            else:
                counts += [9 * cin * width, 9 * width * width]
            if b == 0 and cin != cout:
                counts.append(cin * cout)
            cin = cout
    counts.append(cin * 1000)
    return counts
