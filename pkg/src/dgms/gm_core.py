"""Gaussian-mixture weight sharing: densities, responsibilities, soft/hard projections.

Every function here works on flat float64 arrays of weights.  Component index 0
is the zero component; its centroid is pinned to exactly 0.0.

Matrices returned by :func:`responsibility`, :func:`soft_indicator` and
:func:`hard_indicator` are laid out ``(K+1, M)``: one row per component, one
column per weight.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

GAMMA_MIN = 1e-4
TAU_MIN = 1e-6
_SQRT_2PI = math.sqrt(2.0 * math.pi)

# Incremented whenever a gamma below GAMMA_MIN is clamped during evaluation.
clamp_counter = {"gamma": 0}


@dataclass(frozen=True)
class GMComponent:
    pi: float
    mu: float
    gamma: float


@dataclass(frozen=True)
class UniformQuantSpec:
    delta: float
    k_max: int

    def __post_init__(self):
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ValueError(f"step size must be positive and finite, got {self.delta}")
        if self.k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max}")

    @property
    def q_max(self) -> float:
        return self.delta * self.k_max


@dataclass
class LayerGM:
    """Per-layer mixture, stored in its trainable parameterization.

    ``pi_logits`` map to mixing weights through a softmax (``simplex=True``) or
    are used as-is (``simplex=False``).  ``log_gamma`` and ``log_tau`` are
    natural logs of the standard deviations and the temperature.
    """

    mu: np.ndarray
    pi_logits: np.ndarray
    log_gamma: np.ndarray
    log_tau: float
    simplex: bool = True
    effective_k: int | None = None
    trainable: dict = field(
        default_factory=lambda: {"mu": True, "pi": True, "gamma": True, "tau": False}
    )

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).copy()
        self.pi_logits = np.asarray(self.pi_logits, dtype=np.float64).copy()
        self.log_gamma = np.asarray(self.log_gamma, dtype=np.float64).copy()
        self.log_tau = float(self.log_tau)
        n = self.mu.shape[0]
        # a lone zero component (K=0) is legal for the math; policies and
        # k-means initialisation still require at least two
        if self.mu.ndim != 1 or n < 1:
            raise ValueError(f"need at least 1 component, got shape {self.mu.shape}")
        if self.pi_logits.shape != (n,) or self.log_gamma.shape != (n,):
            raise ValueError("pi, mu and gamma must have one entry per component")
        if self.mu[0] != 0.0:
            raise ValueError(f"zero component must have mu == 0, got {self.mu[0]!r}")
        # -0.0 would survive the check above; normalise it
        self.mu[0] = 0.0
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("centroids must be finite")
        if not math.isfinite(self.log_tau):
            raise ValueError("temperature must be positive and finite")
        if self.effective_k is None:
            self.effective_k = n - 1

    @classmethod
    def from_values(cls, pi, mu, gamma, tau, simplex=True, **kw) -> "LayerGM":
        pi = np.asarray(pi, dtype=np.float64)
        gamma = np.asarray(gamma, dtype=np.float64)
        if np.any(~np.isfinite(gamma)) or np.any(gamma <= 0):
            raise ValueError(f"gamma must be strictly positive, got {gamma}")
        if not tau > 0:
            raise ValueError(f"tau must be strictly positive, got {tau}")
        if simplex:
            if np.any(pi < 0) or np.any(~np.isfinite(pi)):
                raise ValueError(f"mixing weights must be nonnegative, got {pi}")
            with np.errstate(divide="ignore"):
                logits = np.log(pi / pi.sum())
        else:
            logits = pi
        return cls(mu=mu, pi_logits=logits, log_gamma=np.log(gamma),
                   log_tau=math.log(tau), simplex=simplex, **kw)

    @property
    def k(self) -> int:
        return self.mu.shape[0] - 1

    @property
    def pi(self) -> np.ndarray:
        if not self.simplex:
            return self.pi_logits.copy()
        z = self.pi_logits - self.pi_logits.max()
        e = np.exp(z)
        return e / e.sum()

    @property
    def gamma(self) -> np.ndarray:
        g = np.exp(self.log_gamma)
        low = g < GAMMA_MIN
        if low.any():
            clamp_counter["gamma"] += int(low.sum())
            g = np.where(low, GAMMA_MIN, g)
        return g

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    @property
    def components(self) -> list[GMComponent]:
        return [GMComponent(float(p), float(m), float(g))
                for p, m, g in zip(self.pi, self.mu, self.gamma)]

    def codebook(self, bits: int) -> "AdaptiveCodebook":
        return AdaptiveCodebook(values=self.mu.copy(), bits=bits)

    def copy(self) -> "LayerGM":
        return LayerGM(self.mu, self.pi_logits, self.log_gamma, self.log_tau,
                       simplex=self.simplex, effective_k=self.effective_k,
                       trainable=dict(self.trainable))


@dataclass
class AdaptiveCodebook:
    values: np.ndarray
    bits: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values[0] != 0.0:
            raise ValueError("codebook entry 0 must be the zero centroid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("codebook values must be finite")
        if len(self.values) > 2 ** self.bits:
            raise ValueError(f"{len(self.values)} centroids do not fit in {self.bits} bits")


def _check_finite(w: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(w))
    if bad.size:
        raise ValueError(f"non-finite weight at index {int(bad[0])}: {w.flat[bad[0]]!r}")


def uniform_quantize(w, spec: UniformQuantSpec) -> np.ndarray:
    """Symmetric uniform quantizer with round-half-up and saturation at ``delta*k_max``."""
    w = np.asarray(w, dtype=np.float64)
    _check_finite(w)
    a = np.abs(w)
    q = spec.delta * np.floor(a / spec.delta + 0.5)
    q = np.where(a <= spec.q_max, np.minimum(q, spec.q_max), spec.q_max)
    return np.sign(w) * q


def weighted_density(w, comp: GMComponent):
    """``pi * N(w | mu, gamma^2)``."""
    gamma = comp.gamma
    if gamma < GAMMA_MIN:
        clamp_counter["gamma"] += 1
        gamma = GAMMA_MIN
    w = np.asarray(w, dtype=np.float64)
    z = (w - comp.mu) / gamma
    return comp.pi * np.exp(-0.5 * z * z) / (gamma * _SQRT_2PI)


def weighted_densities(w, gm: LayerGM) -> np.ndarray:
    """All component densities at once, shape ``(K+1, M)``."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    gamma = gm.gamma[:, None]
    z = (w[None, :] - gm.mu[:, None]) / gamma
    return gm.pi[:, None] * np.exp(-0.5 * z * z) / (gamma * _SQRT_2PI)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Softmax down axis 0 (over components) with max subtraction."""
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def responsibility(w, gm: LayerGM) -> np.ndarray:
    # literal form: softmax of the weighted densities themselves, not their logs
    return softmax_rows(weighted_densities(w, gm))


def soft_indicator(w, gm: LayerGM, tau: float | None = None) -> np.ndarray:
    tau = gm.tau if tau is None else tau
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    return softmax_rows(responsibility(w, gm) / tau)


def soft_quantize(w, gm: LayerGM, tau: float | None = None) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    s = soft_indicator(w, gm, tau)
    return (gm.mu @ s).reshape(w.shape)


def assign(w, gm: LayerGM) -> np.ndarray:
    """Component index per weight (argmax responsibility, ties to the lowest index)."""
    w = np.asarray(w, dtype=np.float64)
    # softmax is monotone, so the densities give the same argmax with less rounding
    return np.argmax(weighted_densities(w, gm), axis=0).reshape(w.shape)


def hard_indicator(w, gm: LayerGM) -> np.ndarray:
    idx = assign(w, gm).reshape(-1)
    out = np.zeros((gm.k + 1, idx.size))
    out[idx, np.arange(idx.size)] = 1.0
    return out


def hard_quantize(w, gm: LayerGM) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return gm.mu[assign(w, gm)]


def _nearest(w: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.argmin(np.abs(w[:, None] - centers[None, :]), axis=1)


def kmeans_1d(w: np.ndarray, n_clusters: int, seed: int, max_iter: int = 100):
    """Lloyd's algorithm in one dimension with farthest-point seeding.

    Returns ``(centers, labels, n_degenerate)``.  Clusters that cannot be
    populated because the data has too few distinct values are left as
    placeholders beyond the data range and counted in ``n_degenerate``.
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    rng = np.random.default_rng(seed)
    centers = np.empty(n_clusters)
    centers[0] = w[rng.integers(w.size)]
    for c in range(1, n_clusters):
        d = np.min(np.abs(w[:, None] - centers[None, :c]), axis=1)
        centers[c] = w[int(np.argmax(d))]

    for _ in range(max_iter):
        labels = _nearest(w, centers)
        new = centers.copy()
        for c in range(n_clusters):
            members = w[labels == c]
            if members.size:
                new[c] = members.mean()
            else:
                others = np.delete(new, c)
                d = np.min(np.abs(w[:, None] - others[None, :]), axis=1)
                new[c] = w[int(np.argmax(d))]
        if np.array_equal(new, centers):
            break
        centers = new
    labels = _nearest(w, centers)

    # duplicated centers mean there were fewer distinct values than clusters
    n_degenerate = 0
    seen: set[float] = set()
    span = float(np.max(np.abs(w))) or 1.0
    for c in range(n_clusters):
        if centers[c] in seen:
            n_degenerate += 1
            centers[c] = span * (1 + n_degenerate)
        seen.add(float(centers[c]))
    if n_degenerate:
        labels = _nearest(w, centers)
    return centers, labels, n_degenerate


def kmeans_init(w, k_plus_one: int, seed: int = 0, gamma_mode: str = "empirical",
                gamma_value: float = 0.01, tau: float = 0.01, simplex: bool = True) -> LayerGM:
    """Initial mixture from 1-D k-means over a layer's weights.

    The centroid with the smallest magnitude becomes the zero component (snapped
    to exactly 0 and moved to index 0); the rest are sorted ascending.
    ``gamma_mode="std"`` uses the pooled deviation of all weights about each
    centroid; ``"empirical"`` sets every gamma to ``gamma_value``.
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    _check_finite(w)
    if k_plus_one < 2:
        raise ValueError("need at least 2 components")
    if w.size < k_plus_one:
        raise ValueError(f"{w.size} weights cannot seed {k_plus_one} clusters")

    centers, labels, n_degenerate = kmeans_1d(w, k_plus_one, seed)
    counts = np.bincount(labels, minlength=k_plus_one).astype(np.float64)

    zero = int(np.argmin(np.abs(centers)))
    rest = [c for c in range(k_plus_one) if c != zero]
    rest.sort(key=lambda c: centers[c])
    order = [zero] + rest
    mu = centers[order]
    mu[0] = 0.0
    pi = counts[order] / w.size

    if gamma_mode == "std":
        gamma = np.sqrt(((w[None, :] - mu[:, None]) ** 2).sum(axis=1) / max(w.size - 1, 1))
        gamma = np.maximum(gamma, GAMMA_MIN)
    elif gamma_mode == "empirical":
        gamma = np.full(k_plus_one, float(gamma_value))
    else:
        raise ValueError(f"unknown gamma init mode {gamma_mode!r}")

    if n_degenerate:
        log.warning("k-means: %d of %d clusters are empty; effective K reduced to %d",
                    n_degenerate, k_plus_one, k_plus_one - 1 - n_degenerate)
    return LayerGM.from_values(pi, mu, gamma, tau, simplex=simplex,
                               effective_k=k_plus_one - 1 - n_degenerate)
