"""A small array-level reverse-mode autodiff tape.

Only the ops the reference models and the mixture projection need are
provided.  Each op returns a :class:`Tensor` holding its parents and a closure
that pushes the output gradient back to them.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from . import layers
from .gm_core import GAMMA_MIN, _SQRT_2PI

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        g = np.reshape(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# --- layer ops ---------------------------------------------------------------

def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = layers.dense_forward(x.data, W.data, None if b is None else b.data)
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        if x.requires_grad:
            x.accumulate(g @ W.data)
        if W.requires_grad:
            W.accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=0))

    return _result(y, parents, bw)


def conv2d(x: Tensor, W: Tensor, b: Tensor | None = None, stride=1, pad=0) -> Tensor:
    if x.data.ndim != 4 or W.data.ndim != 4 or x.data.shape[1] != W.data.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {W.shape}")
    co, _, kh, kw = W.data.shape
    cols, oh, ow = layers.im2col(x.data, kh, kw, stride, pad)
    Wm = W.data.reshape(co, -1)
    y = cols @ Wm.T
    if b is not None:
        y = y + b.data
    n = x.data.shape[0]
    out = y.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
        if W.requires_grad:
            W.accumulate((gm.T @ cols).reshape(W.data.shape))
        if b is not None and b.requires_grad:
            b.accumulate(gm.sum(axis=0))
        if x.requires_grad:
            x.accumulate(layers.col2im(gm @ Wm, x.data.shape, kh, kw, stride, pad))

    return _result(np.ascontiguousarray(out), parents, bw)


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, running_mean, running_var,
              training: bool, momentum=0.1, eps=1e-5) -> Tensor:
    """Batchnorm over axis 1.  In training mode updates the running stats in place."""
    axes = (0,) + tuple(range(2, x.data.ndim))
    shape = (1, -1) + (1,) * (x.data.ndim - 2)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv.reshape(shape)
    else:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // x.data.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    y = xhat * scale.data.reshape(shape) + shift.data.reshape(shape)

    def bw(g):
        if scale.requires_grad:
            scale.accumulate((g * xhat).sum(axis=axes))
        if shift.requires_grad:
            shift.accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * scale.data.reshape(shape)
            if training:
                gx = (gx - gx.mean(axis=axes, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
            x.accumulate(gx * inv.reshape(shape))

    return _result(y, (x, scale, shift), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x.accumulate(g * mask)

    return _result(x.data * mask, (x,), bw)


def avgpool(x: Tensor, k: int) -> Tensor:
    y = layers.avgpool(x.data, k)
    n, c, oh, ow = y.shape

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :oh * k, :ow * k] = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        x.accumulate(gx)

    return _result(y, (x,), bw)


def flatten(x: Tensor) -> Tensor:
    shape = x.data.shape

    def bw(g):
        x.accumulate(g.reshape(shape))

    return _result(x.data.reshape(shape[0], -1), (x,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class."""
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if n == 0:
        raise ValueError("cross_entropy: empty batch")
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"cross_entropy: labels must be {n} ints in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits.accumulate(g * p / n)

    return _result(np.array(loss), (logits,), bw)


# --- mixture projection ------------------------------------------------------

def soft_quantize(w: Tensor, mu: Tensor, pi_logits: Tensor, log_gamma: Tensor,
                  log_tau: Tensor, simplex: bool = True, cache: dict | None = None) -> Tensor:
    """Soft projection of ``w`` onto the centroids, differentiable in every input.

    ``mu[0]`` receives no gradient.  If ``cache`` is given the hard assignment
    (argmax of the densities) is stored under ``"assign"`` as a by-product.
    """
    shape = w.data.shape
    x = w.data.reshape(-1)
    mu_v = mu.data
    if simplex:
        e = np.exp(pi_logits.data - pi_logits.data.max())
        pi = e / e.sum()
    else:
        pi = pi_logits.data
    gamma_raw = np.exp(log_gamma.data)
    clamped = gamma_raw < GAMMA_MIN
    gamma = np.where(clamped, GAMMA_MIN, gamma_raw)
    tau = math.exp(log_tau.data.item())

    diff = x[None, :] - mu_v[:, None]                       # (K+1, M)
    gcol = gamma[:, None]
    dens = np.exp(-0.5 * (diff / gcol) ** 2) / (gcol * _SQRT_2PI)
    d = pi[:, None] * dens
    ed = np.exp(d - d.max(axis=0, keepdims=True))
    r = ed / ed.sum(axis=0, keepdims=True)
    z = r / tau
    ez = np.exp(z - z.max(axis=0, keepdims=True))
    s = ez / ez.sum(axis=0, keepdims=True)
    phi = mu_v @ s
    if cache is not None:
        cache["assign"] = np.argmax(d, axis=0).reshape(shape)

    def bw(g):
        g = g.reshape(-1)
        if mu.requires_grad:
            gmu = s @ g
        gz = s * (g[None, :] * (mu_v[:, None] - phi[None, :]))
        gr = gz / tau
        gd = r * (gr - (r * gr).sum(axis=0, keepdims=True))
        t = gd * d                                            # (K+1, M)
        u = t * diff / gcol ** 2
        if w.requires_grad:
            w.accumulate((-u.sum(axis=0)).reshape(shape))
        if mu.requires_grad:
            gmu = gmu + u.sum(axis=1)
            gmu[0] = 0.0
            mu.accumulate(gmu)
        if pi_logits.requires_grad:
            gpi = (gd * dens).sum(axis=1)
            if simplex:
                gpi = pi * (gpi - (pi * gpi).sum())
            pi_logits.accumulate(gpi)
        if log_gamma.requires_grad:
            ggam = (t * (diff ** 2 / gcol ** 3 - 1.0 / gcol)).sum(axis=1)
            log_gamma.accumulate(np.where(clamped, 0.0, ggam * gamma))
        if log_tau.requires_grad:
            log_tau.accumulate(np.array(-(gz * z).sum()))

    return _result(phi.reshape(shape), (w, mu, pi_logits, log_gamma, log_tau), bw)
