"""Weight / mixture co-tuning: quantized forward, gradients, SGD and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import gm_core, metrics
from .gm_core import GAMMA_MIN, TAU_MIN, LayerGM
from .model_zoo import ModelSpec, QuantPolicy, activation_spec, init_buffers, init_params

log = logging.getLogger(__name__)

GM_FIELDS = ("mu", "pi_logits", "log_gamma", "log_tau")
_GM_GROUP = {"mu": "mu", "pi_logits": "pi", "log_gamma": "gamma", "log_tau": "tau"}


@dataclass
class TrainState:
    spec: ModelSpec
    params: dict
    buffers: dict
    gms: dict = field(default_factory=dict)
    momentum: dict = field(default_factory=dict)
    step: int = 0
    skipped: int = 0
    seed: int = 0

    @classmethod
    def fresh(cls, spec: ModelSpec, seed: int = 0) -> "TrainState":
        return cls(spec, init_params(spec, seed), init_buffers(spec), seed=seed)

    def copy(self) -> "TrainState":
        return TrainState(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            {k: g.copy() for k, g in self.gms.items()},
            {k: v.copy() for k, v in self.momentum.items()},
            self.step, self.skipped, self.seed,
        )


@dataclass(frozen=True)
class OneCycleSchedule:
    """Linear warmup from ``max_lr/25`` then cosine decay to ``max_lr/100``."""

    max_lr: float
    total_steps: int
    warmup: float = 0.3

    def __post_init__(self):
        if not self.max_lr > 0:
            raise ValueError("max_lr must be positive")

    def lr(self, t: int) -> float:
        lo, hi, end = self.max_lr / 25, self.max_lr, self.max_lr / 100
        total = max(self.total_steps, 1)
        warm = self.warmup * total
        t = min(max(t, 0), total)
        if t < warm:
            return lo + (hi - lo) * t / warm
        frac = (t - warm) / max(total - warm, 1e-12)
        return end + (hi - end) * 0.5 * (1 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class OptimConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class Tape:
    logits: ad.Tensor
    params: dict
    gm: dict
    assign: dict


def init_gms(state: TrainState, policy: QuantPolicy, *, gamma_mode="empirical",
             gamma_value=0.01, tau=0.01, tau_learned=False, simplex=True,
             source: dict | None = None, seed: int | None = None) -> TrainState:
    """Attach a mixture to every policy-quantized layer.

    With ``source`` (layer name -> LayerGM) the mixtures are copied instead of
    running k-means, which is how a sub-distribution is transferred.
    """
    seed = state.seed if seed is None else seed
    state.gms = {}
    for i, name in enumerate(policy.quantized_layers(state.spec)):
        if source is not None:
            if name not in source:
                raise KeyError(f"source mixture has no layer {name!r}")
            gm = source[name].copy()
        else:
            gm = gm_core.kmeans_init(state.params[f"{name}.weight"], policy.k_plus_one,
                                     seed=seed + i, gamma_mode=gamma_mode,
                                     gamma_value=gamma_value, tau=tau, simplex=simplex)
        gm.trainable["tau"] = tau_learned
        state.gms[name] = gm
    return state


def _weight_layer(l, x, wt, bt):
    if l.kind == "dense":
        return ad.dense(x, wt, bt)
    return ad.conv2d(x, wt, bt, l.stride, l.pad)


def forward_quantized(batch, state: TrainState, policy: QuantPolicy, mode: str = "soft",
                      training: bool = True, act_quant: bool = False,
                      act_stats: dict | None = None) -> Tape:
    """Run the model; quantized layers use the soft projection, the hard one, or raw weights.

    ``mode`` is ``"soft"`` (training), ``"hard"`` (deployment) or ``"fp"``.
    ``act_stats`` collects per-layer input abs-max for activation calibration.
    """
    spec = state.spec
    x = ad.Tensor(batch)
    if x.shape[1:] != tuple(spec.input_shape):
        raise ValueError(f"{spec.name}: input shape {x.shape[1:]} != {spec.input_shape}")
    quantized = set(policy.quantized_layers(spec)) if mode != "fp" else set()
    for name in quantized:
        if name not in state.gms:
            raise ValueError(f"layer {name!r} is quantized by the policy but has no mixture")
    ptens = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in state.params.items()}
    gtens, assign = {}, {}
    for l in spec.layers:
        if l.kind in ("dense", "conv2d"):
            wt = ptens[f"{l.name}.weight"]
            if l.kind == "dense" and (x.data.ndim != 2 or x.shape[1] != wt.shape[1]):
                raise ValueError(f"layer {l.name!r}: input {x.shape} vs weight {wt.shape}")
            if l.kind == "conv2d" and (x.data.ndim != 4 or x.shape[1] != wt.shape[1]):
                raise ValueError(f"layer {l.name!r}: input {x.shape} vs weight {wt.shape}")
            if l.name in quantized:
                gm = state.gms[l.name]
                if mode == "soft":
                    g = {f: ad.Tensor(np.asarray(getattr(gm, f)), requires_grad=True)
                         for f in GM_FIELDS}
                    cache = {}
                    wt = ad.soft_quantize(wt, g["mu"], g["pi_logits"], g["log_gamma"],
                                          g["log_tau"], simplex=gm.simplex, cache=cache)
                    gtens[l.name] = g
                    assign[l.name] = cache["assign"]
                else:
                    idx = gm_core.assign(wt.data, gm)
                    assign[l.name] = idx
                    wt = ad.Tensor(gm.mu[idx])
                if act_stats is not None:
                    act_stats[l.name] = max(act_stats.get(l.name, 0.0), float(np.abs(x.data).max()))
                if act_quant and policy.act_bits < 32:
                    aspec = activation_spec(state.buffers.get(f"act.{l.name}", np.zeros(1))[0],
                                            policy.act_bits)
                    if aspec is not None:
                        x = ad.Tensor(gm_core.uniform_quantize(x.data, aspec))
            x = _weight_layer(l, x, wt, ptens[f"{l.name}.bias"])
        elif l.kind == "batchnorm":
            x = ad.batchnorm(x, ptens[f"{l.name}.scale"], ptens[f"{l.name}.shift"],
                             state.buffers[f"{l.name}.mean"], state.buffers[f"{l.name}.var"],
                             training=training)
        elif l.kind == "relu":
            x = ad.relu(x)
        elif l.kind == "avgpool":
            x = ad.avgpool(x, l.kernel)
        elif l.kind == "flatten":
            x = ad.flatten(x)
        else:
            raise ValueError(f"unknown layer kind {l.kind!r}")
    return Tape(x, ptens, gtens, assign)


def cross_entropy_loss(logits, labels) -> ad.Tensor:
    return ad.cross_entropy(ad.as_tensor(logits), labels)


def backward(loss: ad.Tensor, tape: Tape) -> dict:
    """Gradients keyed ``param/<name>`` and ``gm/<layer>/<field>``; ``mu[0]`` is always zero."""
    ad.backward(loss)
    grads = {}
    for k, t in tape.params.items():
        grads[f"param/{k}"] = t.grad if t.grad is not None else np.zeros_like(t.data)
    for name, g in tape.gm.items():
        for f, t in g.items():
            gr = t.grad if t.grad is not None else np.zeros_like(t.data)
            if f == "mu":
                gr = gr.copy()
                gr[0] = 0.0
            grads[f"gm/{name}/{f}"] = gr
    return grads


def sgd_step(state: TrainState, grads: dict, lr: float, optim: OptimConfig = OptimConfig()
             ) -> TrainState:
    """Momentum SGD; weight decay only on network parameters.

    A step with any non-finite gradient is skipped and counted in ``state.skipped``.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; step skipped", state.step)
        return state

    def update(key, value, g, decay):
        if decay:
            g = g + optim.weight_decay * value
        buf = state.momentum.get(key)
        buf = g.copy() if buf is None else optim.momentum * buf + g
        state.momentum[key] = buf
        return value - lr * buf

    for k in state.params:
        g = grads.get(f"param/{k}")
        if g is not None:
            state.params[k] = update(f"param/{k}", state.params[k], g, True)
    for name, gm in state.gms.items():
        for f in GM_FIELDS:
            key = f"gm/{name}/{f}"
            if key not in grads or not gm.trainable[_GM_GROUP[f]]:
                continue
            val = np.asarray(getattr(gm, f), dtype=np.float64)
            new = update(key, val, grads[key], False)
            if f == "mu":
                new[0] = 0.0
            elif f == "log_gamma":
                new = np.maximum(new, math.log(GAMMA_MIN))
            elif f == "log_tau":
                new = max(float(new), math.log(TAU_MIN))
            setattr(gm, f, new)
    state.step += 1
    return state


def hard_weights(state: TrainState, policy: QuantPolicy) -> dict:
    """Quantized layer name -> (weights, hard-quantized weights, assignments)."""
    out = {}
    for name in policy.quantized_layers(state.spec):
        w = state.params[f"{name}.weight"]
        idx = gm_core.assign(w, state.gms[name])
        out[name] = (w, state.gms[name].mu[idx], idx)
    return out


def quantization_mse(state: TrainState, policy: QuantPolicy) -> float:
    hw = hard_weights(state, policy)
    if not hw:
        return 0.0
    return metrics.quantization_mse([w for w, _, _ in hw.values()],
                                    [q for _, q, _ in hw.values()])


def census(state: TrainState, policy: QuantPolicy) -> metrics.ModelCensus:
    hw = hard_weights(state, policy)
    n_total = sum(v.size for v in state.params.values())
    n_q = sum(w.size for w, _, _ in hw.values())
    return metrics.ModelCensus(
        n_total=n_total,
        n_unquantized=n_total - n_q,
        layer_sizes=[w.size for w, _, _ in hw.values()],
        assignments=[idx for _, _, idx in hw.values()],
    )


def evaluate(state: TrainState, policy: QuantPolicy, x, y, mode="hard", batch=500,
             act_quant=False):
    """Mean loss and top-1 accuracy (fraction) without touching any state."""
    if len(x) == 0:
        return float("nan"), float("nan")
    total_loss, correct = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(x), batch):
            xb, yb = x[i:i + batch], y[i:i + batch]
            tape = forward_quantized(xb, state, policy, mode=mode, training=False,
                                     act_quant=act_quant)
            total_loss += float(cross_entropy_loss(tape.logits, yb).data) * len(xb)
            correct += int((tape.logits.data.argmax(axis=1) == yb).sum())
    return total_loss / len(x), correct / len(x)


def calibrate_activations(state: TrainState, policy: QuantPolicy, x, batch=500) -> None:
    stats: dict = {}
    with ad.no_grad():
        for i in range(0, len(x), batch):
            forward_quantized(x[i:i + batch], state, policy, mode="hard", training=False,
                              act_stats=stats)
    for name, m in stats.items():
        state.buffers[f"act.{name}"] = np.array([m])


def train(dataset, state: TrainState, policy: QuantPolicy, schedule: OneCycleSchedule,
          epochs: int, batch: int = 64, eval_set=None, optim: OptimConfig = OptimConfig(),
          log_csv=None):
    """Co-tune weights and mixtures for ``epochs`` epochs.

    Returns ``(state, reports)``: one :class:`metrics.MetricsReport` per epoch
    (or a single evaluation-only report when ``epochs == 0``).  Accuracy in the
    reports is measured with hard-quantized weights on ``eval_set`` (or the
    training set).  ``mse`` is the quantization error averaged over the epoch's
    steps.
    """
    x, y = dataset.x, dataset.y
    if len(x) == 0:
        raise ValueError("training set is empty")
    if len(x) != len(y):
        raise ValueError(f"dataset has {len(x)} inputs but {len(y)} labels")
    if y.min() < 0 or y.max() >= state.spec.num_classes:
        raise ValueError(f"labels outside [0, {state.spec.num_classes})")
    ex, ey = (eval_set.x, eval_set.y) if eval_set is not None else (x, y)
    mode = "soft" if policy.quantized_layers(state.spec) else "fp"

    def report(epoch, loss, mse):
        _, top1 = evaluate(state, policy, ex, ey, mode="hard" if mode == "soft" else "fp")
        c = census(state, policy)
        return metrics.MetricsReport(
            epoch=epoch, loss=loss, top1=top1, mse=mse,
            cr=metrics.compression_rate_census(c, policy.bits),
            nonzero=metrics.nonzero_params(c.assignments, c.n_unquantized),
            n_params=c.n_total,
        )

    reports = []
    if epochs == 0:
        loss, _ = evaluate(state, policy, x, y, mode="hard" if mode == "soft" else "fp")
        reports.append(report(0, loss, quantization_mse(state, policy)))
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([state.seed, epoch, state.step])
        perm = rng.permutation(len(x))
        losses, mses = [], []
        for i in range(0, len(x), batch):
            sel = perm[i:i + batch]
            tape = forward_quantized(x[sel], state, policy, mode=mode, training=True)
            loss = cross_entropy_loss(tape.logits, y[sel])
            grads = backward(loss, tape)
            if tape.assign:
                ws = [state.params[f"{n}.weight"] for n in tape.assign]
                qs = [state.gms[n].mu[a] for n, a in tape.assign.items()]
                mses.append(metrics.quantization_mse(ws, qs))
            sgd_step(state, grads, schedule.lr(state.step), optim)
            losses.append(float(loss.data))
        r = report(epoch, float(np.mean(losses)), float(np.mean(mses)) if mses else 0.0)
        log.info("epoch %d loss %.4f top1 %.4f mse %.3g cr %.2f",
                 epoch, r.loss, r.top1, r.mse, r.cr)
        reports.append(r)
    if log_csv is not None:
        write_log(log_csv, reports)
    return state, reports


def write_log(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "top1", "mse", "cr"])
        for r in reports:
            w.writerow([r.epoch, repr(r.loss), repr(r.top1), repr(r.mse), repr(r.cr)])


# --- gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict
    ill_conditioned: bool
    reason: str = ""

    def passed(self, tol: float) -> bool:
        return all(e <= tol for e in self.errors.values())


def _rel_err(a: np.ndarray, n: np.ndarray, floor: float = 1e-10) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale < floor:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def grad_check(in_features=5, out_features=4, k_plus_one=4, tau=0.05, seed=0, batch=8,
               classes=None, gamma=None, weight_scale=0.5, quantized=True,
               h=1e-6, h_log=1e-5) -> GradCheckReport:
    """Central-difference check of every parameter group of one dense layer.

    Errors are normwise: ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    per group.  The report is flagged ill-conditioned when the soft indicator
    is saturated (the projection is locally flat, so the check says nothing)
    or when differences at ``h`` and ``h/2`` disagree.  The default step is
    small because the soft projection changes over a width of about
    ``tau * gamma``; coarser steps straddle it and the truncation error swamps
    the comparison.  The dimensionless groups (``pi_logits``, ``log_gamma``,
    ``log_tau``) use ``h_log`` instead: their gradients can be tiny, and at a
    step of ``h`` the rounding error of the loss difference dominates.
    """
    rng = np.random.default_rng(seed)
    classes = classes or out_features
    W = rng.standard_normal((out_features, in_features)) * weight_scale
    b = rng.standard_normal(out_features) * 0.1
    x = rng.standard_normal((batch, in_features))
    labels = rng.integers(0, out_features, batch)
    gm = None
    if quantized:
        gm = gm_core.kmeans_init(W, k_plus_one, seed=seed, gamma_mode="std", tau=tau)
        if gamma is not None:
            gm.log_gamma = np.log(np.asarray(gamma, dtype=np.float64) * np.ones(k_plus_one))
        gm.pi_logits = gm.pi_logits + 0.3 * rng.standard_normal(k_plus_one)
        gm.pi_logits[~np.isfinite(gm.pi_logits)] = -3.0

    groups = {"W": W, "bias": b}
    if quantized:
        groups.update(mu=gm.mu, pi_logits=gm.pi_logits, log_gamma=gm.log_gamma,
                      log_tau=np.array([gm.log_tau]))

    def build(vals, with_grad):
        ts = {k: ad.Tensor(v, requires_grad=with_grad) for k, v in vals.items()}
        w_eff = ts["W"]
        if quantized:
            w_eff = ad.soft_quantize(ts["W"], ts["mu"], ts["pi_logits"], ts["log_gamma"],
                                     ts["log_tau"], simplex=gm.simplex)
        return ad.cross_entropy(ad.dense(ad.Tensor(x), w_eff, ts["bias"]), labels), ts

    loss, ts = build(groups, True)
    ad.backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in ts.items()}
    if quantized:
        analytic["mu"][0] = 0.0

    def loss_at(vals):
        with ad.no_grad():
            return float(build(vals, False)[0].data)

    def numeric(scale):
        out = {}
        for k, v in groups.items():
            step = scale * (h_log if k in ("pi_logits", "log_gamma", "log_tau") else h)
            g = np.zeros(v.size)
            flat_idx = range(1, v.size) if k == "mu" else range(v.size)
            for j in flat_idx:
                vals = {kk: vv.copy() for kk, vv in groups.items()}
                vals[k].flat[j] += step
                fp = loss_at(vals)
                vals[k].flat[j] -= 2 * step
                fm = loss_at(vals)
                g[j] = (fp - fm) / (2 * step)
            out[k] = g.reshape(v.shape)
        return out

    n1 = numeric(1.0)
    errors = {k: _rel_err(analytic[k], n1[k]) for k in groups}
    reason = ""
    if quantized:
        s = gm_core.soft_indicator(W, gm)
        if np.mean(s.max(axis=0) > 1 - 1e-12) > 0.99:
            reason = "soft indicator saturated; projection is locally constant"
        else:
            n2 = numeric(0.5)
            drift = max(_rel_err(n1[k], n2[k]) for k in groups)
            if drift > 1e-3:
                reason = f"finite differences unresolved at h={h} (drift {drift:.2e})"
    return GradCheckReport(errors, bool(reason), reason)
