"""Config-driven runs shared by the CLI, the experiment scripts and the tests."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import data_io, metrics, packing
from . import train as tr
from .config import Config
from .gm_core import hard_quantize
from .model_zoo import ModelSpec, QuantPolicy, build_cnn, build_mlp


@dataclass
class RunResult:
    state: tr.TrainState
    policy: QuantPolicy
    reports: list


def make_data(cfg: Config):
    if cfg.dataset == "blobs":
        train = data_io.synth_blobs(cfg.classes, cfg.train_n, cfg.spread, cfg.seed,
                                    offset=cfg.offset, split="train")
        test = data_io.synth_blobs(cfg.classes, cfg.test_n, cfg.spread, cfg.seed + 10_000,
                                   offset=cfg.offset, split="test")
        return train, test
    if not cfg.data_path:
        raise data_io.DataError("dataset=cifar10 needs data_path")
    return data_io.load_cifar10_binary(cfg.data_path, cfg.train_n, cfg.test_n, cfg.seed,
                                       classes=cfg.cifar_class_list)


def make_spec(cfg: Config, train: data_io.Dataset) -> ModelSpec:
    shape = train.x.shape[1:]
    if cfg.model == "mlp":
        if len(shape) != 1:
            raise ValueError(f"mlp needs flat inputs, dataset gives {shape}")
        return build_mlp(shape[0], cfg.hidden_sizes, train.num_classes)
    if len(shape) != 3:
        raise ValueError(f"cnn needs CHW inputs, dataset gives {shape}")
    return build_cnn(shape, cfg.conv_widths, train.num_classes)


def make_policy(cfg: Config, spec: ModelSpec, quantize: bool = True) -> QuantPolicy:
    if not quantize:
        return QuantPolicy.none()
    return QuantPolicy.for_model(spec, bits=cfg.bits, k_plus_one=cfg.k, skip=cfg.skip,
                                 act_bits=cfg.act_bits)


def schedule(cfg: Config, n_train: int) -> tr.OneCycleSchedule:
    return tr.OneCycleSchedule(cfg.lr_max, cfg.epochs * math.ceil(n_train / cfg.batch))


def optim(cfg: Config) -> tr.OptimConfig:
    return tr.OptimConfig(cfg.momentum, cfg.weight_decay)


def _restart(state: tr.TrainState) -> tr.TrainState:
    """Fresh optimizer state for a new phase (momentum and step counter reset)."""
    state = state.copy()
    state.momentum, state.step, state.skipped = {}, 0, 0
    return state


def attach_gms(cfg: Config, state: tr.TrainState, policy: QuantPolicy, source=None):
    mode, value = cfg.gamma
    tr.init_gms(state, policy, gamma_mode=mode, gamma_value=value, tau=cfg.tau_init,
                tau_learned=cfg.tau_mode == "learned", simplex=cfg.pi_mode == "simplex",
                source=source)
    if cfg.freeze_gm:
        for gm in state.gms.values():
            gm.trainable = dict.fromkeys(gm.trainable, False)
    return state


def run_fp32(cfg: Config, data=None, log_csv=None) -> RunResult:
    train, test = data or make_data(cfg)
    spec = make_spec(cfg, train)
    policy = make_policy(cfg, spec, quantize=False)
    state = tr.TrainState.fresh(spec, cfg.seed)
    state, reports = tr.train(train, state, policy, schedule(cfg, len(train)), cfg.epochs,
                              cfg.batch, test, optim(cfg), log_csv)
    return RunResult(state, policy, reports)


def run_quantize(cfg: Config, data=None, init: tr.TrainState | None = None, source_gm=None,
                 log_csv=None) -> RunResult:
    """DGMS co-tuning: start from ``init`` (a trained FP32 checkpoint) or from scratch.

    ``source_gm`` (layer -> LayerGM) replaces k-means initialisation with
    transferred mixtures; with ``epochs == 0`` nothing is updated.
    """
    train, test = data or make_data(cfg)
    spec = make_spec(cfg, train) if init is None else init.spec
    policy = make_policy(cfg, spec)
    state = tr.TrainState.fresh(spec, cfg.seed) if init is None else _restart(init)
    state.seed = cfg.seed
    attach_gms(cfg, state, policy, source_gm)
    state, reports = tr.train(train, state, policy, schedule(cfg, len(train)), cfg.epochs,
                              cfg.batch, test, optim(cfg), log_csv)
    return RunResult(state, policy, reports)


def evaluate(cfg: Config, state: tr.TrainState, data=None) -> dict:
    """Hard-quantized accuracy and compression figures for a checkpoint."""
    train, test = data or make_data(cfg)
    quantized = bool(state.gms)
    policy = make_policy(cfg, state.spec, quantize=quantized)
    if quantized and set(policy.quantized_layers(state.spec)) != set(state.gms):
        raise ValueError(f"checkpoint mixtures {sorted(state.gms)} do not match the "
                         f"config's quantized layers {policy.quantized_layers(state.spec)}")
    act = cfg.act_bits < 32
    if act:
        state = state.copy()
        tr.calibrate_activations(state, policy, train.x)
    loss, top1 = tr.evaluate(state, policy, test.x, test.y, "hard" if quantized else "fp",
                             act_quant=act)
    c = tr.census(state, policy)
    out = {"loss": loss, "top1": top1, "n_params": c.n_total,
           "nonzero": metrics.nonzero_params(c.assignments, c.n_unquantized),
           "mse": tr.quantization_mse(state, policy) if quantized else 0.0,
           "cr": metrics.compression_rate_census(c, policy.bits) if quantized else 1.0}
    if quantized:
        out["codebook_overhead"] = metrics.codebook_overhead(c.layer_sizes, policy.bits)
        out["distinct_max"] = max(len(np.unique(q)) for _, q, _ in
                                  tr.hard_weights(state, policy).values())
    return out


def export(state: tr.TrainState, bits: int) -> list[packing.PackedLayer]:
    layers = []
    for name, gm in state.gms.items():
        w = state.params[f"{name}.weight"]
        layers.append(packing.pack_layer(hard_quantize(w, gm), gm, bits, name))
    return layers


def sweep_k(cfg: Config, k_list, data=None, init: tr.TrainState | None = None) -> list[dict]:
    """Quantize once per component count; index bits follow ``ceil(log2(K+1))``."""
    data = data or make_data(cfg)
    rows = []
    for k in k_list:
        bits = max(1, math.ceil(math.log2(k)))
        res = run_quantize(cfg.replace(k=k, bits=bits), data, init)
        ev = evaluate(cfg.replace(k=k, bits=bits), res.state, data)
        rows.append({"k_plus_one": k, "bits": bits, "top1": ev["top1"], "cr": ev["cr"],
                     "nonzero": ev["nonzero"], "mse": ev["mse"]})
    return rows


def write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
