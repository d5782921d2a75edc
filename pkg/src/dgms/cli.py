"""``dgms`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
All artifacts go under ``--out``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback

import numpy as np
from threadpoolctl import threadpool_limits

from . import data_io, infer_rt, packing, pipeline
from . import train as tr
from .config import Config, ConfigError, load_config

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("dgms")


class NumericFailure(ArithmeticError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _config(args, **extra) -> Config:
    overrides = list(args.set or [])
    overrides += [f"{k}={v}" for k, v in extra.items() if v is not None]
    return load_config(args.config, overrides)


def _out(args) -> str:
    return pipeline.ensure_dir(args.out)


def _load_state(cfg: Config, path, data):
    spec = pipeline.make_spec(cfg, data[0])
    return data_io.load_checkpoint(path, spec)


def _write_metrics(path, values: dict) -> str:
    text = "".join(f"{k}={v!r}\n" for k, v in values.items())
    with open(path, "w") as fh:
        fh.write(text)
    return text


def _check_finite(state: tr.TrainState, reports) -> None:
    bad = [k for k, v in state.params.items() if not np.all(np.isfinite(v))]
    if bad:
        raise NumericFailure(f"non-finite parameters after training: {', '.join(bad)}")
    if reports and not np.isfinite(reports[-1].loss):
        raise NumericFailure(f"training loss is {reports[-1].loss}")


# --- subcommands -----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args, epochs=args.epochs)
    out = _out(args)
    res = pipeline.run_fp32(cfg, log_csv=os.path.join(out, "train_log.csv"))
    _check_finite(res.state, res.reports)
    data_io.save_checkpoint(os.path.join(out, "model.ckpt"), res.state)
    r = res.reports[-1]
    print(f"train: epochs={cfg.epochs} top1={r.top1:.4f} loss={r.loss:.4g}")
    return 0


def _finish_quantized(cfg, out, res, data) -> None:
    _check_finite(res.state, res.reports)
    data_io.save_checkpoint(os.path.join(out, "model.ckpt"), res.state)
    data_io.save_gm(os.path.join(out, "gm.txt"), res.state.gms)
    ev = pipeline.evaluate(cfg, res.state, data)
    print(_write_metrics(os.path.join(out, "metrics.txt"), ev), end="")


def cmd_quantize(args) -> int:
    cfg = _config(args, bits=args.bits, k=args.k, epochs=args.epochs)
    out = _out(args)
    data = pipeline.make_data(cfg)
    init = _load_state(cfg, args.init, data) if args.init else None
    res = pipeline.run_quantize(cfg, data, init, log_csv=os.path.join(out, "train_log.csv"))
    _finish_quantized(cfg, out, res, data)
    return 0


def cmd_transfer(args) -> int:
    cfg = _config(args, epochs=args.epochs)
    out = _out(args)
    data = pipeline.make_data(cfg)
    init = _load_state(cfg, args.init, data)
    source = data_io.load_gm(args.source_gm)
    res = pipeline.run_quantize(cfg, data, init, source_gm=source,
                                log_csv=os.path.join(out, "train_log.csv"))
    _finish_quantized(cfg, out, res, data)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    data = pipeline.make_data(cfg)
    state = _load_state(cfg, args.ckpt, data)
    ev = pipeline.evaluate(cfg, state, data)
    if not np.isfinite(ev["loss"]):
        raise NumericFailure(f"evaluation loss is {ev['loss']}")
    text = "".join(f"{k}={v!r}\n" for k, v in ev.items())
    if args.out:
        _write_metrics(os.path.join(_out(args), "eval.txt"), ev)
    print(text, end="")
    return 0


def cmd_export(args) -> int:
    cfg = _config(args)
    data = pipeline.make_data(cfg)
    state = _load_state(cfg, args.ckpt, data)
    if not state.gms:
        raise ConfigError(f"{args.ckpt} has no mixtures; run quantize first")
    path = os.path.join(_out(args), "model.qsmd")
    layers = pipeline.export(state, cfg.bits)
    packing.write_packed_model(path, layers)
    print(f"export: {len(layers)} layers, {os.path.getsize(path)} bytes -> {path}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    data = pipeline.make_data(cfg)
    state = _load_state(cfg, args.ckpt, data)
    layers = (packing.read_packed_model(args.packed) if args.packed
              else pipeline.export(state, cfg.bits))
    x = np.asarray(data[1].x[:args.batch], dtype=np.float32)
    if len(x) == 0:
        raise data_io.DataError("bench needs at least one test example")
    inputs: dict = {}
    infer_rt.run_packed_model(state.spec, state.params, state.buffers, {}, x, capture=inputs)
    cases = []
    for layer in layers:
        if layer.name not in inputs:
            raise ConfigError(f"packed layer {layer.name!r} is not in model {state.spec.name}")
        desc = state.spec.layer(layer.name)
        cases.append((layer.name, layer, inputs[layer.name], desc.stride, desc.pad))
    with threadpool_limits(limits=args.threads):
        report = infer_rt.bench(state.spec.name, cases, args.repeats, args.warmup)
    path = os.path.join(_out(args), "bench.csv")
    report.write_csv(path)
    if report.low_confidence:
        print("bench: fewer than 3 repeats, timings are low confidence", file=sys.stderr)
    for r in report.rows:
        print(f"{r.layer:>8s} {r.path:>6s} median={r.median_us:.1f}us iqr={r.iqr_us:.1f}us "
              f"bytes={r.weight_bytes}")
    return 0


def cmd_sweep_k(args) -> int:
    cfg = _config(args, epochs=args.epochs)
    try:
        ks = [int(v) for v in args.list.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--list expects comma separated integers, got {args.list!r}") from None
    if not ks:
        raise ConfigError("--list is empty")
    data = pipeline.make_data(cfg)
    if args.init:
        init = _load_state(cfg, args.init, data)
    else:
        init = pipeline.run_fp32(cfg, data).state
    rows = pipeline.sweep_k(cfg, ks, data, init)
    pipeline.write_rows(os.path.join(_out(args), "sweep_k.csv"), rows)
    for r in rows:
        print(f"K+1={r['k_plus_one']:3d} bits={r['bits']} top1={r['top1']:.4f} cr={r['cr']:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    rep = tr.grad_check(k_plus_one=args.k, tau=args.tau, seed=args.seed, h=args.h,
                        h_log=args.h_log)
    for group, err in rep.errors.items():
        print(f"{group:10s} rel_err={err:.3e}")
    if rep.ill_conditioned:
        print(f"ill-conditioned: {rep.reason}")
    if not rep.passed(args.tol):
        raise NumericFailure(f"gradient check failed (tol {args.tol:g})")
    print("gradcheck: ok")
    return 0


def cmd_inspect(args) -> int:
    layers = packing.read_packed_model(args.path)
    print(f"{args.path}: {len(layers)} layers, {os.path.getsize(args.path)} bytes")
    print(packing.describe(layers))
    return 0


# --- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dgms", description="Mixture-model weight quantization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def add(name, fn, help_, out_required=True):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="key=value config file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        s.add_argument("--out", required=out_required, help="artifact directory")
        s.set_defaults(fn=fn)
        return s

    s = add("train", cmd_train, "train the full-precision baseline")
    s.add_argument("--epochs", type=int)
    s = add("quantize", cmd_quantize, "co-tune weights and mixtures")
    s.add_argument("--init", help="checkpoint to start from (default: from scratch)")
    s.add_argument("--bits", type=int)
    s.add_argument("--k", type=int, help="number of mixture components K+1")
    s.add_argument("--epochs", type=int)
    s = add("eval", cmd_eval, "accuracy and compression of a checkpoint", out_required=False)
    s.add_argument("--ckpt", required=True)
    s = add("export", cmd_export, "write the packed QSMD model")
    s.add_argument("--ckpt", required=True)
    s = add("bench", cmd_bench, "time dense against packed kernels")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--packed", help="QSMD file (default: export from --ckpt)")
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--repeats", type=int, default=10)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--threads", type=int, default=1)
    s = add("transfer", cmd_transfer, "apply a mixture file to another model")
    s.add_argument("--source-gm", required=True, dest="source_gm")
    s.add_argument("--init", required=True, help="checkpoint of the target model")
    s.add_argument("--epochs", type=int, default=0)
    s = add("sweep-k", cmd_sweep_k, "quantize over a list of component counts")
    s.add_argument("--list", required=True, help="comma separated K+1 values")
    s.add_argument("--init", help="FP32 checkpoint (default: train one first)")
    s.add_argument("--epochs", type=int)
    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("--k", type=int, default=4, help="components K+1")
    s.add_argument("--tau", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-6, help="step for weights and centroids")
    s.add_argument("--h-log", type=float, default=1e-5, dest="h_log",
                   help="step for pi logits, log gamma and log tau")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)
    s = sub.add_parser("inspect", help="dump packed model headers")
    s.add_argument("path")
    s.set_defaults(fn=cmd_inspect)
    return p


def _origin(exc: BaseException) -> str:
    """Name of the innermost package module the exception passed through."""
    name = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        base = os.path.splitext(os.path.basename(frame.filename))[0]
        if os.path.basename(os.path.dirname(frame.filename)) == "dgms":
            name = base
    return name


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        with np.errstate(over="ignore", under="ignore"):
            return args.fn(args)
    except Exception as e:  # noqa: BLE001 - mapped to an exit code below
        classified = _classify(e)
        if classified is None:
            raise
        code, kind, msg = classified
        print(f"dgms [{_origin(e)}] {kind}: {msg}", file=sys.stderr)
        return code


def _classify(e: Exception):
    if isinstance(e, data_io.DataError):
        return EXIT_DATA, "data error", str(e)
    if isinstance(e, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return EXIT_DATA, "data error", f"{e.strerror}: {e.filename}"
    if isinstance(e, (ArithmeticError, FloatingPointError)):
        return EXIT_NUMERIC, "numeric failure", str(e)
    if isinstance(e, (ConfigError, ValueError, KeyError)):
        return EXIT_CONFIG, "config error", str(e)
    return None

if __name__ == "__main__":
    sys.exit(main())
