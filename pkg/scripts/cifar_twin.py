"""FP32 and 4-bit DGMS small CNN on a CIFAR-10 subset, trained identically.

Needs the CIFAR-10 binary release (cifar-10-batches-bin):

    python scripts/cifar_twin.py --data /path/to/cifar-10-batches-bin --out runs/cifar
"""
import argparse
import os
import time

from dgms import data_io, pipeline
from dgms.config import load_config

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=os.path.join(HERE, "..", "configs", "cifar_cnn.cfg"))
    ap.add_argument("--data", default=os.environ.get("DGMS_CIFAR10_DIR"))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default="runs/cifar")
    args = ap.parse_args()

    extra = [f"data_path={args.data}"] if args.data else []
    cfg = load_config(args.config, args.set + extra)
    out = pipeline.ensure_dir(args.out)
    data = pipeline.make_data(cfg)
    t0 = time.perf_counter()
    fp = pipeline.run_fp32(cfg, data, log_csv=os.path.join(out, "fp32_log.csv"))
    t1 = time.perf_counter()
    q = pipeline.run_quantize(cfg, data, init=fp.state, log_csv=os.path.join(out, "dgms_log.csv"))
    t2 = time.perf_counter()
    data_io.save_checkpoint(os.path.join(out, "fp32.ckpt"), fp.state)
    data_io.save_checkpoint(os.path.join(out, "dgms.ckpt"), q.state)
    a = pipeline.evaluate(cfg, fp.state, data)["top1"]
    ev = pipeline.evaluate(cfg, q.state, data)
    print(f"fp32 top1={a:.4f} ({t1 - t0:.0f}s)")
    print(f"dgms top1={ev['top1']:.4f} cr={ev['cr']:.2f} ({t2 - t1:.0f}s)")
    print(f"gap {100 * (a - ev['top1']):.2f} points")


if __name__ == "__main__":
    main()
