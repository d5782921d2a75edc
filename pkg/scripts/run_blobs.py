"""FP32 baseline and 4-bit DGMS co-tuning on the synthetic blobs task.

    python scripts/run_blobs.py --out runs/blobs
"""
import argparse
import os

from dgms import data_io, pipeline
from dgms.config import load_config

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=os.path.join(HERE, "..", "configs", "blobs.cfg"))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default="runs/blobs")
    args = ap.parse_args()

    cfg = load_config(args.config, args.set)
    out = pipeline.ensure_dir(args.out)
    data = pipeline.make_data(cfg)
    fp = pipeline.run_fp32(cfg, data, log_csv=os.path.join(out, "fp32_log.csv"))
    q = pipeline.run_quantize(cfg, data, init=fp.state, log_csv=os.path.join(out, "dgms_log.csv"))
    data_io.save_checkpoint(os.path.join(out, "fp32.ckpt"), fp.state)
    data_io.save_checkpoint(os.path.join(out, "dgms.ckpt"), q.state)
    data_io.save_gm(os.path.join(out, "gm.txt"), q.state.gms)

    ev_fp = pipeline.evaluate(cfg, fp.state, data)
    ev_q = pipeline.evaluate(cfg, q.state, data)
    print(f"fp32  top1={ev_fp['top1']:.4f}")
    print(f"dgms  top1={ev_q['top1']:.4f} cr={ev_q['cr']:.2f} nonzero={ev_q['nonzero']}"
          f"/{ev_q['n_params']} mse={ev_q['mse']:.3e}")
    mse = [r.mse for r in q.reports]
    print(f"quantization mse: epoch 1 {mse[0]:.3e} -> epoch {len(mse)} {mse[-1]:.3e}")


if __name__ == "__main__":
    main()
