"""Accuracy and compression over a list of component counts K+1.

    python scripts/sweep_k.py --list 4,8,16 --out runs/sweep
"""
import argparse
import os

from dgms import pipeline
from dgms.config import load_config

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=os.path.join(HERE, "..", "configs", "blobs.cfg"))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--list", default="4,8,16")
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    cfg = load_config(args.config, args.set)
    data = pipeline.make_data(cfg)
    init = pipeline.run_fp32(cfg, data).state
    rows = pipeline.sweep_k(cfg, [int(v) for v in args.list.split(",")], data, init)
    path = os.path.join(pipeline.ensure_dir(args.out), "sweep_k.csv")
    pipeline.write_rows(path, rows)
    print(f"{'K+1':>4} {'bits':>4} {'top1':>7} {'CR':>6} {'nonzero':>8} {'mse':>10}")
    for r in rows:
        print(f"{r['k_plus_one']:>4} {r['bits']:>4} {r['top1']:>7.4f} {r['cr']:>6.2f} "
              f"{r['nonzero']:>8} {r['mse']:>10.3e}")
    print(f"-> {path}")


if __name__ == "__main__":
    main()
