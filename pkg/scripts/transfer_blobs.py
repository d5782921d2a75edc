"""Mixture transfer from blobs domain A to the shifted domain B.

Trains DGMS on A, then applies A's mixtures to an FP32 model of B with zero
and one epoch of co-tuning, next to a native DGMS run on B.

    python scripts/transfer_blobs.py
"""
import argparse
import os

from dgms import pipeline
from dgms.config import load_config

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIGS = os.path.join(HERE, "..", "configs")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--source", default=os.path.join(CONFIGS, "blobs.cfg"))
    ap.add_argument("--target", default=os.path.join(CONFIGS, "blobs_b.cfg"))
    args = ap.parse_args()

    cfg_a, cfg_b = load_config(args.source), load_config(args.target)
    data_a, data_b = pipeline.make_data(cfg_a), pipeline.make_data(cfg_b)
    gm_a = pipeline.run_quantize(cfg_a, data_a, init=pipeline.run_fp32(cfg_a, data_a).state).state.gms

    fp_b = pipeline.run_fp32(cfg_b, data_b)
    native = pipeline.run_quantize(cfg_b, data_b, init=fp_b.state)
    print(f"native DGMS on B   top1={pipeline.evaluate(cfg_b, native.state, data_b)['top1']:.4f}")
    for epochs in (0, 1):
        res = pipeline.run_quantize(cfg_b.replace(epochs=epochs), data_b, init=fp_b.state,
                                    source_gm={k: v.copy() for k, v in gm_a.items()})
        ev = pipeline.evaluate(cfg_b, res.state, data_b)
        print(f"A->B transfer E={epochs} top1={ev['top1']:.4f} cr={ev['cr']:.2f}")


if __name__ == "__main__":
    main()
