"""Desk-scale overfit run: 16 synthetic scenes, E=10, P=8, C=32, L=3, 40x20 grid.

    python3 scripts/overfit.py --out runs/overfit
    python3 scripts/overfit.py --dtype float64 --no-cross-level --out runs/ablation
"""

import argparse
import json
import sys

from vecmap.config import overfit_config
from vecmap.synth import generate_scenes
from vecmap.train import train


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", help="write config, metrics.jsonl and checkpoints here")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    ap.add_argument("--no-cross-level", action="store_true", help="disable the cross-level query update")
    args = ap.parse_args(argv)

    cfg = overfit_config(seed=args.seed, dtype=args.dtype, optim={"total_steps": args.steps},
                         synth={"seed": args.seed}, decoder={"cross_level_update": not args.no_cross_level})
    scenes = generate_scenes(cfg.synth, cfg.num_scenes)

    def log(rec):
        if rec["kind"] == "eval":
            print(json.dumps({"step": rec["step"], "class_ap": rec["class_ap"], "mAP": rec["mAP"]}), flush=True)
        elif rec["step"] % 250 == 0:
            print(json.dumps({"step": rec["step"], "loss": round(rec["loss"]["total"], 4), "lr": rec["lr"]}), flush=True)

    res = train(cfg, scenes, args.out, log)
    print(f"final easy mAP {res.final.mAP:.4f} in {res.seconds / 60:.1f} min")
    return 0


if __name__ == "__main__":
    sys.exit(main())
