"""Memorisation check: 8 scenes, 500 steps, exact-match grounding and captioning on the training inputs."""
import argparse
import json
import time

from lgsc.config import load_config
from lgsc.evaluator import overfit_probe


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = load_config(preset="overfit")
    cfg.train.seed = args.seed
    t0 = time.time()
    res = overfit_probe(cfg, args.steps, progress=lambda r: r["step"] % 100 == 0 and print(
        f"step {r['step']:4d}  l_ar {r['l_ar']:.4f}  l_sce {r['l_sce']:.4f}", flush=True))
    res["wall_seconds"] = round(time.time() - t0, 1)
    print(json.dumps(res, indent=1))


if __name__ == "__main__":
    main()
