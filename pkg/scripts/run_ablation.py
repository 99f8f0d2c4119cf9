"""Two-arm comparison (cue loss off vs on) over seeds on the default crowded config.

Writes ablation.json and ablation.txt to --out and prints the table.
"""
import argparse
import json
import time
from pathlib import Path

from lgsc.config import load_config
from lgsc.evaluator import ablation_run, ablation_table
from lgsc.scenes import generate_split


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--out", default="ablation_out")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    cfg = load_config()
    t0 = time.time()
    train = generate_split(cfg.gen, "train", jobs=args.jobs)
    test = generate_split(cfg.gen, "test", jobs=args.jobs)
    zs = generate_split(cfg.gen, "zeroshot", jobs=args.jobs)
    print(f"generated {len(train)}/{len(test)}/{len(zs)} scenes in {time.time() - t0:.0f}s", flush=True)
    report = ablation_run(cfg, train, test, zs, seeds=range(args.seeds))
    report["wall_seconds"] = round(time.time() - t0, 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    table = ablation_table(report)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    print(f"total {report['wall_seconds']}s")


if __name__ == "__main__":
    main()
