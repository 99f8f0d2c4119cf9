"""``lgsc`` command line: data generation, training, evaluation, ablation and checks.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 verification failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import PRESETS, ConfigError, RunConfig, load_config, parse_flat
from .scenes import SPLITS, Scene, generate_dataset, generate_split, load_split

log = logging.getLogger("lgsc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config plumbing

def _overrides(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        out.update(parse_flat(item))
    return out


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, _overrides(args.set), args.preset)
    if getattr(args, "seed", None) is not None:
        cfg.gen.seed = cfg.train.seed = args.seed
    return cfg.validate()


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg: RunConfig, out: Path) -> None:
    cfg.save(out / "config.cfg")


def _scenes(cfg: RunConfig, data: str | None, split: str, limit: int | None = None, jobs: int = 1) -> list[Scene]:
    if data:
        scenes = load_split(data, split, cfg.gen.image_size)
        return scenes[:limit] if limit else scenes
    return generate_split(cfg.gen, split, limit, jobs=jobs)


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args.out)
    written = generate_dataset(cfg.gen, out, splits=args.splits or SPLITS, jobs=args.jobs, inline=args.inline)
    _snapshot(cfg, out)
    hashes = {split: file_sha256(p) for split, p in written.items()}
    for f in sorted(out.glob("*.npy")):
        hashes[f.name] = file_sha256(f)
    (out / "hashes.json").write_text(json.dumps(hashes, indent=1, sort_keys=True) + "\n")
    for name, h in sorted(hashes.items()):
        print(f"{name:<22}{h[:16]}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train

    cfg = resolve_config(args)
    out = _out_dir(args.out)
    _snapshot(cfg, out)
    scenes = _scenes(cfg, args.data, "train", args.limit, args.jobs)

    def progress(rec):
        if rec["step"] % args.log_every == 0:
            log.info("step %d  l_ar %.4f  l_sce %.4f  lr %.2e", rec["step"], rec["l_ar"], rec["l_sce"], rec["lr"])

    result = train(cfg, scenes, log_path=out / "log.jsonl", ckpt_dir=out, max_steps=args.max_steps,
                   progress=progress)
    last = result.history[-1] if result.history else {}
    print(f"trained {len(result.history)} steps on {len(scenes)} scenes in {result.seconds:.1f}s  "
          f"final l_ar {last.get('l_ar', float('nan')):.4f}  checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluator import ModelPredictor, evaluate_captioning, evaluate_grounding
    from .trainer import load_checkpoint

    model, _ = load_checkpoint(args.ckpt)
    cfg = model.cfg
    if args.set:
        cfg = load_config(None, {**cfg.to_flat(), **_overrides(args.set)})
    out = _out_dir(args.out)
    _snapshot(cfg, out)
    scenes = _scenes(cfg, args.data, args.split, args.limit, args.jobs)
    pred = ModelPredictor(model, cfg.eval.max_decode_len)
    rep = evaluate_grounding(pred, scenes, cfg, query_kind=args.query_kind, run_tag=args.split)
    (out / f"report_{args.split}.json").write_text(rep.to_json() + "\n")
    text = rep.to_text()
    if args.captions:
        cap = evaluate_captioning(pred, scenes)
        text += f"captioning  exact {cap['exact_match']:.3f}  token accuracy {cap['token_accuracy']:.3f}\n"
    (out / f"report_{args.split}.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluator import ablation_run, ablation_table

    cfg = resolve_config(args)
    out = _out_dir(args.out)
    _snapshot(cfg, out)
    train_scenes = _scenes(cfg, args.data, "train", args.limit, args.jobs)
    eval_scenes = _scenes(cfg, args.data, "test", args.eval_limit, args.jobs)
    zs = _scenes(cfg, args.data, "zeroshot", args.eval_limit, args.jobs)
    seeds = list(range(args.seeds)) if args.seed_list is None else args.seed_list
    report = ablation_run(cfg, train_scenes, eval_scenes, zs, seeds=seeds)
    (out / "ablation.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    table = ablation_table(report)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    rep = run_gradcheck(eps=args.eps, seed=args.seed or 0, max_entries=args.max_entries, lam=args.lam,
                        only=args.only)
    print(rep.to_text())
    return EXIT_OK if rep.ok else EXIT_VERIFY


def cmd_inspect(args) -> int:
    cfg = resolve_config(args)
    model = None
    if args.ckpt:
        from .trainer import load_checkpoint
        model, _ = load_checkpoint(args.ckpt)
        cfg = model.cfg
    if args.data:
        scenes = load_split(args.data, args.split, cfg.gen.image_size)
        found = [s for s in scenes if s.scene_id == args.scene]
    else:
        found = [s for s in generate_split(cfg.gen, args.split, _scene_number(args.scene, args.split) + 1)
                 if s.scene_id == args.scene]
    if not found:
        raise UsageError(f"no scene {args.scene!r} in split {args.split!r}")
    print(render_inspection(found[0], cfg, model, width=args.width), end="")
    return EXIT_OK


def _scene_number(scene_id: str, split: str) -> int:
    prefix = f"{split}-"
    if not scene_id.startswith(prefix) or not scene_id[len(prefix):].isdigit():
        raise UsageError(f"bad scene id {scene_id!r}; expected {prefix}NNNNN")
    return int(scene_id[len(prefix):])


# ---------------------------------------------------------------------------
# inspection

def ascii_overlay(boxes, labels, width: int = 48) -> list[str]:
    """Box outlines on a character grid; cells are twice as tall as wide."""
    h = max(1, width // 2)
    grid = [[" "] * width for _ in range(h)]
    for box, ch in zip(boxes, labels):
        x1, y1, x2, y2 = box
        c1, c2 = int(np.clip(x1 * width, 0, width - 1)), int(np.clip(np.ceil(x2 * width) - 1, 0, width - 1))
        r1, r2 = int(np.clip(y1 * h, 0, h - 1)), int(np.clip(np.ceil(y2 * h) - 1, 0, h - 1))
        for c in range(c1, c2 + 1):
            grid[r1][c] = grid[r2][c] = ch
        for r in range(r1, r2 + 1):
            grid[r][c1] = grid[r][c2] = ch
    border = "+" + "-" * width + "+"
    return [border] + ["|" + "".join(row) + "|" for row in grid] + [border]


def render_inspection(scene: Scene, cfg: RunConfig, model=None, width: int = 48) -> str:
    from .evaluator import ModelPredictor, eval_regions
    from .model import scene_expressions

    cats = cfg.gen.categories
    lines = [f"scene {scene.scene_id}  seed {scene.seed}  objects {len(scene.objects)}  "
             f"flagged {scene.flagged}"]
    lines += ascii_overlay([o.box for o in scene.objects], [str((k + 1) % 10) for k in range(len(scene.objects))],
                           width)
    lines.append("ground truth")
    for k, o in enumerate(scene.objects):
        lines.append(f"  {k + 1:>2} {_box(o.box)}  {cats[o.category_id]:<10} {o.size:<6} "
                     f"occ {o.occlusion:.2f}  \"{o.caption}\"")
    regions = eval_regions(scene, cfg)
    lines.append(f"proposals ({len(regions)})")
    for k in range(len(regions)):
        src = regions.source[k]
        lines.append(f"  <obj{k + 1}> {_box(regions.boxes[k])}  objectness {regions.objectness[k]:.2f}  "
                     f"source {'fp' if src < 0 else src + 1}")
    if model is not None:
        with ad.no_grad():
            enc = model.encode(scene.raster, regions.boxes)
        diff = np.linalg.norm(enc["refined"].data - enc["obj_tokens"].data, axis=-1)
        raw = np.linalg.norm(enc["obj_tokens"].data, axis=-1)
        lines.append("token norms (raw, refined - raw)")
        for k in range(len(regions)):
            lines.append(f"  <obj{k + 1}> {raw[k]:8.4f} {diff[k]:12.4e}")
        lines.append(f"  max refinement norm {diff.max(initial=0.0):.4e}")
        pred = ModelPredictor(model, cfg.eval.max_decode_len)
        exprs = scene_expressions(scene, cats)
        lines.append("decoded")
        for expr, out in zip(exprs, pred.ground(scene, regions, exprs)):
            got = sorted({i for g in out.groups if not g.malformed for i in g.indices})
            lines.append(f"  {expr!r:<36} -> {got}{'  (malformed)' if out.malformed else ''}")
    return "\n".join(lines) + "\n"


def _box(b) -> str:
    return "[" + " ".join(f"{v:.3f}" for v in b) + "]"


# ---------------------------------------------------------------------------
# parser

def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="flat config file (section.key = value)")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="sets gen.seed and train.seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for scene generation")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lgsc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write train/val/test/zeroshot splits")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", nargs="*", choices=SPLITS)
    p.add_argument("--inline", action="store_true", help="base64 rasters inside the JSONL")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--data", help="dataset dir; generated in memory when omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None, help="use the first N training scenes")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="grounding AP50 of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--query-kind", choices=["all", "category", "caption"], default=None)
    p.add_argument("--captions", action="store_true", help="also score captioning on GT boxes")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="naive vs cue-supervised arms over seeds")
    _common(p, seed=False)
    p.add_argument("--seeds", type=int, default=3, help="run seeds 0..N-1")
    p.add_argument("--seed-list", type=int, nargs="+", default=None)
    p.add_argument("--data")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--eval-limit", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every module")
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=12, help="entries sampled per tensor")
    p.add_argument("--lam", type=float, default=2.0)
    p.add_argument("--only", nargs="*")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect", help="text dump of one scene")
    _common(p)
    p.add_argument("--scene", required=True, help="scene id, e.g. test-00003")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--width", type=int, default=48)
    p.set_defaults(fn=cmd_inspect)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as e:
        print(f"lgsc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as e:
        print(f"lgsc: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
