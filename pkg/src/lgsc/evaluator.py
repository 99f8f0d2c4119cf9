"""AP50 grounding evaluation, the captioning probe and the two-arm ablation harness."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .boxes import iou
from .config import RunConfig
from .decoder import GroundingOutput, greedy_decode, parse_caption, parse_grounding_output
from .model import GroundingModel, caption_instruction, grounding_instruction, scene_expressions
from .regions import RegionSet, propose_regions
from .scenes import Scene, derive_seed, generate_split
from .trainer import train

log = logging.getLogger(__name__)

RECALL_POINTS = np.arange(101) / 100.0


# ---------------------------------------------------------------------------
# AP50

@dataclass
class Prediction:
    scene_id: str
    expression: str
    box: tuple
    confidence: float


@dataclass
class GroundTruth:
    scene_id: str
    expression: str
    box: tuple
    stratum: str = "easy"
    occlusion: float = 0.0
    size: str = "medium"


def match_predictions(preds: Sequence[Prediction], gts: Sequence[GroundTruth],
                      thr: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching in descending-confidence order (stable on ties).

    Returns (order, matched) where ``matched[j]`` is the GT index taken by
    ``preds[order[j]]`` or -1.
    """
    order = np.argsort(-np.array([p.confidence for p in preds], dtype=np.float64), kind="stable")
    by_key: dict[tuple, list[int]] = {}
    for g, gt in enumerate(gts):
        by_key.setdefault((gt.scene_id, gt.expression), []).append(g)
    taken = np.zeros(len(gts), dtype=bool)
    matched = np.full(len(order), -1, dtype=np.int64)
    for j, i in enumerate(order):
        p = preds[i]
        best, best_iou = -1, thr
        for g in by_key.get((p.scene_id, p.expression), []):
            if taken[g]:
                continue
            v = iou(p.box, gts[g].box)
            if v >= best_iou:
                if best < 0 or v > best_iou:
                    best, best_iou = g, v
        if best >= 0:
            taken[best] = True
            matched[j] = best
    return order, matched


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float | None:
    """101-point interpolated AP from TP flags already in ranked order."""
    if n_gt == 0:
        return None
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < tp.size, envelope[np.minimum(idx, tp.size - 1)], 0.0)
    return float(vals.mean())


def ap50(preds: Sequence[Prediction], gts: Sequence[GroundTruth], thr: float = 0.5) -> float | None:
    """AP at IoU ``thr``; ``None`` when there is no ground truth."""
    _, matched = match_predictions(preds, gts, thr)
    return ap_from_flags(matched >= 0, len(gts))


def stratified_ap(preds, gts, key) -> dict[str, float | None]:
    """AP per GT stratum. One global matching; a prediction matched to a GT
    outside the stratum is dropped, unmatched predictions stay as false positives."""
    _, matched = match_predictions(preds, gts)
    labels = [key(g) for g in gts]
    out = {}
    for s in sorted(set(labels)):
        keep = [m < 0 or labels[m] == s for m in matched]
        flags = (matched >= 0)[np.array(keep, dtype=bool)] if len(matched) else np.zeros(0, bool)
        out[s] = ap_from_flags(flags, sum(lab == s for lab in labels))
    return out


# ---------------------------------------------------------------------------
# predictors

class Predictor(Protocol):
    def ground(self, scene: Scene, regions: RegionSet, expressions: list[str]) -> list[GroundingOutput]: ...

    def caption(self, scene: Scene, regions: RegionSet, positions: list[int]) -> list[str]: ...


class ModelPredictor:
    """Full inference with a trained model: encode, refine, greedy decode, parse."""

    def __init__(self, model: GroundingModel, max_len: int = 24):
        self.model = model
        self.max_len = max_len

    def _decode(self, scene, regions, prompts):
        m = self.model
        with ad.no_grad():
            enc = m.encode(scene.raster, regions.boxes)
        return greedy_decode(m.next_logits_fn(enc), prompts, self.max_len, m.vocab["<eos>"])

    def ground(self, scene, regions, expressions):
        v = self.model.vocab
        ids, confs = self._decode(scene, regions, [grounding_instruction(e, v) for e in expressions])
        return [parse_grounding_output(i, v, c) for i, c in zip(ids, confs)]

    def caption(self, scene, regions, positions):
        v = self.model.vocab
        ids, _ = self._decode(scene, regions, [caption_instruction(p + 1, v) for p in positions])
        return [parse_caption(i, v) for i in ids]


# ---------------------------------------------------------------------------
# grounding report

@dataclass
class EvalReport:
    ap50: float | None
    strata: dict
    counts: dict
    per_scene: list = field(default_factory=list)
    config_hash: str = ""
    run_id: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def to_text(self) -> str:
        rows = [("overall", self.ap50, self.counts["n_gt"])]
        for group, vals in self.strata.items():
            for name, v in vals.items():
                rows.append((f"{group}:{name}", v, self.counts["strata_gt"][group][name]))
        lines = [f"run {self.run_id}  config {self.config_hash}", f"{'stratum':<22}{'AP50':>8}{'#GT':>7}"]
        for name, v, n in rows:
            lines.append(f"{name:<22}{_fmt(v):>8}{n:>7}")
        c = self.counts
        lines.append(f"scenes {c['n_scenes']}  queries {c['n_queries']}  predictions {c['n_predictions']}  "
                     f"malformed {c['n_malformed']} ({c['malformed_rate']:.3f})")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "null" if v is None else f"{100 * v:.2f}"


def eval_regions(scene: Scene, cfg: RunConfig) -> RegionSet:
    """Proposer output at the fixed evaluation seed of the scene."""
    return propose_regions(scene, cfg.proposer, derive_seed(scene.seed, "proposer"))


def _difficulty(obj, cfg: RunConfig) -> tuple[str, str]:
    occ = "high" if obj.occlusion >= cfg.eval.occlusion_high else "low"
    hard = occ == "high" or obj.size == "small"
    return ("hard" if hard else "easy"), occ


def collect(predictor: Predictor, scenes: Sequence[Scene], cfg: RunConfig,
            query_kind: str | None = None) -> tuple[list[Prediction], list[GroundTruth], list[dict], int]:
    kind = query_kind or cfg.eval.query_kind
    cats = list(cfg.gen.categories)
    preds, gts, diag = [], [], []
    n_malformed = 0
    for scene in sorted(scenes, key=lambda s: s.scene_id):
        exprs = scene_expressions(scene, cats, kind)
        for expr in exprs:
            for o in scene.objects:
                if o.caption == expr or cats[o.category_id] == expr:
                    stratum, occ = _difficulty(o, cfg)
                    gts.append(GroundTruth(scene.scene_id, expr, tuple(o.box), stratum, o.occlusion, o.size))
        regions = eval_regions(scene, cfg)
        outputs = predictor.ground(scene, regions, exprs) if exprs else []
        scene_preds = 0
        for expr, out in zip(exprs, outputs):
            if out.malformed:
                n_malformed += 1
            best: dict[int, float] = {}
            for g in out.groups:
                if g.malformed:
                    continue
                for k, c in zip(g.indices, g.confidences):
                    if 1 <= k <= len(regions):
                        conf = float(regions.objectness[k - 1]) if cfg.eval.rank_by == "objectness" else float(c)
                        best[k] = max(best.get(k, 0.0), conf)
            for k in sorted(best):
                preds.append(Prediction(scene.scene_id, expr, tuple(float(x) for x in regions.boxes[k - 1]),
                                        best[k]))
                scene_preds += 1
        diag.append({"scene_id": scene.scene_id, "queries": len(exprs), "predictions": scene_preds,
                     "malformed": sum(o.malformed for o in outputs)})
    return preds, gts, diag, n_malformed


def evaluate_grounding(predictor: Predictor, scenes: Sequence[Scene], cfg: RunConfig,
                       query_kind: str | None = None, run_tag: str = "") -> EvalReport:
    preds, gts, diag, n_bad = collect(predictor, scenes, cfg, query_kind)
    strata = {
        "difficulty": stratified_ap(preds, gts, lambda g: g.stratum),
        "occlusion": stratified_ap(preds, gts, lambda g: "high" if g.occlusion >= cfg.eval.occlusion_high else "low"),
        "size": stratified_ap(preds, gts, lambda g: g.size),
    }
    strata_gt = {
        "difficulty": _count(g.stratum for g in gts),
        "occlusion": _count("high" if g.occlusion >= cfg.eval.occlusion_high else "low" for g in gts),
        "size": _count(g.size for g in gts),
    }
    n_q = sum(d["queries"] for d in diag)
    counts = {"n_scenes": len(diag), "n_queries": n_q, "n_predictions": len(preds), "n_gt": len(gts),
              "n_malformed": n_bad, "malformed_rate": n_bad / n_q if n_q else 0.0, "strata_gt": strata_gt}
    body = json.dumps([run_tag, cfg.hash(), [d["scene_id"] for d in diag]]).encode()
    return EvalReport(ap50(preds, gts), strata, counts, diag, cfg.hash(), hashlib.sha1(body).hexdigest()[:12])


def _count(labels) -> dict[str, int]:
    out: dict[str, int] = {}
    for lab in labels:
        out[lab] = out.get(lab, 0) + 1
    return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# captioning probe

def gt_regions(scene: Scene) -> RegionSet:
    """The ground-truth boxes as the region set, in object order."""
    n = len(scene.objects)
    return RegionSet(np.array([o.box for o in scene.objects], dtype=np.float64).reshape(-1, 4), np.ones(n),
                     ["ground_truth"] * n, list(range(n)), list(range(n)), [o.caption for o in scene.objects])


def token_accuracy(pred: str, truth: str) -> float:
    """Position-wise token agreement over the longer of the two sequences."""
    a, b = pred.split(), truth.split()
    width = max(len(a), len(b))
    if width == 0:
        return 1.0
    return sum(x == y for x, y in zip(a, b)) / width


def evaluate_captioning(predictor: Predictor, scenes: Sequence[Scene], regions_fn=None) -> dict:
    """Caption every ground-truth entry of the region set (default: GT boxes only)."""
    accs, exact = [], []
    for scene in sorted(scenes, key=lambda s: s.scene_id):
        regions = regions_fn(scene) if regions_fn else gt_regions(scene)
        positions = list(regions.gt_indices)
        if not positions:
            continue
        for pos, cap in zip(positions, predictor.caption(scene, regions, positions)):
            truth = scene.objects[regions.source[pos]].caption
            accs.append(token_accuracy(cap, truth))
            exact.append(cap == truth)
    n = len(accs)
    return {"n_regions": n, "token_accuracy": float(np.mean(accs)) if n else 0.0,
            "exact_match": float(np.mean(exact)) if n else 0.0}


def grounding_exact_match(predictor: Predictor, scenes: Sequence[Scene], cfg: RunConfig,
                          regions_fn=None) -> float:
    """Fraction of queries whose parsed index set equals the target set exactly."""
    cats = list(cfg.gen.categories)
    hits, total = 0, 0
    for scene in scenes:
        regions = regions_fn(scene) if regions_fn else eval_regions(scene, cfg)
        exprs = scene_expressions(scene, cats, cfg.eval.query_kind)
        for expr, out in zip(exprs, predictor.ground(scene, regions, exprs)):
            want = {p + 1 for p, src in enumerate(regions.source)
                    if src >= 0 and (scene.objects[src].caption == expr or cats[scene.objects[src].category_id] == expr)}
            got = {k for g in out.groups for k in g.indices}
            hits += (not out.malformed) and got == want
            total += 1
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# ablation

ARMS = {"naive": 0.0, "lgsc": 2.0}


def arm_config(base: RunConfig, arm: str, seed: int) -> RunConfig:
    """Identical runs except the cue weight; the naive arm also drops the branch."""
    cfg = copy.deepcopy(base)
    cfg.train.lambda_sce = ARMS[arm]
    cfg.model.lgsc_enabled = arm != "naive"
    cfg.train.seed = seed
    return cfg


def non_lgsc_fingerprint(model: GroundingModel) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if not name.startswith("lgsc."):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()[:16]


def scenes_hash(scenes: Sequence[Scene]) -> str:
    h = hashlib.sha256()
    for s in scenes:
        h.update(s.scene_id.encode())
        h.update(np.ascontiguousarray(s.raster).tobytes())
        h.update(json.dumps([o.to_json() for o in s.objects]).encode())
    return h.hexdigest()[:16]


def _gap(a, b):
    return None if a is None or b is None else a - b


def ablation_run(base: RunConfig, train_scenes: Sequence[Scene], eval_scenes: Sequence[Scene],
                 zeroshot_scenes: Sequence[Scene] | None = None, seeds: Sequence[int] = (0, 1, 2),
                 progress=None) -> dict:
    """Train both arms per seed and compare AP50 overall, per stratum and zero-shot."""
    data_hash = scenes_hash(train_scenes)
    runs = []
    for seed in seeds:
        per_arm = {}
        init_fp = {}
        for arm in ARMS:
            cfg = arm_config(base, arm, seed)
            init_fp[arm] = non_lgsc_fingerprint(GroundingModel(cfg, seed=seed))
            result = train(cfg, list(train_scenes), progress=progress)
            pred = ModelPredictor(result.model, cfg.eval.max_decode_len)
            rep = evaluate_grounding(pred, eval_scenes, cfg, run_tag=f"{arm}-{seed}")
            entry = {"ap50": rep.ap50, "hard": rep.strata["difficulty"].get("hard"),
                     "easy": rep.strata["difficulty"].get("easy"), "malformed_rate": rep.counts["malformed_rate"],
                     "train_seconds": round(result.seconds, 1),
                     "final_l_ar": result.history[-1]["l_ar"] if result.history else None,
                     "final_l_sce": result.history[-1]["l_sce"] if result.history else None}
            if zeroshot_scenes is not None:
                zs = evaluate_grounding(pred, zeroshot_scenes, cfg, query_kind="category", run_tag=f"{arm}-{seed}-zs")
                entry["zeroshot_ap50"] = zs.ap50
            per_arm[arm] = entry
        if init_fp["naive"] != init_fp["lgsc"]:
            raise RuntimeError("arms do not share their initial non-LGSC parameters")
        n, g = per_arm["naive"], per_arm["lgsc"]
        runs.append({"seed": seed, "arms": per_arm, "init_fingerprint": init_fp["lgsc"],
                     "gap": _gap(g["ap50"], n["ap50"]), "gap_hard": _gap(g["hard"], n["hard"]),
                     "gap_easy": _gap(g["easy"], n["easy"]),
                     "gap_zeroshot": _gap(g.get("zeroshot_ap50"), n.get("zeroshot_ap50"))})
    mean = {arm: {k: _mean([r["arms"][arm].get(k) for r in runs]) for k in ("ap50", "hard", "easy", "zeroshot_ap50")}
            for arm in ARMS}
    hard_wins = sum(1 for r in runs if r["gap_hard"] is not None and r["gap_easy"] is not None
                    and r["gap_hard"] >= r["gap_easy"])
    return {"data_hash": data_hash, "config_hash": base.hash(), "seeds": list(seeds), "runs": runs, "mean": mean,
            "hard_gap_wins": hard_wins}


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def ablation_table(report: dict) -> str:
    lines = [f"data {report['data_hash']}  config {report['config_hash']}",
             f"{'seed':<6}{'arm':<7}{'AP50':>8}{'hard':>8}{'easy':>8}{'zero-shot':>11}"]
    for r in report["runs"]:
        for arm, e in r["arms"].items():
            lines.append(f"{r['seed']:<6}{arm:<7}{_fmt(e['ap50']):>8}{_fmt(e['hard']):>8}{_fmt(e['easy']):>8}"
                         f"{_fmt(e.get('zeroshot_ap50')):>11}")
    for arm, m in report["mean"].items():
        lines.append(f"{'mean':<6}{arm:<7}{_fmt(m['ap50']):>8}{_fmt(m['hard']):>8}{_fmt(m['easy']):>8}"
                     f"{_fmt(m['zeroshot_ap50']):>11}")
    lines.append(f"hard-stratum gap >= easy gap in {report['hard_gap_wins']}/{len(report['runs'])} seeds")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# overfit probe

def overfit_probe(cfg: RunConfig, steps: int = 500, progress=None) -> dict:
    """Memorise ``cfg.gen.train_size`` scenes and score them on the inputs they were trained on."""
    from .trainer import training_regions

    scenes = generate_split(cfg.gen, "train")
    result = train(cfg, scenes, max_steps=steps, progress=progress)
    pred = ModelPredictor(result.model, cfg.eval.max_decode_len)
    ground = grounding_exact_match(pred, scenes, cfg, regions_fn=lambda s: training_regions(s, cfg))
    cap = evaluate_captioning(pred, scenes, regions_fn=lambda s: training_regions(s, cfg))
    return {"scenes": len(scenes), "steps": len(result.history), "train_seconds": result.seconds,
            "final_l_ar": result.history[-1]["l_ar"], "grounding_exact": ground,
            "caption_exact": cap["exact_match"], "caption_token_accuracy": cap["token_accuracy"]}
