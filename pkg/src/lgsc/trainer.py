"""Joint training: region union + shuffle, AR + lambda * SCE, AdamW with warmup-cosine."""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import iou_matrix
from .config import RunConfig, apply_overrides
from .core import sce_loss, text_embed
from .decoder import ar_loss
from .model import GroundingModel, caption_queries, grounding_queries
from .regions import RegionSet, propose_regions
from .scenes import Scene, derive_seed

log = logging.getLogger(__name__)

CKPT_MAGIC = b"LGSCCKPT"
CKPT_VERSION = 1


class TrainingAborted(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# regions

def build_training_regions(proposed: RegionSet, objects, n_max: int, seed: int,
                           dedup_iou: float | None = None) -> RegionSet:
    """Union of proposals and GT boxes, truncated to ``n_max`` and shuffled.

    GT entries are never dropped; surplus proposals go lowest objectness
    first. ``gt_indices`` are the post-shuffle positions of GT entries.
    """
    if len(objects) > n_max:
        raise ValueError(f"{len(objects)} ground-truth objects exceed N={n_max}")
    keep = list(range(len(proposed)))
    gt_boxes = np.array([o.box for o in objects]).reshape(-1, 4)
    if dedup_iou is not None and len(keep) and len(objects):
        overlap = iou_matrix(proposed.boxes, gt_boxes).max(axis=1)
        keep = [i for i in keep if overlap[i] <= dedup_iou]
    room = n_max - len(objects)
    if len(keep) > room:
        keep = sorted(keep, key=lambda i: (-proposed.objectness[i], i))[:room]
        keep.sort()
    boxes = [proposed.boxes[i] for i in keep] + [np.asarray(o.box, dtype=np.float64) for o in objects]
    score = [float(proposed.objectness[i]) for i in keep] + [1.0] * len(objects)
    prov = ["proposed"] * len(keep) + ["ground_truth"] * len(objects)
    source = [proposed.source[i] for i in keep] + list(range(len(objects)))
    expr = [None] * len(keep) + [o.caption for o in objects]
    perm = np.random.default_rng(seed).permutation(len(boxes))
    return RegionSet(
        boxes=np.array([boxes[i] for i in perm]).reshape(-1, 4),
        objectness=np.array([score[i] for i in perm]),
        provenance=[prov[i] for i in perm],
        source=[source[i] for i in perm],
        gt_indices=[p for p, i in enumerate(perm) if prov[i] == "ground_truth"],
        expressions=[expr[i] for i in perm],
    )


def training_regions(scene: Scene, cfg: RunConfig, epoch: int = 0, step: int = 0, slot: int = 0) -> RegionSet:
    """Region set a scene is trained on. Without ``reshuffle`` it depends on the scene alone."""
    tc = cfg.train
    if tc.reshuffle:
        p_seed, s_seed = derive_seed(tc.seed, "propose", scene.seed, epoch), derive_seed(tc.seed, "shuffle", step, slot)
    else:
        p_seed, s_seed = derive_seed(tc.seed, "propose", scene.seed), derive_seed(tc.seed, "shuffle", scene.seed)
    proposed = propose_regions(scene, cfg.proposer, p_seed)
    return build_training_regions(proposed, scene.objects, cfg.proposer.N, s_seed, tc.dedup_iou)


# ---------------------------------------------------------------------------
# loss

@dataclass
class LossParts:
    total: Tensor
    l_ar: float
    l_sce: float


def combine_losses(l_ar: Tensor, l_sce: Tensor | None, lam: float) -> Tensor:
    if l_sce is None or lam == 0.0:
        return l_ar
    return l_ar + lam * l_sce


def scene_loss(model: GroundingModel, scene: Scene, regions: RegionSet, cfg: RunConfig, seed: int) -> LossParts:
    vocab, cats = model.vocab, cfg.gen.categories
    queries = grounding_queries(scene, regions, vocab, cats)
    rng = np.random.default_rng(seed)
    k = min(cfg.train.captions_per_scene, len(regions.gt_indices))
    cap_pos = sorted(rng.choice(regions.gt_indices, size=k, replace=False).tolist()) if k else []
    queries += caption_queries(scene, regions, vocab, cap_pos)
    enc = model.encode(scene.raster, regions.boxes)
    rows, seq = model.masked_logits(enc, queries)
    l_ar = ar_loss(rows, seq.targets, seq.mask, cfg.train.loss_reduction)
    texts = [text_embed(regions.expressions[i], cfg.model.d_t, cfg.model.hash_salt) for i in regions.gt_indices]
    texts = np.array(texts).reshape(len(texts), -1)
    if enc["cues"] is not None:
        l_sce = sce_loss(enc["cues"], texts, regions.gt_indices)
        total = combine_losses(l_ar, l_sce, cfg.train.lambda_sce)
    else:
        # branch disabled: the cue loss is a diagnostic only
        with ad.no_grad():
            l_sce = sce_loss(model.lgsc.sce(enc["feats"].detach()), texts, regions.gt_indices)
        total = l_ar
    return LossParts(total, l_ar.item(), l_sce.item())


# ---------------------------------------------------------------------------
# optimiser

def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float,
               beta1: float, beta2: float, weight_decay: float, t: int, eps: float = 1e-8):
    """One decoupled-weight-decay Adam update; returns new (param, m, v)."""
    param = param * (1.0 - lr * weight_decay)
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class AdamW:
    """Two parameter groups (LGSC branch and the rest); frozen/gradless params are skipped."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lgsc_names: set[str], cfg):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.is_lgsc = [n in lgsc_names for n in self.names]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.cfg = cfg
        self.t = 0

    def step(self, lr_lgsc: float, lr_rest: float) -> None:
        self.t += 1
        c = self.cfg
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            lr = lr_lgsc if self.is_lgsc[i] else lr_rest
            p.data, self.m[i], self.v[i] = adamw_step(p.data, p.grad, self.m[i], self.v[i], lr,
                                                      c.beta1, c.beta2, c.weight_decay, self.t, c.adam_eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_schedule(step: int, total_steps: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear warmup over ceil(ratio * total) steps, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = math.ceil(warmup_ratio * total_steps)
    if step < warm:
        return base_lr * step / warm
    progress = (step - warm) / max(1, total_steps - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | Path, model: GroundingModel, opt: AdamW | None = None, step: int = 0) -> None:
    """Versioned header, JSON manifest, then little-endian float64 blobs."""
    tensors = [(n, p.data) for n, p in model.named_parameters()]
    if opt is not None:
        tensors += [(f"adam.m.{n}", m) for n, m in zip(opt.names, opt.m)]
        tensors += [(f"adam.v.{n}", v) for n, v in zip(opt.names, opt.v)]
    entries, offset = [], 0
    for name, arr in tensors:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size * 8
    cfg = model.cfg
    manifest = json.dumps({"version": CKPT_VERSION, "step": step, "adam_t": opt.t if opt else 0,
                           "config": cfg.to_flat(), "config_hash": cfg.hash(), "model_hash": cfg.model_hash(),
                           "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(manifest)))
        fh.write(manifest)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not an lgsc checkpoint")
    version, mlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(raw[20:20 + mlen])
    base = 20 + mlen
    arrays = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=e["count"], offset=start).reshape(e["shape"]).copy()
    return manifest, arrays


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> tuple[GroundingModel, dict]:
    """Rebuild the model from a checkpoint; ``cfg`` (if given) must agree on shapes."""
    manifest, arrays = read_checkpoint(path)
    saved = apply_overrides(RunConfig(), manifest["config"])
    if cfg is not None and cfg.model_hash() != manifest["model_hash"]:
        raise CheckpointError("checkpoint model shapes do not match the run config")
    use = cfg if cfg is not None else saved
    model = GroundingModel(use, seed=0)
    for name, p in model.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.data = arrays[name].copy()
    return model, manifest


# ---------------------------------------------------------------------------
# loop

@dataclass
class TrainResult:
    model: GroundingModel
    optimizer: AdamW
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def frozen_fingerprint(cfg: RunConfig) -> str:
    """The frozen parts (proposer settings, text-embedding salt) identify themselves by config."""
    return json.dumps({"proposer": vars(cfg.proposer), "salt": cfg.model.hash_salt, "d_t": cfg.model.d_t},
                      sort_keys=True)


def train(cfg: RunConfig, scenes: list[Scene], log_path: str | Path | None = None,
          ckpt_dir: str | Path | None = None, max_steps: int | None = None, progress=None) -> TrainResult:
    """Run ``cfg.train.epochs`` passes over ``scenes``; deterministic in the seeds."""
    tc = cfg.train
    model = GroundingModel(cfg, seed=tc.seed)
    opt = AdamW(list(model.named_parameters()), model.lgsc_parameter_names(), tc)
    n = len(scenes)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total = tc.epochs * steps_per_epoch if max_steps is None else min(max_steps, tc.epochs * steps_per_epoch)
    history = []
    logf = open(log_path, "w") if log_path else None
    t0 = time.time()
    step = 0
    try:
        for epoch in range(tc.epochs):
            order = np.random.default_rng(derive_seed(tc.seed, "order", epoch)).permutation(n)
            for b in range(steps_per_epoch):
                if step >= total:
                    break
                batch = [scenes[i] for i in order[b * tc.batch_size:(b + 1) * tc.batch_size]]
                lr_l = lr_schedule(step, total, tc.warmup_ratio, tc.lr_lgsc)
                lr_r = lr_schedule(step, total, tc.warmup_ratio, tc.lr_rest)
                opt.zero_grad()
                ars, sces = [], []
                for j, scene in enumerate(batch):
                    regions = training_regions(scene, cfg, epoch, step, j)
                    parts = scene_loss(model, scene, regions, cfg, derive_seed(tc.seed, "captions", step, j))
                    if not np.isfinite(parts.total.item()):
                        if ckpt_dir is not None:
                            save_checkpoint(Path(ckpt_dir) / "last_good.ckpt", model, opt, step)
                        raise TrainingAborted(f"non-finite loss at step {step}")
                    (parts.total * (1.0 / len(batch))).backward()
                    ars.append(parts.l_ar)
                    sces.append(parts.l_sce)
                opt.step(lr_l, lr_r)
                rec = {"step": step, "l_ar": float(np.mean(ars)), "l_sce": float(np.mean(sces)),
                       "lr": lr_r, "lr_lgsc": lr_l}
                history.append(rec)
                if logf:
                    logf.write(json.dumps(rec) + "\n")
                if progress:
                    progress(rec)
                step += 1
    finally:
        if logf:
            logf.close()
    result = TrainResult(model, opt, history, time.time() - t0)
    if ckpt_dir is not None:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(ckpt_dir) / "model.ckpt", model, opt, step)
    return result
