"""Finite-difference verification of every trainable module and the composite losses."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .core import sce_loss, text_embed
from .decoder import ar_loss
from .model import GroundingModel, caption_queries, grounding_queries
from .scenes import derive_seed, generate_scene
from .trainer import build_training_regions, combine_losses
from .regions import propose_regions

TOLERANCE = 1e-4


@dataclass
class CheckRow:
    name: str
    error: float
    n_params: int
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= TOLERANCE


@dataclass
class GradcheckReport:
    eps: float
    rows: list[CheckRow] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    @property
    def worst(self) -> float:
        return max((r.error for r in self.rows), default=0.0)

    def to_text(self) -> str:
        lines = [f"gradcheck  eps={self.eps:g}  tol={TOLERANCE:g}  float64",
                 f"{'check':<14}{'rel.err':>12}{'#params':>9}{'sec':>7}  result"]
        for r in self.rows:
            lines.append(f"{r.name:<14}{r.error:>12.3e}{r.n_params:>9d}{r.seconds:>7.2f}  "
                         f"{'pass' if r.ok else 'FAIL'}")
        lines.append(f"worst {self.worst:.3e}: {'PASS' if self.ok else 'FAIL'}")
        return "\n".join(lines)


def small_config() -> RunConfig:
    """Narrow widths and a 16px raster so central differences stay cheap."""
    cfg = RunConfig()
    cfg.gen.image_size = 16
    cfg.gen.min_objects, cfg.gen.max_objects = 3, 4
    cfg.gen.categories = cfg.gen.categories[:3]
    cfg.proposer.N = 6
    cfg.proposer.n_fp = 1
    m = cfg.model
    m.enc_channels = [3, 4]
    m.d_o, m.d_llm, m.d_t = 6, 8, 4
    m.rank, m.heads = 4, 2
    m.dec_layers, m.dec_heads, m.d_ff = 1, 2, 8
    m.context_len = 96
    cfg.train.captions_per_scene = 1
    return cfg.validate()


def _probe(shape, rng) -> np.ndarray:
    return rng.normal(size=shape)


def _nonzero_wo(model: GroundingModel, rng) -> None:
    # a zero output map would hide the attention gradients behind it
    w = model.lgsc.attn.w_o
    w.data = rng.normal(0, 0.5, w.shape)


def _fixture(cfg: RunConfig, seed: int):
    rng = np.random.default_rng(seed)
    model = GroundingModel(cfg, seed=seed)
    _nonzero_wo(model, rng)
    scene = generate_scene(cfg.gen, derive_seed(seed, "gradcheck"))
    proposed = propose_regions(scene, cfg.proposer, derive_seed(seed, "proposer"))
    regions = build_training_regions(proposed, scene.objects, cfg.proposer.N, derive_seed(seed, "shuffle"),
                                     cfg.train.dedup_iou)
    return rng, model, scene, regions


def module_checks(cfg: RunConfig, seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Scalar probes ``sum(module(x) * r)`` with fixed inputs, one per module."""
    rng, model, scene, regions = _fixture(cfg, seed)
    raster = scene.raster.astype(np.float64)
    boxes = regions.boxes
    with ad.no_grad():
        fm = model.encoder(raster)
        feats = model.region_enc(fm, boxes)
        tokens = model.region_proj(feats)
        cues = model.lgsc.sce(feats)
        cue_tokens = model.lgsc.scp(cues)
    fm_t = Tensor(fm.data.copy(), requires_grad=True)
    feats_t = Tensor(feats.data.copy(), requires_grad=True)
    cues_t = Tensor(cues.data.copy(), requires_grad=True)
    cue_tok_t = Tensor(cue_tokens.data.copy(), requires_grad=True)
    tok_t = Tensor(tokens.data.copy(), requires_grad=True)

    def probe(fn, out_shape):
        r = _probe(out_shape, rng)
        return lambda: ad.tsum(fn() * Tensor(r))

    checks = {
        "encoder": (probe(lambda: model.encoder(raster), fm.shape), model.encoder.parameters()),
        "image_proj": (probe(lambda: model.image_proj(fm_t), model.image_proj(fm).shape),
                       model.image_proj.parameters() + [fm_t]),
        "region_enc": (probe(lambda: model.region_enc(fm_t, boxes), feats.shape),
                       model.region_enc.parameters() + [fm_t]),
        "region_proj": (probe(lambda: model.region_proj(feats_t), tokens.shape),
                        model.region_proj.parameters() + [feats_t]),
        "sce": (probe(lambda: model.lgsc.sce(feats_t), cues.shape), model.lgsc.sce.parameters() + [feats_t]),
        "scp": (probe(lambda: model.lgsc.scp(cues_t), cue_tokens.shape), model.lgsc.scp.parameters() + [cues_t]),
        "attn": (probe(lambda: model.lgsc.attn(cue_tok_t, tok_t), tokens.shape),
                 model.lgsc.attn.parameters() + [cue_tok_t, tok_t]),
    }

    queries = grounding_queries(scene, regions, model.vocab, cfg.gen.categories)
    queries += caption_queries(scene, regions, model.vocab, regions.gt_indices[:1])
    with ad.no_grad():
        enc = model.encode(raster, boxes)
    enc = {k: (Tensor(v.data.copy(), requires_grad=True) if isinstance(v, Tensor) else v) for k, v in enc.items()}

    def dec_loss():
        rows, seq = model.masked_logits(enc, queries)
        return ar_loss(rows, seq.targets, seq.mask)

    checks["decoder"] = (dec_loss, model.decoder.parameters() + [enc["image_tokens"], enc["refined"]])
    return checks


def composite_checks(cfg: RunConfig, seed: int = 0, lam: float = 2.0):
    """Full-model losses: cue alignment, autoregressive, and their weighted sum.

    These are checked jointly over all parameters: the cue branch reaches the
    token loss only through attention, so its per-tensor gradients sit near
    the round-off level of a central difference.
    """
    _, model, scene, regions = _fixture(cfg, seed)
    raster = scene.raster.astype(np.float64)
    vocab, cats = model.vocab, cfg.gen.categories
    queries = grounding_queries(scene, regions, vocab, cats)
    queries += caption_queries(scene, regions, vocab, regions.gt_indices[:1])
    texts = np.array([text_embed(regions.expressions[i], cfg.model.d_t, cfg.model.hash_salt)
                      for i in regions.gt_indices])

    def parts():
        enc = model.encode(raster, regions.boxes)
        rows, seq = model.masked_logits(enc, queries)
        return ar_loss(rows, seq.targets, seq.mask), sce_loss(enc["cues"], texts, regions.gt_indices)

    params = model.parameters()
    return {
        "loss_sce": (lambda: parts()[1], params),
        "loss_ar": (lambda: parts()[0], params),
        "loss_total": (lambda: combine_losses(*parts(), lam), params),
    }


def run_gradcheck(eps: float = 1e-6, seed: int = 0, max_entries: int = 12, lam: float = 2.0,
                  cfg: RunConfig | None = None, only: list[str] | None = None) -> GradcheckReport:
    cfg = cfg or small_config()
    report = GradcheckReport(eps)
    checks = {n: (fn, ps, False) for n, (fn, ps) in module_checks(cfg, seed).items()}
    checks.update({n: (fn, ps, True) for n, (fn, ps) in composite_checks(cfg, seed, lam).items()})
    for name, (fn, params, joint) in checks.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        err = ad.grad_check(fn, params, eps=eps, max_entries=max_entries, seed=seed, joint=joint)
        report.rows.append(CheckRow(name, err, sum(p.size for p in params), time.perf_counter() - t0))
    return report
