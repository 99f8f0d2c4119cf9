"""Visual pipeline: patch encoder, image tokens, frozen proposer, RoIAlign, region tokens."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import iou, is_valid, nms
from .config import ModelConfig, ProposerConfig
from .nn import MLP, Linear, Module

log = logging.getLogger(__name__)

FP_AREA = (0.004, 0.09)


@dataclass
class RegionSet:
    boxes: np.ndarray                      # (m, 4)
    objectness: np.ndarray                 # (m,)
    provenance: list[str]                  # "proposed" | "ground_truth"
    source: list[int]                      # object index the entry came from, -1 for false positives
    gt_indices: list[int] = field(default_factory=list)
    expressions: list[str | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)


# ---------------------------------------------------------------------------
# image encoder and projector

def _patchify(x: Tensor, k: int) -> tuple[Tensor, int, int]:
    c, h, w = x.shape
    t = ad.reshape(x, (c, h // k, k, w // k, k))
    t = ad.transpose(t, (1, 3, 0, 2, 4))
    return ad.reshape(t, ((h // k) * (w // k), c * k * k)), h // k, w // k


class ImageEncoder(Module):
    """Two non-overlapping 2x2 patch convolutions, total stride 4."""

    def __init__(self, cfg: ModelConfig, rng, in_channels: int = 3):
        c1, c2 = cfg.enc_channels
        self.in_channels = in_channels
        self.stage1 = Linear(in_channels * 4, c1, rng)
        self.stage2 = Linear(c1 * 4, c2, rng)

    def __call__(self, raster) -> Tensor:
        x = ad.as_tensor(raster)
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ValueError(f"encode_image: expected ({self.in_channels}, H, W) raster, got {x.shape}")
        p, h, w = _patchify(x, 2)
        y = ad.gelu(self.stage1(p))                      # (h*w, c1)
        y = ad.transpose(ad.reshape(y, (h, w, -1)), (2, 0, 1))
        p, h, w = _patchify(y, 2)
        y = self.stage2(p)                               # (h*w, c2)
        return ad.transpose(ad.reshape(y, (h, w, -1)), (2, 0, 1))   # (C_f, H_f, W_f)


class ImageProjector(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.pool = cfg.pool_image_tokens
        self.proj = Linear(cfg.enc_channels[-1], cfg.d_llm, rng)

    def __call__(self, fm: Tensor) -> Tensor:
        c, h, w = fm.shape
        x = ad.transpose(fm, (1, 2, 0))                  # (H, W, C)
        if self.pool:
            x = ad.reshape(x, (h // 2, 2, w // 2, 2, c))
            x = ad.mean(ad.transpose(x, (0, 2, 1, 3, 4)), axis=(2, 3))
        return self.proj(ad.reshape(x, (-1, c)))


# ---------------------------------------------------------------------------
# frozen proposer

def propose_regions(scene, cfg: ProposerConfig, seed: int) -> RegionSet:
    """Oracle-jitter proposer: noisy copies of GT boxes plus random false positives.

    Jitter noise is relative to the box's width/height and truncated at 3
    sigma. NMS runs first, then the top ``N`` by objectness survive.
    """
    rng = np.random.default_rng(seed)
    boxes, scores, source = [], [], []
    for k, obj in enumerate(scene.objects):
        if rng.random() >= cfg.p_rec:
            continue
        gt = np.asarray(obj.box, dtype=np.float64)
        w, h = gt[2] - gt[0], gt[3] - gt[1]
        noise = np.clip(rng.standard_normal(4), -3, 3) * cfg.sigma_jit * np.array([w, h, w, h])
        box = _fix_box(gt + noise, gt)
        boxes.append(box)
        scores.append(float(np.clip(0.9 - 0.5 * (1.0 - iou(box, gt)), 0.0, 1.0)))
        source.append(k)
    for _ in range(cfg.n_fp):
        a = rng.uniform(*FP_AREA)
        r = rng.uniform(0.5, 2.0)
        w, h = min(np.sqrt(a * r), 0.9), min(np.sqrt(a / r), 0.9)
        x1, y1 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        boxes.append(np.array([x1, y1, x1 + w, y1 + h]))
        scores.append(float(rng.uniform(0.1, 0.6)))
        source.append(-1)
    keep = nms(boxes, scores, cfg.nms_iou)[: cfg.N]
    return RegionSet(
        boxes=np.array([boxes[i] for i in keep]).reshape(-1, 4),
        objectness=np.array([scores[i] for i in keep]),
        provenance=["proposed"] * len(keep),
        source=[source[i] for i in keep],
        expressions=[None] * len(keep),
    )


def _fix_box(box: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    b = np.clip(box, 0.0, 1.0)
    if not is_valid(b):
        return fallback.copy()
    return b


# ---------------------------------------------------------------------------
# RoIAlign

def roi_sample_points(boxes: np.ndarray, h: int, w: int, p: int):
    """Corner indices and lerp fractions for one sample at each sub-cell centre.

    Returns flat indices ``(i00, i01, i10, i11)`` into an ``h*w`` grid and
    fractions ``(ly, lx)``, each shaped ``(m*p*p,)`` in (box, row, col) order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    # boxes thinner than one feature cell are widened to one cell around their centre
    for lo, hi, n in ((0, 2, w), (1, 3, h)):
        thin = (boxes[:, hi] - boxes[:, lo]) < 1.0 / n
        if thin.any():
            log.debug("roi_align: %d box side(s) below one stride, widened", int(thin.sum()))
            c = (boxes[thin, lo] + boxes[thin, hi]) / 2
            boxes[thin, lo], boxes[thin, hi] = c - 0.5 / n, c + 0.5 / n
    frac = (np.arange(p) + 0.5) / p
    ys = boxes[:, 1:2] + frac[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])      # (m, p)
    xs = boxes[:, 0:1] + frac[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])
    fy = np.clip(ys * h - 0.5, 0.0, h - 1)
    fx = np.clip(xs * w - 0.5, 0.0, w - 1)
    y0 = np.minimum(np.floor(fy).astype(int), h - 1)
    x0 = np.minimum(np.floor(fx).astype(int), w - 1)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    m = len(boxes)

    def grid(a, b):                                    # (m, p) rows x (m, p) cols -> (m*p*p,)
        return np.broadcast_to(a[:, :, None] * w + b[:, None, :], (m, p, p)).reshape(-1)

    ly = np.broadcast_to((fy - y0)[:, :, None], (m, p, p)).reshape(-1)
    lx = np.broadcast_to((fx - x0)[:, None, :], (m, p, p)).reshape(-1)
    return (grid(y0, x0), grid(y0, x1), grid(y1, x0), grid(y1, x1)), (ly, lx)


def roi_align(fm, boxes, p: int = 4) -> Tensor:
    """Pool each box to (C, p, p); differentiable in the feature map.

    Interpolation is written as nested lerps ``a + t (b - a)`` so a
    constant map pools to exactly that constant.
    """
    fm = ad.as_tensor(fm)
    c, h, w = fm.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if p < 1:
        raise ValueError("roi_align: output size must be >= 1")
    (i00, i01, i10, i11), (ly, lx) = roi_sample_points(boxes, h, w, p)
    flat = ad.transpose(ad.reshape(fm, (c, h * w)))                 # (h*w, c)
    v00, v01, v10, v11 = (ad.take(flat, i) for i in (i00, i01, i10, i11))
    lx, ly = Tensor(lx[:, None]), Tensor(ly[:, None])
    top = v00 + lx * (v01 - v00)
    bottom = v10 + lx * (v11 - v10)
    pooled = top + ly * (bottom - top)                                # (m*p*p, c)
    pooled = ad.reshape(pooled, (len(boxes), p, p, c))
    return ad.transpose(pooled, (0, 3, 1, 2))                          # (m, c, p, p)


class RegionEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.p = cfg.roi_size
        self.fc = Linear(cfg.enc_channels[-1] * cfg.roi_size ** 2, cfg.d_o, rng)

    def __call__(self, fm: Tensor, boxes) -> Tensor:
        pooled = roi_align(fm, boxes, self.p)
        flat = ad.reshape(pooled, (pooled.shape[0], -1))
        return ad.gelu(self.fc(flat))


class RegionProjector(MLP):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__([cfg.d_o, cfg.d_llm, cfg.d_llm], rng)
