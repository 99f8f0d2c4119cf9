"""Semantic cues: extractor, text targets, alignment loss, projector, low-rank cross-attention."""
from __future__ import annotations

import hashlib
import logging
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .nn import MLP, Linear, Module, parameter

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# frozen text embedder

def _token_vector(token: str, dim: int, salt: str) -> np.ndarray:
    digest = hashlib.blake2b(f"{salt}\x00{token}".encode(), digest_size=16).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(dim)


@lru_cache(maxsize=4096)
def _embed_cached(expression: str, dim: int, salt: str) -> bytes:
    tokens = expression.split()
    if not tokens:
        raise ValueError("text_embed: empty expression")
    v = np.mean([_token_vector(t, dim, salt) for t in tokens], axis=0)
    return (v / np.linalg.norm(v)).tobytes()


def text_embed(expression: str, dim: int = 32, salt: str = "lgsc-0") -> np.ndarray:
    """Unit vector: normalised mean of per-token hash-seeded Gaussian vectors. No gradient."""
    return np.frombuffer(_embed_cached(expression, dim, salt), dtype=np.float64).copy()


# ---------------------------------------------------------------------------
# extractor, projector and loss

class SemanticCueExtractor(MLP):
    """d_o -> 2d_o -> 2d_o -> d_t -> d_t, GELU after the first three layers."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__([cfg.d_o, 2 * cfg.d_o, 2 * cfg.d_o, cfg.d_t, cfg.d_t], rng)


class SemanticCueProjector(MLP):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__([cfg.d_t, cfg.d_llm, cfg.d_llm], rng)


def sce_loss(cues, texts, gt_indices) -> Tensor:
    """Mean of (1 - cos) between cue rows in ``gt_indices`` and their text embeddings.

    ``texts`` rows align with ``gt_indices``. An empty index set gives 0.
    """
    gt_indices = list(gt_indices)
    if not gt_indices:
        log.warning("sce_loss: no ground-truth regions, contribution is 0")
        return Tensor(0.0)
    texts = np.asarray(texts, dtype=np.float64).reshape(len(gt_indices), -1)
    picked = ad.take(cues, gt_indices)
    cos = ad.cosine_similarity(picked, Tensor(texts), axis=-1)
    return 1.0 - ad.mean(cos)


# ---------------------------------------------------------------------------
# low-rank cross-attention

class LowRankCrossAttention(Module):
    """Cues as queries, object tokens as keys/values; zero-initialised output map."""

    def __init__(self, cfg: ModelConfig, rng):
        d, r = cfg.d_llm, cfg.rank
        self.heads = cfg.heads
        self.residual_source = cfg.residual_source
        self.w_q = parameter(rng.normal(0, 1 / np.sqrt(d), (d, r)))
        self.w_k = parameter(rng.normal(0, 1 / np.sqrt(d), (d, r)))
        self.w_v = parameter(rng.normal(0, 1 / np.sqrt(d), (d, r)))
        self.w_o = parameter(np.zeros((r, d)))

    def _split(self, x: Tensor) -> Tensor:
        m, r = x.shape
        return ad.transpose(ad.reshape(x, (m, self.heads, r // self.heads)), (1, 0, 2))

    def __call__(self, cue_tokens, obj_tokens) -> Tensor:
        cue_tokens, obj_tokens = ad.as_tensor(cue_tokens), ad.as_tensor(obj_tokens)
        if cue_tokens.shape != obj_tokens.shape:
            raise ad.ShapeError(f"refine: cue tokens {cue_tokens.shape} vs object tokens {obj_tokens.shape}")
        m = obj_tokens.shape[0]
        if m == 0:
            return obj_tokens
        q = self._split(ad.matmul(cue_tokens, self.w_q))       # (h, m, r/h)
        k = self._split(ad.matmul(obj_tokens, self.w_k))
        v = self._split(ad.matmul(obj_tokens, self.w_v))
        dh = q.shape[-1]
        att = ad.softmax(ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
        heads = ad.matmul(att, v)                               # (h, m, r/h)
        merged = ad.reshape(ad.transpose(heads, (1, 0, 2)), (m, -1))
        update = ad.matmul(merged, self.w_o)
        base = obj_tokens if self.residual_source == "object" else cue_tokens
        return base + update


class LGSCBlock(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.sce = SemanticCueExtractor(cfg, rng)
        self.scp = SemanticCueProjector(cfg, rng)
        self.attn = LowRankCrossAttention(cfg, rng)

    def __call__(self, obj_feats, obj_tokens) -> tuple[Tensor, Tensor]:
        """Returns (cues, refined object tokens)."""
        cues = self.sce(obj_feats)
        return cues, self.attn(self.scp(cues), obj_tokens)
