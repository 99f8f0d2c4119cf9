"""End-to-end grounding model and the query/answer construction it is trained on."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .core import LGSCBlock
from .decoder import (DESCRIBE, EOS, FIND, Decoder, Vocabulary, build_input_sequence, format_caption_target,
                      format_grounding_target, region_prefix, text_position)
from .nn import Module
from .regions import ImageEncoder, ImageProjector, RegionEncoder, RegionProjector, RegionSet
from .scenes import Scene, derive_seed


@dataclass
class Query:
    kind: str                    # "ground" | "caption"
    expression: str              # grounding expression, or the caption to produce
    instruction: list[int]
    target: list[int]
    region: int = -1             # 1-based region index for caption prompts


class GroundingModel(Module):
    def __init__(self, cfg: RunConfig, seed: int):
        mc = cfg.model
        self.cfg = cfg
        self.vocab = Vocabulary.build(cfg.gen, cfg.proposer.N)

        def rng(name):
            return np.random.default_rng(derive_seed(seed, "init", name))

        self.encoder = ImageEncoder(mc, rng("encoder"))
        self.image_proj = ImageProjector(mc, rng("image_proj"))
        self.region_enc = RegionEncoder(mc, rng("region_enc"))
        self.region_proj = RegionProjector(mc, rng("region_proj"))
        self.lgsc = LGSCBlock(mc, rng("lgsc"))
        self.decoder = Decoder(mc, len(self.vocab), rng("decoder"))
        self.lgsc_enabled = mc.lgsc_enabled

    def lgsc_parameter_names(self) -> set[str]:
        return {n for n, _ in self.named_parameters() if n.startswith("lgsc.")}

    # ---- visual side -----------------------------------------------------
    def encode(self, raster, boxes) -> dict:
        fm = self.encoder(np.asarray(raster, dtype=np.float64))
        image_tokens = self.image_proj(fm)
        feats = self.region_enc(fm, boxes)
        obj_tokens = self.region_proj(feats)
        if self.lgsc_enabled and len(boxes):
            cues, refined = self.lgsc(feats, obj_tokens)
        else:
            cues, refined = None, obj_tokens
        return {"fm": fm, "image_tokens": image_tokens, "feats": feats, "obj_tokens": obj_tokens,
                "cues": cues, "refined": refined}

    # ---- language side ---------------------------------------------------
    def sequence(self, enc: dict, queries: list[Query], with_targets: bool = True):
        return build_input_sequence(enc["image_tokens"], enc["refined"], [q.instruction for q in queries],
                                    [q.target for q in queries] if with_targets else None,
                                    self.vocab, self.decoder.token_emb, self.cfg.model.context_len)

    def logits(self, enc: dict, queries: list[Query]) -> tuple[Tensor, object]:
        """Full (B, L, V) logits through the reference path."""
        seq = self.sequence(enc, queries)
        return self.decoder(seq.embeddings, seq.positions), seq

    def masked_logits(self, enc: dict, queries: list[Query]):
        """Logits only at response positions (K, V), plus the sequence.

        The visual prefix is run once and shared by all query rows; response
        positions always fall in the text part.
        """
        seq = self.sequence(enc, queries)
        h = self.decoder.text_hidden(self.decoder.prefix_cache(seq.prefix), seq.text_emb, seq.text_pos)
        rows, cols = np.nonzero(seq.mask)
        return self.decoder.head(h[rows, cols - seq.prefix_len]), seq

    def next_logits_fn(self, enc: dict):
        """Closure for greedy decoding over token rows following the visual prefix."""
        m = enc["refined"].shape[0]
        index_ids = [self.vocab.index_token(k) for k in range(1, m + 1)]
        with ad.no_grad():
            prefix = region_prefix(enc["image_tokens"], enc["refined"], ad.take(self.decoder.token_emb, index_ids))
            cache = self.decoder.prefix_cache(prefix)
        text_pos = text_position(enc["image_tokens"].shape[0], self.vocab)
        pad = self.vocab["<pad>"]

        def fn(rows: list[list[int]]) -> np.ndarray:
            lens = np.array([len(r) for r in rows])
            ids = np.full((len(rows), lens.max()), pad, dtype=np.int64)
            for i, r in enumerate(rows):
                ids[i, : len(r)] = r
            with ad.no_grad():
                h = self.decoder.text_hidden(cache, ad.take(self.decoder.token_emb, ids), text_pos)
                last = h.data[np.arange(len(rows)), lens - 1]
                return self.decoder.head(Tensor(last)).data

        return fn


# ---------------------------------------------------------------------------
# queries

def grounding_instruction(expression: str, vocab: Vocabulary) -> list[int]:
    return [vocab[FIND]] + vocab.encode(expression)


def caption_instruction(region: int, vocab: Vocabulary) -> list[int]:
    return [vocab[DESCRIBE], vocab.index_token(region)]


def scene_expressions(scene: Scene, categories: list[str], kind: str = "all") -> list[str]:
    """Distinct category names then distinct captions, in first-appearance order."""
    out = []
    if kind in ("all", "category"):
        out += list(dict.fromkeys(categories[o.category_id] for o in scene.objects))
    if kind in ("all", "caption"):
        out += list(dict.fromkeys(o.caption for o in scene.objects))
    return out


def matches(obj, expression: str, categories: list[str]) -> bool:
    return obj.caption == expression or categories[obj.category_id] == expression


def grounding_queries(scene: Scene, regions: RegionSet, vocab: Vocabulary, categories: list[str],
                      kind: str = "all") -> list[Query]:
    """One query per expression; targets point at ground-truth regions only."""
    queries = []
    for expr in scene_expressions(scene, categories, kind):
        idx = [pos + 1 for pos in regions.gt_indices
               if matches(scene.objects[regions.source[pos]], expr, categories)]
        queries.append(Query("ground", expr, grounding_instruction(expr, vocab),
                             format_grounding_target(expr, idx, vocab)))
    return queries


def caption_queries(scene: Scene, regions: RegionSet, vocab: Vocabulary, positions: list[int]) -> list[Query]:
    out = []
    for pos in positions:
        cap = scene.objects[regions.source[pos]].caption
        out.append(Query("caption", cap, caption_instruction(pos + 1, vocab), format_caption_target(cap, vocab),
                         region=pos + 1))
    return out


def eos_id(vocab: Vocabulary) -> int:
    return vocab[EOS]
