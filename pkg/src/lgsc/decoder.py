"""Tiny causal decoder, its vocabulary, the grounding grammar and decoding."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import SIZES, GeneratorConfig, ModelConfig
from .nn import LayerNorm, Linear, Module, parameter

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
G_OPEN, G_CLOSE, O_OPEN, O_CLOSE = "<g>", "</g>", "<o>", "</o>"
SPECIALS = [PAD, BOS, EOS, G_OPEN, G_CLOSE, O_OPEN, O_CLOSE]
FIND, DESCRIBE = "find:", "describe:"
NEG_INF = -1e30


class GrammarError(ValueError):
    pass


class Vocabulary:
    """Stable id <-> token map; index tokens ``<obj1>..<objN>`` are contiguous."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("vocabulary has duplicate tokens")
        obj = [i for i, t in enumerate(self.tokens) if t.startswith("<obj")]
        self.n_index = len(obj)
        self.first_index = obj[0] if obj else -1
        if obj and obj != list(range(self.first_index, self.first_index + self.n_index)):
            raise ValueError("index tokens must be contiguous")
        for k in range(self.n_index):
            if self.tokens[self.first_index + k] != f"<obj{k + 1}>":
                raise ValueError("index tokens must run <obj1>..<objN> in order")

    @classmethod
    def build(cls, gen: GeneratorConfig, n_index: int) -> "Vocabulary":
        words = {FIND, DESCRIBE}
        words.update(gen.categories)
        for cat in gen.categories:
            for col in gen.colors:
                for s in SIZES:
                    words.update(gen.template.format(size=s, color=col, category=cat).split())
        return cls(SPECIALS + [f"<obj{k}>" for k in range(1, n_index + 1)] + sorted(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.ids[token]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.ids[w] for w in text.split()]
        except KeyError as e:
            raise GrammarError(f"out-of-vocabulary word {e.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def index_token(self, k: int) -> int:
        """Id of ``<objk>`` (1-based)."""
        if not 1 <= k <= self.n_index:
            raise GrammarError(f"region index {k} outside 1..{self.n_index}")
        return self.first_index + k - 1

    def region_of(self, token_id: int) -> int | None:
        k = token_id - self.first_index + 1
        return k if self.n_index and 1 <= k <= self.n_index else None

    def is_word(self, token_id: int) -> bool:
        return token_id >= self.first_index + self.n_index

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.tokens))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# grammar

def format_grounding_target(phrase: str, indices: Sequence[int], vocab: Vocabulary, final: bool = True) -> list[int]:
    """``<g> phrase </g> <o> <objK>... </o>`` with indices in ascending order."""
    words = vocab.encode(phrase)
    if not words:
        raise GrammarError("empty phrase")
    idx = [vocab.index_token(k) for k in sorted(set(int(k) for k in indices))]
    out = [vocab[G_OPEN], *words, vocab[G_CLOSE], vocab[O_OPEN], *idx, vocab[O_CLOSE]]
    return out + [vocab[EOS]] if final else out


def format_caption_target(caption: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(caption) + [vocab[EOS]]


@dataclass
class Group:
    phrase: str
    indices: list[int]
    confidences: list[float]
    malformed: bool = False


@dataclass
class GroundingOutput:
    groups: list[Group] = field(default_factory=list)
    malformed: bool = False

    def to_json(self, scene_id: str = "") -> dict:
        return {"scene_id": scene_id,
                "groups": [{"phrase": g.phrase, "indices": g.indices, "confidences": g.confidences,
                            "malformed": g.malformed} for g in self.groups]}


def parse_grounding_output(ids: Sequence[int], vocab: Vocabulary,
                           confidences: Sequence[float] | None = None) -> GroundingOutput:
    """Longest-valid-prefix parse of one or more ``<g>..</g><o>..</o>`` groups.

    Never raises on model output. A group whose phrase closed but whose
    index list is cut short is kept and marked malformed; anything else
    that breaks the grammar ends the parse with ``malformed`` set.
    """
    ids = [int(i) for i in ids]
    conf = list(confidences) if confidences is not None else [1.0] * len(ids)
    out = GroundingOutput()
    n = len(ids)
    pos = 0

    def tok(p):
        return vocab.tokens[ids[p]] if 0 <= ids[p] < len(vocab) else None

    while pos < n:
        t = tok(pos)
        if t == EOS:
            return out
        if t != G_OPEN:
            out.malformed = True
            return out
        pos += 1
        words = []
        while pos < n and ids[pos] >= 0 and ids[pos] < len(vocab) and vocab.is_word(ids[pos]):
            words.append(vocab.tokens[ids[pos]])
            pos += 1
        if pos >= n or tok(pos) != G_CLOSE or not words:
            out.malformed = True
            return out
        pos += 1
        group = Group(" ".join(words), [], [])
        out.groups.append(group)
        if pos >= n or tok(pos) != O_OPEN:
            group.malformed = out.malformed = True
            return out
        pos += 1
        while pos < n:
            k = vocab.region_of(ids[pos]) if 0 <= ids[pos] < len(vocab) else None
            if k is None:
                break
            group.indices.append(k)
            group.confidences.append(float(conf[pos]))
            pos += 1
        if pos >= n or tok(pos) != O_CLOSE:
            group.malformed = out.malformed = True
            return out
        pos += 1
    return out


def format_grounding_output(output: GroundingOutput, vocab: Vocabulary) -> list[int]:
    ids = []
    for g in output.groups:
        ids += format_grounding_target(g.phrase, g.indices, vocab, final=False)
    return ids + [vocab[EOS]]


def parse_caption(ids: Sequence[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        if not (0 <= i < len(vocab)) or not vocab.is_word(i):
            break
        words.append(vocab.tokens[i])
    return " ".join(words)


# ---------------------------------------------------------------------------
# sequence layout

@dataclass
class MultimodalSequence:
    prefix: Tensor            # (P, d) image + region positions, shared by every row
    text_emb: Tensor          # (B, S, d) instruction + response tokens, right-padded
    token_ids: np.ndarray     # (B, P + S); -1 at image/object-feature positions
    targets: np.ndarray       # (B, P + S); id predicted at each position (valid where mask)
    mask: np.ndarray          # (B, P + S) bool, positions whose next token is a response token
    text_pos: int = 0         # position id of the first text token

    @property
    def prefix_len(self) -> int:
        return self.prefix.shape[0]

    @property
    def positions(self) -> np.ndarray:
        """Position ids: the prefix counts from 0, the text from ``text_pos``."""
        return np.concatenate([np.arange(self.prefix_len), self.text_pos + np.arange(self.text_emb.shape[1])])

    @property
    def embeddings(self) -> Tensor:
        """Full (B, P + S, d) input; the prefix is repeated per row."""
        b = self.text_emb.shape[0]
        p0, d = self.prefix.shape
        rep = ad.reshape(self.prefix, (1, p0, d)) + Tensor(np.zeros((b, 1, 1)))
        return ad.concat([rep, self.text_emb], axis=1)


def region_prefix(image_tokens, obj_tokens, index_emb) -> Tensor:
    """[image tokens][<obj1>, O_1, <obj2>, O_2, ...]"""
    image_tokens, obj_tokens = ad.as_tensor(image_tokens), ad.as_tensor(obj_tokens)
    m, d = obj_tokens.shape
    if m == 0:
        return image_tokens
    pairs = ad.stack([ad.as_tensor(index_emb), obj_tokens], axis=1)    # (m, 2, d)
    return ad.concat([image_tokens, ad.reshape(pairs, (2 * m, d))], axis=0)


def text_position(n_image: int, vocab: Vocabulary) -> int:
    """First text position id. All N region slots are reserved, so the
    instruction sits at the same positions whatever the region count."""
    return n_image + 2 * vocab.n_index


def build_input_sequence(image_tokens, obj_tokens, instructions: Sequence[Sequence[int]],
                         targets: Sequence[Sequence[int]] | None, vocab: Vocabulary,
                         token_emb: Tensor, context_len: int = 512) -> MultimodalSequence:
    """Batch of sequences sharing one visual prefix, right-padded with ``<pad>``."""
    obj_tokens = ad.as_tensor(obj_tokens)
    m = obj_tokens.shape[0]
    if m > vocab.n_index:
        raise ValueError(f"{m} regions exceed the {vocab.n_index} index tokens")
    index_ids = [vocab.index_token(k) for k in range(1, m + 1)]
    prefix = region_prefix(image_tokens, obj_tokens, ad.take(token_emb, index_ids))
    p0 = prefix.shape[0]
    text_pos = text_position(ad.as_tensor(image_tokens).shape[0], vocab)
    targets = [[] for _ in instructions] if targets is None else targets
    rows = [list(a) + list(b) for a, b in zip(instructions, targets)]
    lt = max(len(r) for r in rows)
    total = p0 + lt
    if text_pos + lt > context_len:
        raise ValueError(f"sequence reaches position {text_pos + lt}, beyond context length {context_len}")
    b = len(rows)
    text = np.full((b, lt), vocab[PAD], dtype=np.int64)
    tgt = np.full((b, total), vocab[PAD], dtype=np.int64)
    mask = np.zeros((b, total), dtype=bool)
    for r, (ins, y) in enumerate(zip(instructions, targets)):
        if not ins:
            raise ValueError("empty instruction")
        text[r, : len(rows[r])] = rows[r]
        for t in range(len(y)):
            pos = p0 + len(ins) - 1 + t
            tgt[r, pos] = y[t]
            mask[r, pos] = True
    ids = np.concatenate([np.full((b, p0), -1, dtype=np.int64), text], axis=1)
    return MultimodalSequence(prefix, ad.take(token_emb, text), ids, tgt, mask, text_pos)


# ---------------------------------------------------------------------------
# decoder

def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1)


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_llm
        self.heads = cfg.dec_heads
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, cfg.d_ff, rng)
        self.fc2 = Linear(cfg.d_ff, d, rng)

    def _qkv(self, x: Tensor):
        """(..., L, d) -> three (..., h, L, dh) tensors."""
        *lead, l, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = ad.reshape(self.qkv(self.ln1(x)), (*lead, l, 3, h, dh))
        n = len(lead)
        qkv = ad.transpose(qkv, (n + 1, *range(n), n + 2, n, n + 3))      # (3, ..., h, L, dh)
        return qkv[0], qkv[1], qkv[2]

    def _finish(self, x: Tensor, att: Tensor) -> Tensor:
        *lead, l, d = x.shape
        n = len(lead)
        merged = ad.reshape(ad.transpose(att, (*range(n), n + 1, n, n + 2)), (*lead, l, d))
        x = x + self.out(merged)
        return x + self.fc2(ad.gelu(self.fc1(self.ln2(x))))

    def _attend(self, q, k, v, mask) -> Tensor:
        scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1])) + mask
        return ad.matmul(ad.softmax(scores, axis=-1), v)

    def __call__(self, x: Tensor, causal) -> Tensor:
        q, k, v = self._qkv(x)
        return self._finish(x, self._attend(q, k, v, causal))

    def prefix_pass(self, xp: Tensor):
        """Prefix rows only (they never see the text); also returns their keys/values."""
        q, k, v = self._qkv(xp)
        return self._finish(xp, self._attend(q, k, v, Tensor(causal_mask(xp.shape[0])))), k, v

    def suffix_pass(self, xs: Tensor, k_p: Tensor, v_p: Tensor) -> Tensor:
        """Text rows (B, S, d) attending to the shared prefix keys/values plus causal text."""
        b, s_len, _ = xs.shape
        q, k, v = self._qkv(xs)                                      # (B, h, S, dh)
        zeros = Tensor(np.zeros((b, 1, 1, 1)))
        k_all = ad.concat([ad.reshape(k_p, (1, *k_p.shape)) + zeros, k], axis=2)
        v_all = ad.concat([ad.reshape(v_p, (1, *v_p.shape)) + zeros, v], axis=2)
        mask = np.concatenate([np.zeros((s_len, k_p.shape[1])), causal_mask(s_len)], axis=1)
        return self._finish(xs, self._attend(q, k_all, v_all, Tensor(mask)))


class Decoder(Module):
    """Pre-norm causal transformer with learned positions."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, rng):
        d = cfg.d_llm
        self.token_emb = parameter(rng.normal(0, 0.1, (vocab_size, d)))
        self.pos_emb = parameter(rng.normal(0, 0.1, (cfg.context_len, d)))
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.dec_layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, vocab_size, rng)

    def hidden(self, emb: Tensor, positions=None) -> Tensor:
        """Reference path over full (B, L, d) inputs."""
        _, l, _ = emb.shape
        positions = np.arange(l) if positions is None else np.asarray(positions)
        x = emb + ad.take(self.pos_emb, positions)
        causal = Tensor(causal_mask(l))
        for layer in self.layers:
            x = layer(x, causal)
        return self.ln_f(x)

    def __call__(self, emb: Tensor, positions=None) -> Tensor:
        """Logits (B, L, V)."""
        return self.head(self.hidden(emb, positions))

    def prefix_cache(self, prefix: Tensor) -> list[tuple[Tensor, Tensor]]:
        p0 = prefix.shape[0]
        x = prefix + self.pos_emb[:p0]
        cache = []
        for layer in self.layers:
            x, k, v = layer.prefix_pass(x)
            cache.append((k, v))
        return cache

    def text_hidden(self, cache: list[tuple[Tensor, Tensor]], text_emb: Tensor, text_pos: int) -> Tensor:
        """Final hidden states (B, S, d) of the text rows given a prefix cache."""
        s_len = text_emb.shape[1]
        x = text_emb + self.pos_emb[text_pos:text_pos + s_len]
        for layer, (k, v) in zip(self.layers, cache):
            x = layer.suffix_pass(x, k, v)
        return self.ln_f(x)


def ar_loss(logits, targets: np.ndarray, mask: np.ndarray, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``targets`` at masked positions.

    ``logits`` is (B, L, V) or already gathered to (K, V) rows in mask order.
    """
    mask = np.asarray(mask, dtype=bool)
    k = int(mask.sum())
    if k == 0:
        raise ValueError("ar_loss: empty response mask")
    logits = ad.as_tensor(logits)
    rows = logits[np.nonzero(mask)] if logits.ndim == 3 else logits
    y = np.asarray(targets)[mask]
    logp = ad.log_softmax(rows, axis=-1)
    nll = -ad.tsum(logp[np.arange(k), y])
    return nll * (1.0 / k) if reduction == "mean" else nll


def index_probs(logits: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Softmax mass on each index token (subset of the full distribution)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p[..., vocab.first_index: vocab.first_index + vocab.n_index]


def index_confidence(logits: np.ndarray, token_id: int) -> float:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    p = np.exp(z)
    return float(p[token_id] / p.sum())


def greedy_decode(next_logits: Callable[[list[list[int]]], np.ndarray], prompts: Sequence[Sequence[int]],
                  max_len: int, eos_id: int) -> tuple[list[list[int]], list[list[float]]]:
    """Argmax decoding for a batch of prompts.

    ``next_logits(rows)`` maps the current token rows (prompt + generated)
    to next-token logits (B, V). Returns generated ids and the softmax
    probability of each emitted token.
    """
    rows = [list(p) for p in prompts]
    gen: list[list[int]] = [[] for _ in prompts]
    conf: list[list[float]] = [[] for _ in prompts]
    live = list(range(len(rows)))
    for _ in range(max_len):
        if not live:
            break
        logits = np.asarray(next_logits([rows[i] for i in live]))
        still = []
        for j, i in enumerate(live):
            t = int(np.argmax(logits[j]))
            gen[i].append(t)
            conf[i].append(index_confidence(logits[j], t))
            rows[i].append(t)
            if t != eos_id:
                still.append(i)
        live = still
    return gen, conf
