"""Dataclass configs and the flat ``section.key = value`` config format.

Values are JSON literals (numbers, strings, lists, true/false/null); a bare
word is read as a string. Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Bad config field; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


CATEGORIES = ["person", "people", "vehicle", "bicycle", "motorcycle"]
COLORS = ["red", "green", "blue", "yellow", "white", "orange", "purple", "cyan"]
SIZES = ["small", "medium", "large"]


@dataclass
class GeneratorConfig:
    min_objects: int = 4
    max_objects: int = 8
    occlusion_target: float = 0.3
    small_fraction: float = 0.5
    small_area: float = 0.012
    large_area: float = 0.04
    min_area: float = 0.004
    max_area: float = 0.09
    categories: list = field(default_factory=lambda: list(CATEGORIES))
    colors: list = field(default_factory=lambda: list(COLORS))
    color_ids: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    template: str = "the {size} {color} {category}"
    image_size: int = 64
    channels: int = 3
    haze: float = 0.0
    retry_cap: int = 200
    train_size: int = 2000
    val_size: int = 200
    test_size: int = 200
    zeroshot_size: int = 200
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.occlusion_target <= 0.7:
            raise ConfigError("gen.occlusion_target", f"must lie in [0, 0.7], got {self.occlusion_target}")
        if not 0.0 <= self.small_fraction <= 1.0:
            raise ConfigError("gen.small_fraction", f"must lie in [0, 1], got {self.small_fraction}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("gen.min_objects", "need 1 <= min_objects <= max_objects")
        if not 0 < self.min_area < self.small_area <= self.large_area < self.max_area < 1:
            raise ConfigError("gen.small_area", "need 0 < min_area < small_area <= large_area < max_area < 1")
        if not self.color_ids or any(not 0 <= c < len(self.colors) for c in self.color_ids):
            raise ConfigError("gen.color_ids", f"ids must index the {len(self.colors)} colours")
        if self.channels != 3:
            raise ConfigError("gen.channels", "only RGB rasters are generated")
        if not 0.0 <= self.haze < 1.0:
            raise ConfigError("gen.haze", "must lie in [0, 1)")


def zero_shot_variant(cfg: GeneratorConfig) -> GeneratorConfig:
    """Shifted occlusion/size statistics, held-out colours and a haze perturbation."""
    held_out = [i for i in range(len(cfg.colors)) if i not in cfg.color_ids]
    if not held_out:
        raise ConfigError("gen.color_ids", "zero-shot split needs at least one colour outside color_ids")
    return dataclasses.replace(
        cfg,
        occlusion_target=min(0.7, cfg.occlusion_target + 0.1),
        small_fraction=min(1.0, cfg.small_fraction + 0.2),
        color_ids=held_out,
        haze=0.3,
    )


@dataclass
class ProposerConfig:
    p_rec: float = 0.9
    sigma_jit: float = 0.1
    n_fp: int = 3
    N: int = 16
    nms_iou: float = 0.7

    def validate(self) -> None:
        if not 0.0 <= self.p_rec <= 1.0:
            raise ConfigError("proposer.p_rec", "must lie in [0, 1]")
        if self.sigma_jit < 0:
            raise ConfigError("proposer.sigma_jit", "must be >= 0")
        if self.N < 1:
            raise ConfigError("proposer.N", "must be >= 1")


@dataclass
class ModelConfig:
    enc_channels: list = field(default_factory=lambda: [8, 16])
    pool_image_tokens: bool = True
    roi_size: int = 4
    d_o: int = 64
    d_llm: int = 64
    d_t: int = 32
    rank: int = 32
    heads: int = 4
    hash_salt: str = "lgsc-0"
    residual_source: str = "object"
    lgsc_enabled: bool = True
    dec_layers: int = 2
    dec_heads: int = 4
    d_ff: int = 128
    context_len: int = 512

    def validate(self) -> None:
        if self.rank % self.heads:
            raise ConfigError("model.rank", f"rank {self.rank} not divisible by heads {self.heads}")
        if self.d_llm % self.dec_heads:
            raise ConfigError("model.dec_heads", "d_llm must be divisible by dec_heads")
        if self.residual_source not in ("object", "cue"):
            raise ConfigError("model.residual_source", "must be 'object' or 'cue'")
        if len(self.enc_channels) != 2:
            raise ConfigError("model.enc_channels", "the encoder has exactly two stages")


@dataclass
class TrainConfig:
    lambda_sce: float = 2.0
    epochs: int = 1
    warmup_ratio: float = 0.03
    batch_size: int = 4
    lr_lgsc: float = 5e-3
    lr_rest: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    dedup_iou: float | None = None
    loss_reduction: str = "mean"
    captions_per_scene: int = 2
    reshuffle: bool = True          # fresh region permutation every step (False: one per scene)
    seed: int = 0

    def validate(self) -> None:
        if self.lambda_sce < 0:
            raise ConfigError("train.lambda_sce", "must be >= 0")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("train.warmup_ratio", "must lie in [0, 1)")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError("train.loss_reduction", "must be 'mean' or 'sum'")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")


@dataclass
class EvalConfig:
    rank_by: str = "token"
    max_decode_len: int = 24
    occlusion_high: float = 0.25
    query_kind: str = "all"

    def validate(self) -> None:
        if self.rank_by not in ("token", "objectness"):
            raise ConfigError("eval.rank_by", "must be 'token' or 'objectness'")
        if self.query_kind not in ("all", "category", "caption"):
            raise ConfigError("eval.query_kind", "must be 'all', 'category' or 'caption'")


SECTIONS = {"gen": GeneratorConfig, "proposer": ProposerConfig, "model": ModelConfig,
            "train": TrainConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    gen: GeneratorConfig = field(default_factory=GeneratorConfig)
    proposer: ProposerConfig = field(default_factory=ProposerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    version: str = "lgsc-0.1"

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        total = self.gen.max_objects
        if total > self.proposer.N:
            raise ConfigError("proposer.N", f"N={self.proposer.N} is below gen.max_objects={total}")
        return self

    def to_flat(self) -> dict[str, Any]:
        flat = {}
        for name in SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                flat[f"{name}.{k}"] = v
        flat["version"] = self.version
        return flat

    def dumps(self) -> str:
        lines = ["# lgsc run config (section.key = JSON value)"]
        lines += [f"{k} = {json.dumps(v)}" for k, v in self.to_flat().items()]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def model_hash(self) -> str:
        """Hash of the fields that fix parameter shapes."""
        keys = {k: v for k, v in self.to_flat().items()
                if k.startswith("model.") or k in ("proposer.N", "gen.categories", "gen.colors")}
        return hashlib.sha256(json.dumps(keys, sort_keys=True).encode()).hexdigest()[:16]


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: RunConfig, items: dict[str, Any]) -> RunConfig:
    for key, value in items.items():
        if key == "version":
            cfg.version = str(value)
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(key, "unknown key")
        obj = getattr(cfg, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields:
            raise ConfigError(key, "unknown key")
        current = getattr(obj, name)
        setattr(obj, name, _coerce(key, value, current))
    return cfg


def _coerce(key: str, value: Any, current: Any) -> Any:
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return value
    if isinstance(current, str):
        return str(value)
    return value


def parse_flat(text: str) -> dict[str, Any]:
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        items[key.strip()] = _parse_value(raw.strip())
    return items


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None,
                preset: str | None = None) -> RunConfig:
    cfg = PRESETS[preset]() if preset else RunConfig()
    if path is not None:
        apply_overrides(cfg, parse_flat(Path(path).read_text()))
    if overrides:
        apply_overrides(cfg, overrides)
    env_seed = os.environ.get("LGSC_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError("LGSC_SEED", f"not an integer: {env_seed!r}") from None
        cfg.gen.seed = seed
        cfg.train.seed = seed
    return cfg.validate()


def paper_preset() -> RunConfig:
    """Published hyperparameters; the widths are far too large for CPU runs."""
    cfg = RunConfig()
    cfg.model.rank, cfg.model.heads = 512, 8
    cfg.train.lambda_sce = 2.0
    cfg.train.warmup_ratio = 0.03
    cfg.train.lr_lgsc, cfg.train.lr_rest = 1e-4, 2e-5
    cfg.train.beta1, cfg.train.beta2 = 0.9, 0.999
    cfg.train.batch_size = 128
    cfg.train.epochs = 1
    return cfg


def overfit_preset() -> RunConfig:
    """8 memorised scenes, identity proposer."""
    cfg = RunConfig()
    cfg.gen.train_size, cfg.gen.val_size, cfg.gen.test_size, cfg.gen.zeroshot_size = 8, 8, 8, 8
    cfg.gen.min_objects, cfg.gen.max_objects = 3, 5
    cfg.proposer.p_rec, cfg.proposer.sigma_jit, cfg.proposer.n_fp = 1.0, 0.0, 0
    cfg.train.dedup_iou = 0.5
    cfg.train.batch_size = 1
    cfg.train.warmup_ratio = 0.03
    cfg.train.captions_per_scene = 8
    cfg.train.reshuffle = False
    cfg.train.lr_lgsc, cfg.train.lr_rest = 1e-2, 3e-3
    cfg.train.epochs = 63  # 8 scenes x 63 > 500 steps
    return cfg


PRESETS = {"toy": RunConfig, "paper": paper_preset, "overfit": overfit_preset}
