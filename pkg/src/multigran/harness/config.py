"""Stage configurations, presets and the key-value config file."""
from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from ..objective import LossWeights

SEED_ENV = "MULTIGRAN_SEED"

STAGE2_MIX = {"panoptic": 1 / 3, "referring": 1 / 3, "detection": 1 / 6, "grounding": 1 / 6}
COMPONENTS = ("encoder", "connector", "lm", "queries", "decoder")


@dataclass(frozen=True)
class StageConfig:
    stage: int
    trainable: tuple
    lr: float
    batch_size: int
    steps: int
    weight_decay: float
    warmup_ratio: float = 0.03
    schedule: str = "cosine"
    mix: dict = field(default_factory=lambda: {"captions": 1.0})
    weights: LossWeights = LossWeights()
    image_size: int = 128
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    min_lr_ratio: float = 0.0
    log_every: int = 50
    checkpoint_every: int = 0       # 0: only at the end

    def __post_init__(self):
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise ValueError(f"mix probabilities sum to {sum(self.mix.values())}, expected 1")
        if any(p < 0 for p in self.mix.values()):
            raise ValueError("mix probabilities must be non-negative")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup ratio {self.warmup_ratio} outside [0, 1)")
        unknown = set(self.trainable) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown components {sorted(unknown)}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch size must be positive")

    @property
    def warmup_steps(self) -> int:
        return int(math.floor(self.warmup_ratio * self.steps))


@dataclass(frozen=True)
class ModelConfig:
    visual_dim: int = 64
    lm_dim: int = 128
    lm_layers: int = 2
    lm_heads: int = 4
    context: int = 256
    dim: int = 64
    decoder_layers: int = 3
    heads: int = 4
    points: int = 4
    num_queries: int = 20
    num_stuff: int = 6
    query_selection: bool = True
    dn_groups: int = 2
    box_noise: float = 0.4
    label_noise: float = 0.2


@dataclass(frozen=True)
class DataConfig:
    num_images: int = 16
    caption_images: int = 50       # 50 scenes x 4 phrasings = 200 captions for stage 1
    response_setting: str = "caption"
    neg_budget: Optional[int] = None


def make_stage_configs(scale: str = "desk") -> tuple[StageConfig, StageConfig]:
    """Stage 1 (connector alignment) and stage 2 (instruction tuning) presets."""
    if scale == "full":
        s1 = StageConfig(1, ("connector",), 2e-3, 128, 4650, 0.0)
        s2 = StageConfig(2, ("connector", "lm", "queries", "decoder"), 4e-5, 64, 80000, 0.05, mix=dict(STAGE2_MIX))
        return s1, s2
    if scale == "desk":
        s1 = StageConfig(1, ("connector",), 2e-3, 8, 300, 0.0, log_every=25)
        s2 = StageConfig(2, ("connector", "lm", "queries", "decoder"), 1e-3, 4, 2000, 0.05,
                         mix=dict(STAGE2_MIX), log_every=100)
        return s1, s2
    raise ValueError(f"unknown scale {scale!r}")


def model_config(scale: str = "desk", **overrides) -> ModelConfig:
    base = ModelConfig(num_queries=100, num_stuff=100) if scale == "full" else ModelConfig()
    return replace(base, **overrides)


@dataclass
class RunConfig:
    """Everything one CLI invocation needs; every field is settable from the config file."""

    scale: str = "desk"
    seed: int = 0
    stage: int = 2
    out_dir: str = "runs/desk"
    init: str = ""                  # checkpoint to start from
    resume: str = ""                # checkpoint to resume (same stage)
    stage1: Optional[StageConfig] = None
    stage2: Optional[StageConfig] = None
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()

    def __post_init__(self):
        s1, s2 = make_stage_configs(self.scale)
        self.stage1 = self.stage1 or s1
        self.stage2 = self.stage2 or s2

    @property
    def current(self) -> StageConfig:
        return self.stage1 if self.stage == 1 else self.stage2


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if like is None:
        return int(raw) if raw.lstrip("-").isdigit() else raw
    return raw


# Flat names accepted in config files and on the command line.
ALIASES = {
    "num_queries": "model.num_queries",
    "num_stuff_queries": "model.num_stuff",
    "query_selection": "model.query_selection",
    "decoder_layers": "model.decoder_layers",
    "sampling_points": "model.points",
    "denoising.groups": "model.dn_groups",
    "denoising.box_noise": "model.box_noise",
    "denoising.label_noise": "model.label_noise",
    "num_images": "data.num_images",
    "neg_budget": "data.neg_budget",
    "response_setting": "data.response_setting",
    "steps": "train.steps",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
}


def _expand_aliases(items: dict[str, str]) -> dict[str, str]:
    out = {}
    for key, raw in items.items():
        key = key.strip().lower().replace("-", "_")
        if key == "denoising":
            if _coerce(raw.strip(), True) is False:
                out["model.dn_groups"] = "0"
            continue
        if key == "image_size":
            out["stage1.image_size"] = out["stage2.image_size"] = raw
            continue
        out[ALIASES.get(key, key)] = raw
    return out


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    """Apply flat ``key = value`` settings.

    Plain keys set run fields (``seed``, ``stage``, ``out_dir``...).
    ``model.<field>``, ``data.<field>``, ``stage1.<field>`` / ``stage2.<field>``
    (or ``train.<field>`` for the selected stage), ``weights.<field>`` and
    ``mix.<source>`` address the nested settings. The flat names in
    ``ALIASES``, ``denoising = on|off`` and ``image_size`` are shorthands.
    """
    items = _expand_aliases(items)
    run_fields = {f.name for f in fields(RunConfig)} - {"stage1", "stage2", "model", "data"}
    groups: dict[str, dict] = {}
    for key, raw in items.items():
        raw = raw.strip()
        if key in run_fields:
            setattr(cfg, key, _coerce(raw, getattr(cfg, key)))
            if key == "scale":
                cfg.stage1, cfg.stage2 = make_stage_configs(cfg.scale)
            continue
        prefix, _, name = key.partition(".")
        if not name:
            raise KeyError(f"unknown config key {key!r}")
        groups.setdefault(prefix, {})[name] = raw

    def patch(obj, kv):
        names = {f.name: getattr(obj, f.name) for f in fields(obj)}
        upd = {}
        for k, v in kv.items():
            if k not in names:
                raise KeyError(f"unknown config key {k!r} for {type(obj).__name__}")
            upd[k] = _coerce(v, names[k])
        return replace(obj, **upd)

    if "model" in groups:
        cfg.model = patch(cfg.model, groups.pop("model"))
    if "data" in groups:
        cfg.data = patch(cfg.data, groups.pop("data"))
    for name in ("stage1", "stage2", "train"):
        if name not in groups:
            continue
        kv = groups.pop(name)
        target = {"stage1": 1, "stage2": 2}.get(name, cfg.stage)
        sc = cfg.stage1 if target == 1 else cfg.stage2
        sc = patch(sc, kv)
        if target == 1:
            cfg.stage1 = sc
        else:
            cfg.stage2 = sc
    if "weights" in groups:
        sc = cfg.current
        sc = replace(sc, weights=patch(sc.weights, groups.pop("weights")))
        cfg.stage1, cfg.stage2 = (sc, cfg.stage2) if cfg.stage == 1 else (cfg.stage1, sc)
    if "mix" in groups:
        mix = {k: float(v) for k, v in groups.pop("mix").items()}
        sc = replace(cfg.current, mix=mix)
        cfg.stage1, cfg.stage2 = (sc, cfg.stage2) if cfg.stage == 1 else (cfg.stage1, sc)
    if groups:
        raise KeyError(f"unknown config sections {sorted(groups)}")
    return cfg


def read_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines (``#`` comments allowed, no section headers)."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[run]\n" + Path(path).read_text())
    return dict(parser["run"])


def load_config(path=None, overrides: Optional[dict] = None, env=None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides, then the seed environment variable."""
    env = os.environ if env is None else env
    items = read_config_file(path) if path else {}
    scale = (overrides or {}).get("scale") or items.get("scale", "desk")
    cfg = RunConfig(scale=str(scale).strip())
    cfg = apply_overrides(cfg, items)
    if overrides:
        cfg = apply_overrides(cfg, {k: str(v) for k, v in overrides.items() if v is not None})
    if env.get(SEED_ENV):
        cfg.seed = int(env[SEED_ENV])
    return cfg
