"""Run configuration: a flat ``key = value`` file, overridable by ``--key value`` flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional

from .domains import CORRUPTION_KINDS, DEFAULT_ORDER, ToySpec, default_order
from .hog import TARGET_KINDS
from .vit import VitConfig


class ConfigError(ValueError):
    pass


METHOD_KINDS = (
    "source-only",
    "entropy-ln",
    "consistency-random",
    "consistency-dam",
    "adma-random-hog",
    "adma-dam-hog",
)
UPDATE_SCOPES = ("all-params", "layernorm-only")


@dataclass
class RunConfig:
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4], metadata={"list": int})
    out_dir: str = "runs"
    # model
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    ffn_multiplier: int = 4
    num_classes: int = 4
    mc_dropout_p: float = 0.1
    # source data and pretraining
    texture_amplitude: float = 0.05
    source_count: int = 800
    holdout_count: int = 200
    pretrain_epochs: int = 15
    pretrain_lr: float = 6e-4
    batch_size: int = 32
    pretrain_mask_ratio: float = 50.0
    checkpoint: str = ""
    # target stream
    corruptions: list = field(default_factory=lambda: list(DEFAULT_ORDER), metadata={"list": str})
    severity: int = 5
    per_domain_count: int = 50
    rounds: int = 1
    # adaptation
    method: str = "adma-dam-hog"
    target: str = "hog"
    update_scope: str = ""
    lr: float = 5e-7
    mc_passes: int = 10
    mask_ratio: float = 50.0
    lam: float = field(default=0.5, metadata={"key": "lambda"})
    stop_gradient: bool = True
    ratios: list = field(default_factory=lambda: [30.0, 40.0, 50.0, 60.0, 70.0, 80.0], metadata={"list": float})
    # utilities
    image: str = ""
    count: int = 16

    def validate(self) -> "RunConfig":
        def need(ok: bool, key: str, constraint: str) -> None:
            if not ok:
                raise ConfigError(f"{key}: must satisfy {constraint} (got {getattr(self, _attr(key))!r})")

        need(self.seed >= 0, "seed", ">= 0")
        need(len(self.seeds) >= 1 and all(s >= 0 for s in self.seeds), "seeds", "at least one seed, all >= 0")
        for key in ("image_size", "patch_size", "embed_dim", "depth", "heads", "ffn_multiplier", "count"):
            need(getattr(self, key) >= 1, key, ">= 1")
        need(self.image_size % self.patch_size == 0, "patch_size", "divides image_size")
        need(self.patch_size % 8 == 0, "patch_size", "a multiple of the 8-pixel HOG cell")
        need(self.embed_dim % self.heads == 0, "heads", "divides embed_dim")
        need(2 <= self.num_classes <= 4, "num_classes", "2 <= num_classes <= 4")
        need(0.0 <= self.mc_dropout_p < 1.0, "mc_dropout_p", "0 <= p < 1")
        need(self.texture_amplitude >= 0, "texture_amplitude", ">= 0")
        need(self.source_count >= self.num_classes, "source_count", ">= num_classes")
        need(self.holdout_count >= 1, "holdout_count", ">= 1")
        need(self.pretrain_epochs >= 0, "pretrain_epochs", ">= 0")
        need(self.pretrain_lr > 0, "pretrain_lr", "> 0")
        need(self.batch_size >= 1, "batch_size", ">= 1")
        need(0.0 <= self.pretrain_mask_ratio <= 100.0, "pretrain_mask_ratio", "the range [0,100]")
        need(len(self.corruptions) >= 1, "corruptions", "a non-empty list")
        for c in self.corruptions:
            need(c in CORRUPTION_KINDS, "corruptions", f"kinds from {', '.join(CORRUPTION_KINDS)}")
        need(0 <= self.severity <= 5, "severity", "0 <= severity <= 5")
        need(self.per_domain_count >= 1, "per_domain_count", ">= 1")
        need(self.rounds >= 1, "rounds", ">= 1")
        need(self.method in METHOD_KINDS, "method", f"one of {', '.join(METHOD_KINDS)}")
        need(self.target in TARGET_KINDS, "target", f"one of {', '.join(TARGET_KINDS)}")
        need(self.update_scope in ("",) + UPDATE_SCOPES, "update_scope", f"empty or one of {', '.join(UPDATE_SCOPES)}")
        need(self.lr > 0, "lr", "> 0")
        need(self.mc_passes >= 2, "mc_passes", ">= 2")
        need(0.0 <= self.mask_ratio <= 100.0, "mask_ratio", "the range [0,100]")
        need(self.lam >= 0.0, "lambda", ">= 0")
        need(all(0.0 <= r <= 100.0 for r in self.ratios), "ratios", "every ratio in the range [0,100]")
        return self

    # -- derived objects --------------------------------------------------

    def vit(self) -> VitConfig:
        return VitConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            heads=self.heads,
            ffn_multiplier=self.ffn_multiplier,
            num_classes=self.num_classes,
            mc_dropout_p=self.mc_dropout_p,
        )

    def toy(self) -> ToySpec:
        return ToySpec(self.num_classes, self.image_size, self.texture_amplitude)

    def order(self) -> list:
        return default_order(self.severity, self.corruptions)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    # -- serialisation ----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(_fmt(x) for x in v)
            else:
                v = _fmt(v)
            lines.append(f"{_key(f)} = {v}")
        return "\n".join(lines) + "\n"

    def snapshot(self) -> dict:
        return {_key(f): getattr(self, f.name) for f in fields(self)}


def _key(f) -> str:
    return f.metadata.get("key", f.name)


_KEYS = {_key(f): f for f in fields(RunConfig)}


def _attr(key: str) -> str:
    return _KEYS[key].name if key in _KEYS else key


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def known_keys() -> list:
    return list(_KEYS)


def _convert(key: str, raw: str):
    f = _KEYS[key]
    raw = raw.strip()
    try:
        if "list" in f.metadata:
            item = f.metadata["list"]
            return [item(x.strip()) for x in raw.split(",") if x.strip()]
        typ = type(f.default) if f.default is not dataclasses.MISSING else str
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{key}: unknown configuration key")
        values[key] = _convert(key, raw)
    return values


def parse_config(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None, text: Optional[str] = None) -> RunConfig:
    """Defaults, then the file (or ``text``), then flag overrides; validated."""
    values = {}
    if path is not None:
        values.update(parse_text(Path(path).read_text(encoding="utf-8")))
    if text is not None:
        values.update(parse_text(text))
    for key, raw in (overrides or {}).items():
        if key not in _KEYS:
            raise ConfigError(f"{key}: unknown configuration key")
        values[key] = _convert(key, raw) if isinstance(raw, str) else raw
    return RunConfig(**{_KEYS[k].name: v for k, v in values.items()}).validate()
