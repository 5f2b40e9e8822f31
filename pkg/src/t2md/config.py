"""Flat ``key=value`` run configuration with canonical key order."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .data import VOCAB_SIZE
from .distill import DistillConfig
from .model import ModelConfig, _fmt, _parse
from .nn import ConfigError

# Small enough for a laptop CPU: an 8x8 latent, a 4x4 token grid and six blocks.
DESK_MODEL = ModelConfig(groups=2, mambas_per_group=1, dim=64, heads=4, patch=2, d_state=16, expand=2,
                         ssm_head_dim=16, ssm_chunk=8, channels=4, latent_size=8, text_vocab=VOCAB_SIZE,
                         text_dim=32)
DESK_DISTILL = DistillConfig(diffusion_steps=100, beta_min=1e-3, beta_max=0.2, lr_teacher=1e-3, lr_forcing=3e-3,
                             lr_distill=1e-3, lr_adapt=3e-4, lr_finetune=2e-4, teacher_steps=3000,
                             forcing_steps=600, distill_steps=300, adapt_steps=2000, finetune_a_steps=150,
                             finetune_b_steps=60, batch_size=16, val_size=256, log_every=50,
                             lr_schedule="cosine", mixer_lr_schedule="constant")

_SECTIONS = ("model", "distill")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = DESK_MODEL
    distill: DistillConfig = DESK_DISTILL
    seed: int = 0
    data_seed: int = 0
    data_objects: int = 1
    sample_count: int = 16

    def to_dict(self) -> dict[str, str]:
        out = {f"model.{k}": v for k, v in self.model.to_dict().items()}
        out.update({f"distill.{k}": v for k, v in self.distill.to_dict().items()})
        for f in dataclasses.fields(self):
            if f.name not in _SECTIONS:
                out[f.name] = _fmt(getattr(self, f.name))
        return dict(sorted(out.items()))

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    @classmethod
    def valid_keys(cls) -> list[str]:
        return list(cls().to_dict())

    @classmethod
    def from_dict(cls, values: dict[str, str], base: RunConfig | None = None) -> RunConfig:
        base = base or cls()
        valid = set(base.to_dict())
        unknown = sorted(set(values) - valid)
        if unknown:
            raise ConfigError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(sorted(valid))}")
        try:
            model = _apply(base.model, {k[6:]: v for k, v in values.items() if k.startswith("model.")})
            distill = _apply(base.distill, {k[8:]: v for k, v in values.items() if k.startswith("distill.")})
            top = {f.name: _parse(values[f.name], f.type) for f in dataclasses.fields(cls)
                   if f.name not in _SECTIONS and f.name in values}
            return dataclasses.replace(base, model=model, distill=distill, **top)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_text(cls, text: str, base: RunConfig | None = None) -> RunConfig:
        return cls.from_dict(parse_pairs(text.splitlines()), base)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _apply(obj, changes: dict[str, str]):
    types = {f.name: f.type for f in dataclasses.fields(obj)}
    return dataclasses.replace(obj, **{k: _parse(v, types[k]) for k, v in changes.items()}) if changes else obj


def parse_pairs(lines) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out
