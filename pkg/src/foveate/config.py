"""Run configuration: a flat dotted-key namespace with typed defaults.

Config files are plain text, one ``key = value`` per line, ``#`` comments
allowed. Unknown keys are rejected (with a nearest-key suggestion) and every
run echoes its fully resolved configuration so results are reproducible from
artifacts alone.
"""

from __future__ import annotations

import difflib
import os

from .grpo import GrpoConfig
from .model import EncoderConfig
from .policy import PolicyConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "SCHEMA"]


class ConfigError(ValueError):
    pass


# key -> (type, default)
SCHEMA: dict[str, tuple[type, object]] = {
    "data.kind": (str, "cluttered"),       # cluttered | idx | manifest
    "data.canvas": (int, 128),
    "data.digit_side": (int, 28),
    "data.distractors": (int, 4),
    "data.train_size": (int, 6000),
    "data.val_size": (int, 1000),
    "data.idx_images": (str, ""),
    "data.idx_labels": (str, ""),
    "data.manifest": (str, ""),
    "model.layers": (int, 4),
    "model.dim": (int, 128),
    "model.heads": (int, 4),
    "model.state": (int, 8),
    "model.patch": (int, 16),
    "model.zooms": (int, 8),
    "model.max_z": (float, 4.0),
    "model.classes": (int, 10),
    "model.mlp_ratio": (float, 4.0),
    "model.pos_hidden": (int, 64),
    "policy.components": (int, 4),
    "policy.sigma": (float, 0.1),
    "policy.heads": (int, 2),
    "train.episode_len": (int, 8),
    "train.epochs": (int, 10),
    "train.batch_size": (int, 64),
    "train.base_lr": (float, 5e-4),
    "train.warmup_frac": (float, 0.05),
    "train.weight_decay": (float, 0.05),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.mixup_alpha": (float, 0.2),
    "train.seed": (int, 0),
    "train.eval_batch": (int, 256),
    "train.eval_subset": (int, 1000),
    "grpo.group": (int, 16),
    "grpo.outer_steps": (int, 40),
    "grpo.batch_images": (int, 8),
    "grpo.inner_epochs": (int, 8),
    "grpo.eps_clip": (float, 0.2),
    "grpo.advantage": (str, "improvement"),  # improvement | terminal
    "grpo.lr": (float, 1e-4),
    "grpo.weight_decay": (float, 0.0),
    "out.dir": (str, "runs/out"),
}

_CHOICES = {
    "data.kind": {"cluttered", "idx", "manifest"},
    "grpo.advantage": {"improvement", "terminal"},
}


def _coerce(key: str, raw: str):
    typ, _ = SCHEMA[key]
    try:
        if typ is int:
            value = int(raw)
        elif typ is float:
            value = float(raw)
        else:
            value = raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} is not {typ.__name__}") from exc
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(
            f"bad value for {key!r}: {value!r} not in {sorted(_CHOICES[key])}"
        )
    return value


def _unknown(key: str) -> ConfigError:
    near = difflib.get_close_matches(key, SCHEMA.keys(), n=1)
    hint = f"; did you mean {near[0]!r}?" if near else ""
    return ConfigError(f"unknown config key {key!r}{hint}")


class RunConfig:
    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise _unknown(key)
        return self.values[key]

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            layers=self["model.layers"], dim=self["model.dim"],
            heads=self["model.heads"], state_size=self["model.state"],
            patch=self["model.patch"], zooms=self["model.zooms"],
            max_z=self["model.max_z"], num_classes=self["model.classes"],
            mlp_ratio=self["model.mlp_ratio"], pos_hidden=self["model.pos_hidden"],
        )

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(components=self["policy.components"],
                            sigma=self["policy.sigma"], heads=self["policy.heads"])

    def grpo_config(self) -> GrpoConfig:
        return GrpoConfig(
            group=self["grpo.group"], episode_len=self["train.episode_len"],
            outer_steps=self["grpo.outer_steps"],
            batch_images=self["grpo.batch_images"],
            inner_epochs=self["grpo.inner_epochs"], eps_clip=self["grpo.eps_clip"],
            advantage=self["grpo.advantage"], lr=self["grpo.lr"],
            weight_decay=self["grpo.weight_decay"],
        )

    def echo(self) -> str:
        """Canonical text form of the resolved configuration."""
        lines = [f"{k} = {self.values[k]}" for k in SCHEMA]
        return "\n".join(lines) + "\n"

    def validate_paths(self):
        if self["data.kind"] == "idx":
            for key in ("data.idx_images", "data.idx_labels"):
                if not self[key] or not os.path.exists(self[key]):
                    raise ConfigError(f"{key} does not exist: {self[key]!r}")
        if self["data.kind"] == "manifest":
            if not self["data.manifest"] or not os.path.exists(self["data.manifest"]):
                raise ConfigError(f"data.manifest does not exist: {self['data.manifest']!r}")


def parse_config(path: str | None = None, overrides: list[str] | dict | None = None) -> RunConfig:
    """Resolve defaults <- file <- overrides (later wins)."""
    values = {k: default for k, (_, default) in SCHEMA.items()}

    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (part.strip() for part in stripped.split("=", 1))
                if key not in SCHEMA:
                    raise _unknown(key)
                values[key] = _coerce(key, raw)

    items: list[tuple[str, str]] = []
    if isinstance(overrides, dict):
        items = [(k, str(v)) for k, v in overrides.items()]
    elif overrides:
        for ov in overrides:
            if "=" not in ov:
                raise ConfigError(f"override must be key=value, got {ov!r}")
            key, raw = (part.strip() for part in ov.split("=", 1))
            items.append((key, raw))
    for key, raw in items:
        if key not in SCHEMA:
            raise _unknown(key)
        values[key] = _coerce(key, raw)

    return RunConfig(values)
