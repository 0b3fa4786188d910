"""Sectioned ``key = value`` configuration with typed defaults.

Every key has a default; unknown sections or keys, malformed lines and
values of the wrong type are rejected with the offending line number.
``[stage.<name>]`` sections override optimizer settings for one stage.
"""
from __future__ import annotations

import copy
from pathlib import Path

from .errors import ConfigError

STAGES = ("bridging", "vae_image_F", "vae_image_L", "vae_text", "ldm_F", "ldm_L", "ldm_R",
          "joint_FL", "joint_FR", "oracle")

# section -> key -> (type, default, help)
SCHEMA: dict[str, dict[str, tuple[type, object, str]]] = {
    "run": {
        "seed": (int, 0, "master seed for every stage and sampler"),
    },
    "data": {
        "image_size": (int, 32, "square side of preprocessed images"),
        "prevalence": (float, 0.4, "per-condition prevalence for synthetic data"),
        "unmentioned": (float, 0.5, "fraction of absent conditions left out of the report"),
    },
    "diffusion": {
        "steps": (int, 100, "T; full-scale reference 1000"),
        "beta_start": (float, 1e-3, "full-scale reference 1e-4 at T=1000"),
        "beta_end": (float, 0.2, "full-scale reference 0.02 at T=1000"),
    },
    "model": {
        "d_p": (int, 128, "prompt embedding size"),
        "d_t": (int, 64, "text latent size"),
        "d_s": (int, 64, "shared environment space size"),
        "c_z": (int, 4, "image latent channels"),
        "unet_width": (int, 32, "UNet base channels"),
        "encoder_width": (int, 64, "transformer width of prompt encoders and text VAE"),
        "heads": (int, 4, "attention heads"),
        "depth": (int, 2, "transformer blocks per encoder"),
    },
    "optimizer": {
        "lr": (float, 1e-3, "full-scale reference 5e-5 (image) / 1e-5 (text)"),
        "weight_decay": (float, 1e-4, "decoupled AdamW decay"),
        "beta1": (float, 0.9, ""),
        "beta2": (float, 0.999, ""),
        "eps": (float, 1e-8, ""),
        "batch_size": (int, 32, "full-scale reference 512 / 1024"),
        "epochs": (int, 30, "full-scale reference 100"),
    },
    "contrastive": {
        "tau": (float, 0.07, "InfoNCE temperature"),
    },
    "vae": {
        "beta_kl_image": (float, 1e-4, ""),
        "beta_kl_text": (float, 1e-2, ""),
    },
    "generate": {
        "n": (int, 64, "samples per setting"),
    },
}

STAGE_KEYS: dict[str, tuple[type, str]] = {
    "epochs": (int, "epochs for this stage"),
    "lr": (float, "learning rate for this stage"),
    "batch_size": (int, "batch size for this stage"),
    "weight_decay": (float, "weight decay for this stage"),
}

# desk-scale per-stage defaults; anything absent inherits [optimizer]
STAGE_DEFAULTS: dict[str, dict[str, object]] = {
    "bridging": {"epochs": 30},
    "vae_image_F": {"epochs": 10},
    "vae_image_L": {"epochs": 10},
    "vae_text": {"epochs": 20},
    "ldm_F": {"epochs": 30},
    "ldm_L": {"epochs": 30},
    "ldm_R": {"epochs": 40},
    "joint_FL": {"epochs": 60, "lr": 3e-3},
    "joint_FR": {"epochs": 30, "lr": 3e-3},
    "oracle": {"epochs": 15, "lr": 2e-3},
}


def _coerce(typ: type, raw: str, where: str):
    if raw == "":
        return None
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {typ.__name__}, got {raw!r}") from None


class Config:
    """Resolved settings; ``cfg["diffusion"]["steps"]`` style access."""

    def __init__(self, values: dict | None = None):
        self.values = copy.deepcopy(values) if values is not None else defaults()

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def __eq__(self, other) -> bool:
        return isinstance(other, Config) and self.values == other.values

    def stage(self, name: str) -> dict:
        """Optimizer settings for one stage, with overrides applied."""
        if name not in STAGES:
            raise ConfigError(f"unknown stage {name!r}; valid stages: {', '.join(STAGES)}")
        out = dict(self.values["optimizer"])
        for k, v in self.values[f"stage.{name}"].items():
            if v is not None:
                out[k] = v
        return out

    def set(self, section: str, key: str, value) -> None:
        if section not in self.values or key not in self.values[section]:
            raise ConfigError(f"unknown key [{section}] {key}")
        self.values[section][key] = value

    def serialize(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            for k, v in keys.items():
                lines.append(f"{k} = {'' if v is None else repr(v) if isinstance(v, float) else v}")
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")


def defaults() -> dict:
    values = {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}
    for stage in STAGES:
        values[f"stage.{stage}"] = {k: STAGE_DEFAULTS.get(stage, {}).get(k) for k in STAGE_KEYS}
    return values


def _key_type(section: str, key: str) -> type | None:
    if section in SCHEMA:
        spec = SCHEMA[section].get(key)
        return spec[0] if spec else None
    if section.startswith("stage."):
        spec = STAGE_KEYS.get(key)
        return spec[0] if spec else None
    return None


def parse_text(text: str, source: str = "<config>") -> Config:
    cfg = Config()
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {stripped!r}")
            section = stripped[1:-1].strip()
            if section not in cfg.values:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside of any section")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        typ = _key_type(section, key)
        if typ is None:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        value = _coerce(typ, raw, where)
        if value is None and not section.startswith("stage."):
            raise ConfigError(f"{where}: {key} needs a value")
        cfg.values[section][key] = value
    _validate(cfg)
    return cfg


def _validate(cfg: Config) -> None:
    d = cfg["diffusion"]
    if d["steps"] < 1:
        raise ConfigError("[diffusion] steps must be >= 1")
    if not 0 < d["beta_start"] <= d["beta_end"] < 1:
        raise ConfigError("[diffusion] needs 0 < beta_start <= beta_end < 1")
    if cfg["contrastive"]["tau"] <= 0:
        raise ConfigError("[contrastive] tau must be positive")
    if cfg["data"]["image_size"] % 8:
        raise ConfigError("[data] image_size must be a multiple of 8")
    if not 0 <= cfg["data"]["prevalence"] <= 1:
        raise ConfigError("[data] prevalence must lie in [0, 1]")


def parse_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))
