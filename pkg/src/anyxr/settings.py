"""Generation settings such as ``T→F``, ``L+T→F`` or ``T→F+L``."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

MODALITIES = ("F", "L", "T")
ARROW = "→"


def _parse_side(text: str) -> tuple[str, ...]:
    items = [s.strip().upper() for s in text.replace(",", "+").split("+") if s.strip()]
    for m in items:
        if m not in MODALITIES:
            raise ConfigError(f"unknown modality {m!r}; expected one of {MODALITIES}")
    if len(set(items)) != len(items):
        raise ConfigError(f"repeated modality in {text!r}")
    return tuple(sorted(items, key=MODALITIES.index))


@dataclass(frozen=True)
class GenerationSetting:
    sources: tuple[str, ...]
    targets: tuple[str, ...]

    def __post_init__(self):
        if not self.targets:
            raise ConfigError("a generation setting needs at least one target")
        if not self.sources:
            raise ConfigError("a generation setting needs at least one source prompt")
        overlap = set(self.sources) & set(self.targets)
        if overlap:
            raise ConfigError(f"sources and targets overlap: {sorted(overlap)}")

    @classmethod
    def parse(cls, text: str) -> GenerationSetting:
        norm = text.replace("->", ARROW)
        if norm.count(ARROW) != 1:
            raise ConfigError(f"cannot parse generation setting {text!r}")
        left, right = norm.split(ARROW)
        return cls(_parse_side(left), _parse_side(right))

    @classmethod
    def from_lists(cls, sources: str, targets: str) -> GenerationSetting:
        return cls(_parse_side(sources), _parse_side(targets))

    def __str__(self) -> str:
        return "+".join(self.sources) + ARROW + "+".join(self.targets)
