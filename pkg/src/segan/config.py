"""Layered key=value configuration: defaults < config file < command flags.

The file format is line-based `key=value` with `#` comments. Unknown keys are
rejected by name so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigKeyError(ValueError):
    """Unknown or malformed configuration key."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> list[int]:
    return [int(p) for p in text.replace(",", " ").split()]


@dataclass
class KeySpec:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


KNOWN_KEYS: dict[str, KeySpec] = {}


def _key(name: str, parse, default, help_text: str = ""):
    KNOWN_KEYS[name] = KeySpec(name, parse, default, help_text)


_key("seed", int, 0, "master RNG seed")
_key("lr", float, 2e-4, "Adam learning rate")
_key("batch_size", int, 2, "images per step")
_key("rounds", int, 10, "training rounds (full passes)")
_key("average_last", int, 5, "rounds averaged into the final report")
_key("alpha", float, 0.08, "adversarial loss weight")
_key("beta", float, 1.1, "BCE loss weight")
_key("gamma", float, 0.5, "MAE loss weight")
_key("clamp_eps", float, 1e-7, "BCE probability clamp")
_key("stage_channels", _parse_int_list, [16, 32, 64, 128, 256], "encoder stage widths")
_key("squeeze_k", int, 4, "branch-road channel group size")
_key("conv_kernel", int, 3, "stage convolution kernel size")
_key("width", int, 64, "synthetic image width")
_key("height", int, 64, "synthetic image height")
_key("count", int, 4, "synthetic sample count")
_key("branch_count", int, 5, "synthetic vessel branches per image")
_key("thickness_min", float, 1.0, "synthetic vessel thickness lower bound")
_key("thickness_max", float, 2.5, "synthetic vessel thickness upper bound")
_key("contrast", float, -0.40, "synthetic vessel contrast vs background")
_key("noise_sigma", float, 0.02, "synthetic additive noise sigma")
_key("blur_radius", float, 1.0, "synthetic blur sigma in pixels")
_key("workers", int, 1, "parallel workers for synthesis/evaluation")
_key("augment", _parse_bool, False, "expand training data with the 8 dihedral variants")
_key("downsample", int, 1, "integer mean-pool factor applied by the loader")


class CommandConfig:
    """Typed view over the layered key=value pairs."""

    def __init__(self):
        self.values: dict[str, Any] = {k: s.default for k, s in KNOWN_KEYS.items()}
        self.sources: dict[str, str] = {k: "default" for k in KNOWN_KEYS}

    def set(self, key: str, raw: str, source: str) -> None:
        spec = KNOWN_KEYS.get(key)
        if spec is None:
            raise ConfigKeyError(f"unknown configuration key {key!r} (from {source})")
        try:
            self.values[key] = spec.parse(raw) if isinstance(raw, str) else raw
        except (ValueError, TypeError) as exc:
            raise ConfigKeyError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
        self.sources[key] = source

    def load_file(self, path: str | Path) -> None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigKeyError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = stripped.partition("=")
            self.set(key.strip(), value.strip(), source=f"{path}:{lineno}")

    def apply_flags(self, pairs: dict[str, Any]) -> None:
        for key, value in pairs.items():
            if value is None:
                continue
            spec = KNOWN_KEYS.get(key)
            if spec is None:
                raise ConfigKeyError(f"unknown configuration key {key!r} (from flags)")
            if isinstance(value, str):
                self.set(key, value, source="flag")
            else:
                self.values[key] = value
                self.sources[key] = "flag"

    def __getitem__(self, key: str) -> Any:
        if key not in KNOWN_KEYS:
            raise ConfigKeyError(f"unknown configuration key {key!r}")
        return self.values[key]
