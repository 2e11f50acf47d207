"""Campaign configuration and its flat ``key = number`` file format.

Grammar: one ``key = number`` per line; ``#`` starts a comment; blank lines
are ignored; unknown keys and non-numeric values are errors.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .design import DESettings
from .plant import PlantParams
from .symreg import GPSettings
from .ude import UDESettings


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CampaignConfig:
    plant: PlantParams = field(default_factory=PlantParams)
    ude: UDESettings = field(default_factory=UDESettings)
    gp: GPSettings = field(default_factory=GPSettings)
    de: DESettings = field(default_factory=DESettings)
    n_experiments: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_experiments < 1:
            raise ConfigError("n_experiments must be >= 1")

    @property
    def M(self) -> int:
        return self.gp.top_m

    def with_overrides(self, **kw) -> "CampaignConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "plant": asdict(self.plant),
            "ude": asdict(self.ude),
            "gp": asdict(self.gp),
            "de": asdict(self.de),
            "n_experiments": self.n_experiments,
            "seed": self.seed,
        }

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()

    def to_text(self) -> str:
        flat = flatten(self)
        # booleans are written as 0/1 to keep the format purely numeric
        return "".join(f"{k} = {int(v) if isinstance(v, bool) else v!r}\n" for k, v in flat.items())


# flat key -> (section, field); x0 components are split out
_SECTIONS = {"plant": PlantParams, "ude": UDESettings, "gp": GPSettings, "de": DESettings}
_X0_KEYS = ("Cs0", "Cx0", "V0")
_PLANT_NAMES = {
    "mu_max", "K_s", "y_xs", "m", "C_s_in", "noise_sd", "t_end", "N", "u_min", "u_max",
}


def _key_table() -> dict:
    table = {}
    for f in fields(PlantParams):
        if f.name in _PLANT_NAMES:
            table[f.name] = ("plant", f.name)
    for key in _X0_KEYS:
        table[key] = ("plant", key)
    for prefix, cls in (("ude", UDESettings), ("gp", GPSettings), ("de", DESettings)):
        for f in fields(cls):
            table[f"{prefix}_{f.name}"] = (prefix, f.name)
    table["n_experiments"] = ("campaign", "n_experiments")
    table["seed"] = ("campaign", "seed")
    table["M"] = ("gp", "top_m")
    return table


KEYS = _key_table()


def flatten(config: CampaignConfig) -> dict:
    out = {}
    for key, (section, name) in KEYS.items():
        if key == "M":
            continue
        if section == "campaign":
            out[key] = getattr(config, name)
        elif key in _X0_KEYS:
            out[key] = config.plant.x0[_X0_KEYS.index(key)]
        else:
            value = getattr(getattr(config, section), name)
            if value is not None:
                out[key] = value
    return out


def _number(text: str, key: str, lineno: int):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"line {lineno}: value for {key!r} is not a number: {text!r}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = number', got {raw!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _number(val, key, lineno)
    return values


def config_from_values(values: dict, base: CampaignConfig | None = None) -> CampaignConfig:
    base = base or CampaignConfig()
    sections = {name: asdict(getattr(base, name)) for name in _SECTIONS}
    x0 = list(base.plant.x0)
    top = {"n_experiments": base.n_experiments, "seed": base.seed}
    for key, value in values.items():
        section, name = KEYS[key]
        if key in _X0_KEYS:
            x0[_X0_KEYS.index(key)] = float(value)
        elif section == "campaign":
            top[name] = value
        elif isinstance(sections[section][name], bool):
            if value not in (0, 1):
                raise ConfigError(f"{key} must be 0 or 1")
            sections[section][name] = bool(value)
        else:
            sections[section][name] = value
    sections["plant"]["x0"] = tuple(x0)
    try:
        built = {name: cls(**sections[name]) for name, cls in _SECTIONS.items()}
        for name in ("n_experiments", "seed"):
            if int(top[name]) != top[name]:
                raise ConfigError(f"{name} must be an integer")
        return CampaignConfig(n_experiments=int(top["n_experiments"]), seed=int(top["seed"]), **built)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> CampaignConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_values(parse_config_text(text))
