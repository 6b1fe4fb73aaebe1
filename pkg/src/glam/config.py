"""Run configuration: model, training and data sections with JSON round trip."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from glam.global_net import ConfigError, GlobalConfig
from glam.local_net import LocalConfig
from glam.synthdata import SynthConfig

NEGATIVE_SAMPLING = ("random_negatives", "global_proposals")


@dataclass
class TrainConfig:
    eta: float = 1e-4
    lam: float = 1e-4          # sparsity weight, "lambda" in JSON
    K: int = 6
    M: int = 1
    epochs_global: int = 50
    epochs_local: int = 20
    epochs_joint: int = 5
    batch_size: int = 4
    seed: int = 0
    negative_sampling: str = "random_negatives"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    flip: bool = False

    def validate(self) -> None:
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.K < 1 or self.M < 1:
            raise ConfigError(f"K and M must be >= 1, got K={self.K}, M={self.M}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if min(self.epochs_global, self.epochs_local, self.epochs_joint) < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.negative_sampling not in NEGATIVE_SAMPLING:
            raise ConfigError(f"negative_sampling must be one of {NEGATIVE_SAMPLING}")


_RENAMES = {"lam": "lambda"}


def _section_to_json(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        out[_RENAMES.get(f.name, f.name)] = list(value) if isinstance(value, tuple) else value
    return out


def _section_from_json(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    names = {_RENAMES.get(f.name, f.name): f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for key, value in data.items():
        f = names[key]
        if isinstance(getattr(defaults, f.name), tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{section}.{key} must be a list")
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


@dataclass
class GlamConfig:
    global_: GlobalConfig = field(default_factory=GlobalConfig)
    local: LocalConfig = field(default_factory=LocalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    gamma_c: float = 0.5

    def validate(self) -> "GlamConfig":
        self.global_.validate()
        self.local.validate()
        self.train.validate()
        self.synth.validate()
        if not 0.0 <= self.gamma_c <= 1.0:
            raise ConfigError(f"gamma_c={self.gamma_c} outside [0, 1]")
        g, s = self.global_, self.synth
        if (g.input_h, g.input_w) != (s.height, s.width):
            raise ConfigError(f"synthetic images {s.height}x{s.width} do not match the "
                              f"global input {g.input_h}x{g.input_w}")
        if self.local.patch_h > g.input_h or self.local.patch_w > g.input_w:
            raise ConfigError("patches larger than the input image")
        return self

    @property
    def image_dims(self) -> tuple[int, int]:
        return (self.global_.input_h, self.global_.input_w)

    def to_json(self) -> dict:
        return {"global": _section_to_json(self.global_), "local": _section_to_json(self.local),
                "train": _section_to_json(self.train), "synth": _section_to_json(self.synth),
                "gamma_c": self.gamma_c}

    @classmethod
    def from_json(cls, data: dict) -> "GlamConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(data) - {"global", "local", "train", "synth", "gamma_c"})
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        return cls(
            _section_from_json(GlobalConfig, data.get("global", {}), "global"),
            _section_from_json(LocalConfig, data.get("local", {}), "local"),
            _section_from_json(TrainConfig, data.get("train", {}), "train"),
            _section_from_json(SynthConfig, data.get("synth", {}), "synth"),
            data.get("gamma_c", 0.5),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def replace(self, **sections) -> "GlamConfig":
        return dataclasses.replace(self, **sections)


def load_config(path) -> GlamConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        return GlamConfig.from_json(data).validate()
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def desk_config() -> GlamConfig:
    """768x512 images and 128x128 patches sized for a single desktop CPU."""
    return GlamConfig(
        GlobalConfig(input_h=768, input_w=512, t_global=1.0),
        LocalConfig(patch_h=128, patch_w=128, width=8, t_local=20.0, attention_dim=64),
        TrainConfig(eta=5e-4, lam=10 ** -3.5, epochs_global=25, epochs_local=6, epochs_joint=3,
                    batch_size=4),
        SynthConfig(height=768, width=512),
    ).validate()


def smoke_config() -> GlamConfig:
    """192x128 images; trains all four stages in a few minutes."""
    return GlamConfig(
        GlobalConfig(input_h=192, input_w=128, channels=(16, 32, 64), stem_channels=8,
                     t_global=3.0),
        LocalConfig(patch_h=64, patch_w=64, backbone="hr18", width=8, t_local=20.0,
                    attention_dim=16),
        TrainConfig(eta=5e-4, lam=1e-4, epochs_global=80, epochs_local=10, epochs_joint=5,
                    batch_size=4),
        SynthConfig(height=192, width=128, n_train=300, n_val=60, n_test=60,
                    radius_frac=(0.05, 0.07), area_budget=0.03),
    ).validate()


PRESETS = {"desk": desk_config, "smoke": smoke_config, "default": lambda: GlamConfig()}
