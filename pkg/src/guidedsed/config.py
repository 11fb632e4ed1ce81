"""Single-file TOML experiment configuration.

Every field has a default; only the manifest and output paths are needed per
command.  Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .datapipe import AugmentSpec, BatchSpec
from .inference import DecodeSpec, FusionSpec
from .nets import PS_ENCODER, PT_ENCODER, BlockConfig, EncoderConfig, ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    train_manifest: str | None = None
    valid_manifest: str | None = None
    test_manifest: str | None = None
    out_dir: str | None = None


@dataclass(frozen=True)
class NetConfig:
    """Encoder blocks as ``[channels, kernel, time_pool, freq_pool]`` plus branches."""

    blocks: tuple[tuple[int, int, int, int], ...]
    truncate: bool = False
    # "i_gap", "i_gmp" or "none"; ignored for the teacher
    aux: str = "none"
    sedb: bool = False

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b) for b in self.blocks))
        if self.aux not in ("i_gap", "i_gmp", "none"):
            raise ConfigError(f"aux must be i_gap, i_gmp or none, got {self.aux!r}")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(tuple(BlockConfig(*b) for b in self.blocks), self.truncate)

    def student(self, n_classes: int, n_frames: int, n_bins: int) -> ModelConfig:
        aux = None if self.aux == "none" else self.aux
        return ModelConfig.ps(n_classes, aux, self.sedb, self.encoder, n_frames, n_bins)

    def teacher(self, n_classes: int, n_frames: int, n_bins: int) -> ModelConfig:
        return ModelConfig.pt(n_classes, self.encoder, n_frames, n_bins)


def _blocks(enc: EncoderConfig):
    return tuple((b.channels, b.kernel, b.time_pool, b.freq_pool) for b in enc.blocks)


DEFAULT_PS = NetConfig(_blocks(PS_ENCODER), PS_ENCODER.truncate, "i_gap", False)
DEFAULT_PT = NetConfig(_blocks(PT_ENCODER), PT_ENCODER.truncate)


@dataclass(frozen=True)
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    ps: NetConfig = DEFAULT_PS
    pt: NetConfig = DEFAULT_PT
    train: TrainConfig = field(default_factory=TrainConfig)
    batch: BatchSpec = field(default_factory=BatchSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    augment_enabled: bool = True
    decode: DecodeSpec = field(default_factory=DecodeSpec)
    fusion: FusionSpec = field(default_factory=FusionSpec)
    seed: int = 0

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        def clean(d):
            return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items() if v is not None}

        train = asdict(self.train)
        train.pop("seed")
        out = {
            "seed": self.seed,
            "paths": clean(asdict(self.paths)),
            "ps": clean(asdict(self.ps)) | {"blocks": [list(b) for b in self.ps.blocks]},
            "pt": clean({k: v for k, v in asdict(self.pt).items() if k in ("truncate",)}) | {"blocks": [list(b) for b in self.pt.blocks]},
            "train": clean(train),
            "batch": asdict(self.batch),
            "augment": clean(asdict(self.augment)) | {"enabled": self.augment_enabled},
            "decode": clean(asdict(self.decode)),
            "fusion": clean(asdict(self.fusion)),
        }
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def write(self, path: os.PathLike | str) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


_SECTIONS = {
    "paths": PathsConfig,
    "ps": NetConfig,
    "pt": NetConfig,
    "train": TrainConfig,
    "batch": BatchSpec,
    "augment": AugmentSpec,
    "decode": DecodeSpec,
    "fusion": FusionSpec,
}


def _section(name: str, cls, data, base=None):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    allowed = {f.name for f in fields(cls)}
    if name == "train":
        allowed.discard("seed")
    if name == "augment":
        allowed.add("enabled")
    if name == "pt":
        allowed = {"blocks", "truncate"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config field {name}.{sorted(unknown)[0]}")
    kwargs = {k: v for k, v in data.items() if k != "enabled"}
    if name != "paths" and base is not None:
        kwargs = asdict(base) | kwargs
        if name == "train":
            kwargs.pop("seed", None)
    if name == "augment" and "mix_ratio" in kwargs:
        kwargs["mix_ratio"] = tuple(kwargs["mix_ratio"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from None


def from_dict(data: dict, base_dir: os.PathLike | str | None = None) -> ExperimentConfig:
    unknown = set(data) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config field {sorted(unknown)[0]}")
    defaults = ExperimentConfig()
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    paths = _section("paths", PathsConfig, data.get("paths", {}))
    if base_dir is not None:
        base = Path(base_dir)
        resolved = {
            k: (str((base / v).resolve()) if v is not None and not Path(v).is_absolute() else v)
            for k, v in asdict(paths).items()
        }
        paths = PathsConfig(**resolved)
    parts = {"paths": paths}
    for name in ("ps", "pt", "train", "batch", "augment", "decode", "fusion"):
        parts[name] = _section(name, _SECTIONS[name], data.get(name, {}), getattr(defaults, name))
    aug_enabled = data.get("augment", {}).get("enabled", True)
    if not isinstance(aug_enabled, bool):
        raise ConfigError("augment.enabled must be a boolean")
    train = replace(parts.pop("train"), seed=seed)
    return ExperimentConfig(train=train, augment_enabled=aug_enabled, seed=seed, **parts)


def loads(text: str, base_dir=None) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return from_dict(data, base_dir)


def load_config(path: os.PathLike | str) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return loads(path.read_text(encoding="utf-8"), path.parent)


def require(cfg: ExperimentConfig, *names: str) -> None:
    """Raise ``ConfigError`` naming the first missing ``paths.*`` field."""
    for name in names:
        if getattr(cfg.paths, name) is None:
            raise ConfigError(f"missing config field paths.{name}")


def toy_config(root: os.PathLike | str | None = None, epochs: int = 60) -> ExperimentConfig:
    """Reduced encoders and geometry-scaled shifts for the 125 x 16 toy clips.

    The student keeps the full 12.5 fps frame grid; the teacher pools time 16x.
    """
    paths = PathsConfig()
    if root is not None:
        root = Path(root)
        paths = PathsConfig(str(root / "train.tsv"), str(root / "valid.tsv"), str(root / "test.tsv"), str(root / "run"))
    ps = NetConfig(((16, 3, 1, 2), (32, 3, 1, 2), (32, 3, 1, 1)), False, "i_gap", False)
    pt = NetConfig(
        (
            (16, 3, 2, 2), (16, 3, 1, 1), (32, 3, 2, 2), (32, 3, 1, 1), (32, 3, 2, 2),
            (32, 3, 1, 1), (64, 3, 2, 1), (64, 3, 1, 1), (64, 3, 1, 1),
        ),
        True,
    )
    return ExperimentConfig(
        paths=paths,
        ps=ps,
        pt=pt,
        train=TrainConfig(epochs=epochs, warmup_s=min(15, epochs)),
        augment=AugmentSpec(time_steps=22, freq_steps=2),
        decode=DecodeSpec(median_window=7),
    )
