"""Flat ``key = value`` run configuration with dotted keys.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Every recognised key and its default is listed in :data:`DEFAULTS`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from .codenet import ModelConfig, PEConfig
from .datasynth import NoiseModel
from .svforward import Geometry
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _size(s: str) -> Tuple[int, int]:
    """``360`` or ``360x360``."""
    parts = s.lower().replace(",", "x").split("x")
    if len(parts) == 1:
        return int(parts[0]), int(parts[0])
    if len(parts) == 2:
        return int(parts[0]), int(parts[1])
    raise ValueError(f"expected N or HxW, got {s!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


def _path(s: str) -> str:
    return s


# key -> (default, parser, description); a default of None marks a required path
DEFAULTS: Dict[str, Tuple[Any, Callable[[str], Any], str]] = {
    "geometry.sensor_size": ((360, 360), _size, "sensor frame, N or HxW pixels"),
    "geometry.pad_size": ((420, 420), _size, "zero-padded canvas, N or HxW"),
    "geometry.subview_size": ((240, 240), _size, "sub-view window, N or HxW"),
    "geometry.patch_size": (48, int, "patch edge P"),
    "geometry.stride": (24, int, "patch stride S (central-crop stitching needs S = P/2)"),
    "geometry.scale_factor": (10.0, float, "divisor relative to the full-scale instrument (metadata)"),
    "basis.rank": (3, int, "number of low-rank PSF components per lens"),
    "basis.kernel_size": (9, int, "odd kernel support"),
    "basis.vignetting": (0.7, float, "edge falloff strength of the coefficient maps"),
    "basis.seed": (0, int, "seed for the synthetic PSF bases"),
    "noise.gain": (1000.0, float, "photons per count g"),
    "noise.read_sigma": (0.01, float, "Gaussian read noise sigma"),
    "noise.seed": (0, int, "noise seed"),
    "data.num_images": (1, int, "synthetic source images (cells and particles, alternating)"),
    "data.phantoms": (0, int, "extra particle phantoms"),
    "data.phantom_density": (3e-3, float, "emitters per pixel in particle phantoms"),
    "data.seed": (0, int, "seed for source image synthesis"),
    "data.precision": ("single", _choice("single", "double"), "storage precision of patch files"),
    "pe.bands": (6, int, "frequency bands per axis"),
    "pe.include_raw": (True, _bool, "prepend raw (u, v)"),
    "pe.indexing": ("standard", _choice("standard", "literal"), "band frequency indexing"),
    "model.lens_width": (4, int, "channels of the per-lens blocks"),
    "model.unet_width": (16, int, "base U-Net width"),
    "model.unet_depth": (3, int, "U-Net levels"),
    "model.mlp_hidden": (32, int, "MaskMLP hidden width"),
    "model.mlp_layers": (2, int, "MaskMLP hidden layers"),
    "model.attn_hidden": (16, int, "view attention hidden width"),
    "model.use_cg": (True, _bool, "coordinate gating on"),
    "model.use_pe": (True, _bool, "positional encoding on (raw coordinates otherwise)"),
    "model.seed": (0, int, "parameter initialisation seed"),
    "model.precision": ("double", _choice("single", "double"), "compute precision"),
    "train.epochs": (30, int, "epochs"),
    "train.batch_size": (4, int, "patches per step"),
    "train.base_lr": (1e-3, float, "initial learning rate"),
    "train.final_lr": (1e-6, float, "learning rate at the end of the cosine schedule"),
    "train.beta1": (0.9, float, "Adam beta1"),
    "train.beta2": (0.999, float, "Adam beta2"),
    "train.eps": (1e-8, float, "Adam epsilon"),
    "train.sample_fraction": (1.0 / 3.0, float, "fraction of training patches drawn per epoch"),
    "train.clip_norm": (1.0, float, "global gradient norm clip"),
    "train.val_fraction": (0.1, float, "fraction of source images held out"),
    "train.val_every": (1, int, "validate every N epochs (0 disables)"),
    "train.checkpoint_every": (0, int, "checkpoint every N epochs (0: final only)"),
    "train.alpha": (1.0, float, "SSIM term weight"),
    "train.beta": (1.0, float, "MSE term weight"),
    "train.seed": (0, int, "sampling and split seed"),
    "infer.batch": (9, int, "patches per forward pass"),
    "paths.dataset": (None, _path, "dataset directory"),
    "paths.run": (None, _path, "output directory for checkpoints, logs and reports"),
}


@dataclass
class RunConfig:
    values: Dict[str, Any] = field(default_factory=lambda: {k: v[0] for k, v in DEFAULTS.items()})
    source: str = "<defaults>"

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, raw: str, where: str = "") -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"{where}unknown key {key!r}")
        try:
            self.values[key] = DEFAULTS[key][1](raw)
        except ValueError as exc:
            raise ConfigError(f"{where}bad value for {key}: {exc}") from None

    def require(self, key: str):
        value = self.values.get(key)
        if value in (None, ""):
            raise ConfigError(f"{self.source}: missing required key {key!r}")
        return value

    def geometry(self) -> Geometry:
        v = self.values
        try:
            return Geometry(sensor_size=v["geometry.sensor_size"], pad_size=v["geometry.pad_size"],
                            subview_size=v["geometry.subview_size"], patch_size=v["geometry.patch_size"],
                            stride=v["geometry.stride"], scale_factor=v["geometry.scale_factor"])
        except ValueError as exc:
            raise ConfigError(f"{self.source}: invalid geometry: {exc}") from None

    def noise(self) -> NoiseModel:
        v = self.values
        try:
            return NoiseModel(gain=v["noise.gain"], read_sigma=v["noise.read_sigma"], seed=v["noise.seed"])
        except ValueError as exc:
            raise ConfigError(f"{self.source}: invalid noise model: {exc}") from None

    def model(self) -> ModelConfig:
        v = self.values
        try:
            pe = PEConfig(bands=v["pe.bands"], include_raw=v["pe.include_raw"], indexing=v["pe.indexing"])
            return ModelConfig(lens_width=v["model.lens_width"], unet_width=v["model.unet_width"],
                               unet_depth=v["model.unet_depth"], mlp_hidden=v["model.mlp_hidden"],
                               mlp_layers=v["model.mlp_layers"], attn_hidden=v["model.attn_hidden"], pe=pe,
                               use_cg=v["model.use_cg"], use_pe=v["model.use_pe"], seed=v["model.seed"],
                               precision=v["model.precision"])
        except ValueError as exc:
            raise ConfigError(f"{self.source}: invalid model settings: {exc}") from None

    def train(self) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(**{k[6:]: v[k] for k in DEFAULTS if k.startswith("train.")})
        except ValueError as exc:
            raise ConfigError(f"{self.source}: invalid training settings: {exc}") from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cfg = RunConfig(source=source)
    seen: Dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}: "
        if "=" not in line:
            raise ConfigError(f"{where}expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{where}duplicate key {key!r} (first set on line {seen[key]})")
        cfg.set(key, raw, where)
        seen[key] = lineno
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def format_defaults() -> str:
    """Documented default config, one commented line per key."""
    lines = []
    for key, (default, _, doc) in DEFAULTS.items():
        if isinstance(default, tuple):
            default = "x".join(str(d) for d in default)
        elif isinstance(default, bool):
            default = str(default).lower()
        elif default is None:
            default = ""
        lines.append(f"# {doc}")
        lines.append(f"{key} = {default}")
    return "\n".join(lines) + "\n"
