"""Experiment configuration: dataclasses plus INI round-trip.

The config file is flat key-value text with sections; every default is
overridable and the harness echoes the full effective config into the
output directory of each run.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .cloud import CloudConfig
from .camera import PinholeCamera
from .ekf import EkfConfig
from .errors import ConfigError
from .netsim import ChannelConfig
from .vio import VioConfig
from .world import NoiseConfig, WorldConfig


@dataclass(frozen=True)
class CameraSetup:
    fx: float = 460.0
    fy: float = 460.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    min_depth: float = 0.05
    offset_x: float = 0.05  # body-frame lever arm of the camera
    offset_y: float = 0.0
    offset_z: float = 0.02

    def camera(self) -> PinholeCamera:
        return PinholeCamera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.min_depth)

    def offset(self) -> np.ndarray:
        return np.array([self.offset_x, self.offset_y, self.offset_z])


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    camera: CameraSetup = field(default_factory=CameraSetup)
    vio: VioConfig = field(default_factory=VioConfig)
    cloud: CloudConfig = field(default_factory=CloudConfig)
    ekf: EkfConfig = field(default_factory=EkfConfig)
    up: ChannelConfig = field(default_factory=lambda: ChannelConfig(seed=101))
    down: ChannelConfig = field(default_factory=lambda: ChannelConfig(seed=202))
    anchor_error_trans: float = 0.0  # initial T^W_O guess error, m
    anchor_error_rot_deg: float = 0.0
    anchor_error_seed: int = 11
    imu_seed: int = 1001
    frame_seed: int = 2002
    robot_id: int = 1

    def validate(self) -> None:
        self.world.validate()
        self.up.validate()
        self.down.validate()
        if self.vio.window_size < 2:
            raise ConfigError("vio.window_size must be >= 2")
        if self.cloud.window_size < self.vio.window_size:
            raise ConfigError("cloud.window_size must be >= vio.window_size")

    def shifted_seeds(self, offset: int) -> "ExperimentConfig":
        """Derive an independent replicate: every seed shifted by offset."""
        return replace(
            self,
            world=replace(self.world, seed=self.world.seed + offset),
            up=replace(self.up, seed=self.up.seed + offset),
            down=replace(self.down, seed=self.down.seed + offset),
            anchor_error_seed=self.anchor_error_seed + offset,
            imu_seed=self.imu_seed + offset,
            frame_seed=self.frame_seed + offset,
        )


_RUN_KEYS = [
    "anchor_error_trans",
    "anchor_error_rot_deg",
    "anchor_error_seed",
    "imu_seed",
    "frame_seed",
    "robot_id",
]


def _coerce(kind, raw: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"bad boolean {raw!r}")
    return kind(raw)


def _apply_section(obj, parser, section: str):
    if not parser.has_section(section):
        return obj
    valid = {f.name for f in fields(obj)}
    updates = {}
    for key, raw in parser.items(section):
        if key not in valid:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        updates[key] = _coerce(type(getattr(obj, key)), raw)
    return replace(obj, **updates) if updates else obj


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path} not found")
    return config_from_parser(parser)


def config_from_parser(parser: configparser.ConfigParser) -> ExperimentConfig:
    cfg = ExperimentConfig()
    noise = _apply_section(cfg.world.noise, parser, "noise")
    world = _apply_section(cfg.world, parser, "world")
    world = replace(world, noise=noise)
    camera = _apply_section(cfg.camera, parser, "camera")
    vio = _apply_section(cfg.vio, parser, "vio")
    cloud = _apply_section(cfg.cloud, parser, "cloud")
    ekf = _apply_section(cfg.ekf, parser, "ekf")
    up = _apply_section(cfg.up, parser, "network.up")
    down = _apply_section(cfg.down, parser, "network.down")
    cfg = ExperimentConfig(world=world, camera=camera, vio=vio, cloud=cloud, ekf=ekf, up=up, down=down)
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown key {key!r} in [run]")
            setattr(cfg, key, _coerce(type(getattr(cfg, key)), raw))
    cfg.validate()
    return cfg


def _format(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_parser(cfg: ExperimentConfig) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    mapping = [
        ("world", cfg.world, ("noise",)),
        ("noise", cfg.world.noise, ()),
        ("camera", cfg.camera, ()),
        ("vio", cfg.vio, ()),
        ("cloud", cfg.cloud, ()),
        ("ekf", cfg.ekf, ()),
        ("network.up", cfg.up, ()),
        ("network.down", cfg.down, ()),
    ]
    for section, obj, skip in mapping:
        parser[section] = {
            f.name: _format(getattr(obj, f.name)) for f in fields(obj) if f.name not in skip
        }
    parser["run"] = {k: _format(getattr(cfg, k)) for k in _RUN_KEYS}
    return parser


def save_config(cfg: ExperimentConfig, path) -> None:
    parser = config_to_parser(cfg)
    with open(path, "w") as f:
        parser.write(f)
