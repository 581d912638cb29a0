"""Pipeline configuration: one INI file with a section per stage.

Every key has a shipped default (configs/default.ini states all of them
explicitly); user files may be partial, but unknown sections or keys are
rejected so typos fail loudly instead of silently running defaults.  The
format holds no filesystem paths -- artifact locations derive from the
run's output directory -- so values are position independent.

Typed accessors hand each stage its own config object (PhantomConfig,
RegistrationConfig, ...), deriving the coupled values (regressor input dims
from the detector, output dim from the subspace size) in one place.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .errors import ConfigError
from .drr import ProjectionGeometry, default_geometry
from .phantom import PhantomConfig
from .registration import RegistrationConfig
from .regressor import RegressorConfig, TrainConfig

__all__ = [
    "PipelineConfig",
    "default_config",
    "load_config",
    "write_config",
]


def _parse_int(raw):
    return int(raw)


def _parse_float(raw):
    return float(raw)


def _parse_ints(raw):
    return tuple(int(tok) for tok in raw.split())


def _parse_floats(raw):
    return tuple(float(tok) for tok in raw.split())


def _parse_alpha(raw):
    return None if raw.strip().lower() == "auto" else float(raw)


def _fmt(value):
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return " ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fixed_len(parser, n):
    def parse(raw):
        value = parser(raw)
        if len(value) != n:
            raise ValueError(f"expected {n} values, got {len(value)}")
        return value

    return parse


# (parser, default) per key; desk-scale defaults sized so the whole pipeline
# runs on one CPU in minutes while keeping motion >> voxel size
_SCHEMA = {
    "phantom": {
        "dims": (_fixed_len(_parse_ints, 3), (64, 64, 48)),
        "spacing": (_fixed_len(_parse_floats, 3), (2.0, 2.0, 3.0)),
        "body_radii": (_fixed_len(_parse_floats, 3), (52.0, 52.0, 60.0)),
        "body_density": (_parse_float, 1.0),
        "lung_radii": (_fixed_len(_parse_floats, 3), (19.0, 23.0, 32.0)),
        "lung_offset_x": (_parse_float, 26.0),
        "lung_density": (_parse_float, 0.25),
        "tumor_radius": (_parse_float, 9.0),
        "tumor_density": (_parse_float, 0.9),
        "blend_mm": (_parse_float, 2.0),
        "window_sigma": (_fixed_len(_parse_floats, 3), (16.0, 16.0, 19.0)),
        "window_cutoff": (_parse_float, 3.5),
        "amplitude1": (_parse_float, 12.0),
        "amplitude2": (_parse_float, 4.0),
        "num_phases": (_parse_int, 10),
        "texture_amp": (_parse_float, 0.3),
        "texture_modes": (_parse_int, 10),
        "texture_wavelengths": (_fixed_len(_parse_floats, 2), (24.0, 48.0)),
        "seed": (_parse_int, 0),
    },
    "registration": {
        "penalty_weight": (_parse_float, 0.1),
        "sobolev_a": (_parse_float, 1.0),
        "sobolev_b": (_parse_float, 0.1),
        "step_size": (_parse_float, 0.05),
        "max_iters": (_parse_int, 500),
        "energy_rel_tol": (_parse_float, 1e-6),
        "multires_levels": (_parse_int, 2),
    },
    "lowrank": {
        "rank_weight_alpha": (_parse_alpha, None),  # auto = bootstrapped
    },
    "subspace": {
        "num_components": (_parse_int, 2),
    },
    "drr": {
        "source_axis_distance": (_parse_float, 1000.0),
        "source_detector_distance": (_parse_float, 1500.0),
        "det_dims": (_fixed_len(_parse_ints, 2), (128, 96)),
        "det_spacing": (_fixed_len(_parse_floats, 2), (2.4, 2.4)),
        "render_step_mm": (_parse_float, 1.0),
    },
    "dataset": {
        "n1": (_parse_int, 40),
        "n2": (_parse_int, 30),
        "scale1": (_parse_float, 1.1),
        "scale2": (_parse_float, 1.1),
        "bins": (_parse_int, 256),
    },
    "regressor": {
        "growth_rate": (_parse_int, 4),
        "layers_per_block": (_parse_int, 4),
        "num_blocks": (_parse_int, 4),
        "compression": (_parse_float, 0.5),
        "kernel_size": (_parse_int, 3),
    },
    "training": {
        "epochs": (_parse_int, 50),
        "batch_size": (_parse_int, 64),
        "lr": (_parse_float, 0.1),
        "lr_drop_factor": (_parse_float, 5.0),
        "plateau_rel_threshold": (_parse_float, 1e-4),
        "plateau_patience_epochs": (_parse_int, 20),
        "momentum": (_parse_float, 0.9),
        "holdout_fraction": (_parse_float, 0.8),
        "seed": (_parse_int, 0),
    },
    "eval": {
        "spline_samples": (_parse_int, 40),
        "batch_size": (_parse_int, 64),
        "bench_batch_sizes": (_parse_ints, (1, 8, 64)),
    },
}


@dataclass(frozen=True)
class PipelineConfig:
    """Validated values for every section, plus typed per-stage accessors."""

    values: dict

    def get(self, section: str, key: str):
        return self.values[section][key]

    def phantom_config(self, seed=None) -> PhantomConfig:
        v = dict(self.values["phantom"])
        if seed is not None:
            v["seed"] = int(seed)
        try:
            return PhantomConfig(**v)
        except ValueError as exc:
            raise ConfigError(f"[phantom] {exc}") from exc

    def registration_config(self) -> RegistrationConfig:
        v = dict(self.values["registration"])
        v["rank_weight_alpha"] = self.values["lowrank"]["rank_weight_alpha"]
        try:
            return RegistrationConfig(**v)
        except ValueError as exc:
            raise ConfigError(f"[registration] {exc}") from exc

    def projection_geometry(self, vol_geometry) -> ProjectionGeometry:
        d = self.values["drr"]
        try:
            return default_geometry(
                vol_geometry,
                source_axis_distance=d["source_axis_distance"],
                source_detector_distance=d["source_detector_distance"],
                det_dims=d["det_dims"],
                det_spacing=d["det_spacing"],
            )
        except ValueError as exc:
            raise ConfigError(f"[drr] {exc}") from exc

    def regressor_config(self, input_dims, output_dim) -> RegressorConfig:
        v = dict(self.values["regressor"])
        try:
            return RegressorConfig(input_dims=tuple(input_dims),
                                   output_dim=int(output_dim), **v)
        except ValueError as exc:
            raise ConfigError(f"[regressor] {exc}") from exc

    def train_config(self, seed=None) -> TrainConfig:
        v = dict(self.values["training"])
        if seed is not None:
            v["seed"] = int(seed)
        try:
            return TrainConfig(**v)
        except ValueError as exc:
            raise ConfigError(f"[training] {exc}") from exc


def default_config() -> PipelineConfig:
    values = {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in _SCHEMA.items()
    }
    return PipelineConfig(values)


def load_config(path) -> PipelineConfig:
    """Parse and validate an INI file; missing keys fall back to defaults."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r") as fh:
            parser.read_file(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    values = {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in _SCHEMA.items()
    }
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key '{key}' in [{section}]")
            parse, _ = _SCHEMA[section][key]
            try:
                values[section][key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"{path}: bad value for [{section}] {key}: {raw!r} ({exc})"
                ) from exc
    return PipelineConfig(values)


def write_config(cfg: PipelineConfig, path) -> None:
    """Serialize every key explicitly, in schema order (deterministic)."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_fmt(cfg.values[section][key])}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
