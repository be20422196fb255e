from __future__ import annotations

import os
import json
import hashlib
from pathlib import Path
from fractions import Fraction
from functools import partial
from dataclasses import dataclass, field, fields, replace, asdict

from metastasis_ewc_pytorch.archnet import NetConfig
from metastasis_ewc_pytorch.augment import AugConfig, MIRRORS, ROTATIONS, RANGE_LIMITS, within
from metastasis_ewc_pytorch.trainer import TrainConfig
from metastasis_ewc_pytorch.synthwsi import SynthConfig
from metastasis_ewc_pytorch.errors import ConfigError

DATA_ROOT_ENV = 'METASTASIS_DATA_ROOT'

TRUE_WORDS = {'1', 'true', 'yes', 'on'}
FALSE_WORDS = {'0', 'false', 'no', 'off'}

# functions

def exists(v):
    return v is not None

def default_data_root():
    return Path(os.environ.get(DATA_ROOT_ENV, './data'))

def parse_bool(text):
    lowered = text.lower()

    if lowered in TRUE_WORDS:
        return True
    if lowered in FALSE_WORDS:
        return False

    raise ValueError(f'expected a boolean, got {text!r}')

def parse_fraction(text):
    # accepts 0.25 as well as 1/4

    return float(Fraction(text.strip()))

def parse_range(text, limits):
    # `low,high`, or `off` to disable the step

    if text.strip().lower() in FALSE_WORDS | {'none'}:
        return None

    low, high = (parse_fraction(part) for part in text.split(','))

    if not within((low, high), limits):
        raise ValueError(f'range {low},{high} must lie within {limits[0]},{limits[1]}')

    return (low, high)

def format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if not exists(value):
        return 'off'
    if isinstance(value, tuple):
        return ','.join(repr(float(part)) for part in value)

    return str(value)

# experiment config

@dataclass(frozen = True)
class ExperimentConfig:
    name: str = 'default'
    seed: int = 0
    threads: int = 1
    data_root: Path = field(default_factory = default_data_root)
    runs_root: Path = Path('./runs')

    # synthetic slides

    slide_size: int = 2048
    spacing: float = 0.5
    itc_max_um: float = 50.
    micro_max_um: float = 500.
    slide_fraction: float = 0.05
    c_multiplier: float = 1.
    hn_multiplier: float = 1.

    # network and training

    filter_scale: float = 1.
    patch_size: int = 279
    batch_size: int = 32
    epoch_size: int = 262144
    val_epoch_size: int = 262144
    max_epochs: int = 200
    learning_rate: float = 1e-4
    l2: float = 1e-4
    augment: bool = True

    # augmentation steps, each a `low,high` range within its widest limit or off

    aug_mirror: bool = True
    aug_rotation: bool = True
    aug_scale: tuple[float, float] | None = RANGE_LIMITS['scale']
    aug_hue: tuple[float, float] | None = RANGE_LIMITS['hue']
    aug_saturation: tuple[float, float] | None = RANGE_LIMITS['saturation']
    aug_brightness: tuple[float, float] | None = RANGE_LIMITS['brightness']
    aug_contrast: tuple[float, float] | None = RANGE_LIMITS['contrast']
    aug_noise: tuple[float, float] | None = RANGE_LIMITS['noise']
    aug_blur: tuple[float, float] | None = RANGE_LIMITS['blur']

    # continual learning

    plan: str = 'specialized1'
    plans: str = 'all'
    phi: float = 0.01
    fisher_patches: int = 0
    empirical_fisher: bool = False

    # inference and post-processing

    shifts: str = 'stride'
    tta: bool = False
    nms_radius_um: float = 150.
    nms_stop: float = 0.5
    feature_threshold: float = 0.5
    trees: int = 100
    bootstrap_samples: int = 10000
    progress: bool = False

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError('threads must be at least 1')

        if self.phi < 0.:
            raise ConfigError('phi must be non-negative')

        for step, limits in RANGE_LIMITS.items():
            value = getattr(self, f'aug_{step}')

            if exists(value) and not within(tuple(value), limits):
                raise ConfigError(f'aug_{step} range {value} must lie within {limits}')

    def with_overrides(self, **overrides):
        unknown = set(overrides) - {f.name for f in fields(self)}

        if unknown:
            raise ConfigError(f'unknown config keys {sorted(unknown)}')

        converted = dict()

        for key, value in overrides.items():
            try:
                converted[key] = convert_value(key, value)
            except (ValueError, ZeroDivisionError) as err:
                raise ConfigError(f'bad value for {key}: {err}') from err

        return replace(self, **converted)

    def aug_config(self):
        if not self.augment:
            return None

        return AugConfig(
            mirror = MIRRORS if self.aug_mirror else None,
            rotation = ROTATIONS if self.aug_rotation else None,
            **{step: getattr(self, f'aug_{step}') for step in RANGE_LIMITS}
        )

    def net_config(self):
        return NetConfig(input_size = self.patch_size, filter_scale = self.filter_scale)

    def synth_config(self):
        return SynthConfig(
            slide_size = self.slide_size,
            spacing = self.spacing,
            itc_max_um = self.itc_max_um,
            micro_max_um = self.micro_max_um,
            slide_fraction = self.slide_fraction,
            task_multipliers = (('B', 1.), ('C', self.c_multiplier), ('HN', self.hn_multiplier))
        )

    def train_config(self):
        return TrainConfig(
            learning_rate = self.learning_rate,
            l2 = self.l2,
            batch_size = self.batch_size,
            patch_size = self.patch_size,
            epoch_size = self.epoch_size,
            val_epoch_size = self.val_epoch_size,
            max_epochs = self.max_epochs,
            augment = self.aug_config(),
            threads = self.threads,
            progress = self.progress
        )

    @property
    def run_dir(self):
        return Path(self.runs_root) / self.name

    def to_dict(self):
        return {key: str(value) if isinstance(value, Path) else value for key, value in asdict(self).items()}

    def to_text(self):
        return ''.join(f'{f.name} = {format_value(getattr(self, f.name))}\n' for f in fields(self))

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys = True).encode('utf-8')).hexdigest()

FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}

def field_parser(name):
    kind = type(ExperimentConfig().__getattribute__(name))

    if name == 'filter_scale':
        return parse_fraction
    if name.startswith('aug_') and name[4:] in RANGE_LIMITS:
        return partial(parse_range, limits = RANGE_LIMITS[name[4:]])
    if kind is bool:
        return parse_bool
    if issubclass(kind, Path):
        return Path

    return kind

def convert_value(name, value):
    if not isinstance(value, str):
        return value

    return field_parser(name)(value)

# file format, one `key = value` per line, `#` starts a comment

def parse_config(text: str) -> dict[str, object]:
    values = dict()
    offset = 0

    for line_number, line in enumerate(text.splitlines(keepends = True), start = 1):
        line_offset = offset
        offset += len(line.encode('utf-8'))

        content = line.split('#', 1)[0].strip()

        if content == '':
            continue

        if '=' not in content:
            raise ConfigError(f'expected `key = value`, got {content!r}', line_number, line_offset)

        key, raw = (part.strip() for part in content.split('=', 1))

        if key not in FIELD_TYPES:
            raise ConfigError(f'unknown config key {key!r}', line_number, line_offset)

        try:
            values[key] = convert_value(key, raw)
        except (ValueError, ZeroDivisionError) as err:
            raise ConfigError(f'bad value for {key}: {err}', line_number, line_offset + len(line.encode('utf-8').split(b'=', 1)[0]) + 1) from err

    return values

def load_config(
    path: str | Path | None = None,
    **overrides
) -> ExperimentConfig:

    values = parse_config(Path(path).read_text()) if exists(path) else dict()
    values.update({key: value for key, value in overrides.items() if exists(value)})

    return ExperimentConfig().with_overrides(**values)
