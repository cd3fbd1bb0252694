'''
Pipeline configuration.

A config file is flat UTF-8 text with one ``section.key = value`` per line;
'#' starts a comment. Tuples are comma separated, ``group.beta`` also takes
``2pi/N`` and backbone layers are written ``subm:3:16, spconv:3:2:32``
(``mode:kernel[:stride]:c_out``).
'''
import dataclasses
import logging
import math
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from eqvx.augment import AugParams, LidarModel
from eqvx.exceptions import ConfigError, InvalidArgumentError
from eqvx.tespconv import DEFAULT_LAYERS, LayerSpec
from eqvx.tivoxel import VsaConfig
from eqvx.utils import sha256_bytes
from eqvx.voxelizer import grid_shape

logger = logging.getLogger(__name__)

PRECISIONS = ('verify', 'fast')


@dataclasses.dataclass(frozen=True)
class GroupConfig:
    'N rotations at resolution beta (2pi/N when None), optionally with reflections.'
    n_rotations: int = 3
    beta: Optional[float] = None
    include_reflection: bool = True


@dataclasses.dataclass(frozen=True)
class VoxelConfig:
    size: Tuple[float, float, float] = (0.05, 0.05, 0.1)
    # symmetric in x/y with 401 cells per axis, so two stride-2 layers keep the lattice centred
    range: Tuple[float, float, float, float, float, float] = (-10.025, -10.025, -2.0, 10.025, 10.025, 1.2)


@dataclasses.dataclass(frozen=True)
class BackboneConfig:
    layers: Tuple[LayerSpec, ...] = DEFAULT_LAYERS


@dataclasses.dataclass(frozen=True)
class TebevConfig:
    aggregate: str = 'max'


@dataclasses.dataclass(frozen=True)
class AttentionConfig:
    channels: int = 32


@dataclasses.dataclass(frozen=True)
class CheckConfig:
    '''
    Pass thresholds of the equivariance report. "lattice" thresholds apply
    to actions mapping the voxel lattice onto itself, "interp" ones to the
    rest.
    '''
    permutation_tolerance: float = 1e-6
    bev_lattice_tolerance: float = 1e-9
    bev_interp_tolerance: float = 0.5
    tivoxel_lattice_tolerance: float = 1e-6
    tivoxel_interp_tolerance: float = 1e-6
    interior_margin: float = 2.0


@dataclasses.dataclass(frozen=True)
class MemoryConfig:
    max_instance_values: int = 1 << 16


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    'EQVX weight files to load instead of seeding; empty means seeded.'
    backbone_weights: str = ''
    tivoxel_weights: str = ''


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    precision: str = 'verify'


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    group: GroupConfig = dataclasses.field(default_factory=GroupConfig)
    voxel: VoxelConfig = dataclasses.field(default_factory=VoxelConfig)
    backbone: BackboneConfig = dataclasses.field(default_factory=BackboneConfig)
    tebev: TebevConfig = dataclasses.field(default_factory=TebevConfig)
    vsa: VsaConfig = dataclasses.field(default_factory=VsaConfig)
    attention: AttentionConfig = dataclasses.field(default_factory=AttentionConfig)
    aug: AugParams = dataclasses.field(default_factory=AugParams)
    lidar: LidarModel = dataclasses.field(default_factory=LidarModel)
    check: CheckConfig = dataclasses.field(default_factory=CheckConfig)
    memory: MemoryConfig = dataclasses.field(default_factory=MemoryConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    run: RunConfig = dataclasses.field(default_factory=RunConfig)

    def validate(self) -> 'PipelineConfig':
        '''
        Checks cross-field consistency.

        Raises:
            ConfigError: describing the first violated constraint.
        '''
        if self.group.n_rotations < 1:
            raise ConfigError('group.n_rotations must be at least 1')
        if self.group.beta is not None and not self.group.beta > 0:
            raise ConfigError('group.beta must be positive')
        try:
            grid_shape(self.voxel.size, self.voxel.range)
        except InvalidArgumentError as e:
            raise ConfigError(f'voxel: {e}') from e
        if not self.backbone.layers:
            raise ConfigError('backbone.layers must name at least one layer')
        if self.tebev.aggregate not in ('max', 'mean'):
            raise ConfigError(f'tebev.aggregate must be max or mean, got {self.tebev.aggregate!r}')
        if self.attention.channels < 1:
            raise ConfigError('attention.channels must be positive')
        values = self.vsa.num_grid_points * self.attention.channels
        if values > self.memory.max_instance_values:
            raise ConfigError(
                f'J*C = {values} exceeds memory.max_instance_values = {self.memory.max_instance_values}'
            )
        if self.run.precision not in PRECISIONS:
            raise ConfigError(f'run.precision must be one of {PRECISIONS}, got {self.run.precision!r}')
        if self.run.threads < 1:
            raise ConfigError('run.threads must be positive')
        return self

    def to_lines(self) -> List[str]:
        'Canonical ``key = value`` lines, one per setting, in a fixed order.'
        lines = []
        for section in dataclasses.fields(self):
            value = getattr(self, section.name)
            for field in dataclasses.fields(value):
                lines.append(f'{section.name}.{field.name} = {_format(getattr(value, field.name))}')
        return lines

    def sha256(self) -> str:
        return sha256_bytes(('\n'.join(self.to_lines()) + '\n').encode('utf-8'))

    def override(self, **values) -> 'PipelineConfig':
        '''
        Returns a copy with dotted keys replaced, e.g.
        ``config.override(**{'run.seed': 3})``. Values are parsed from
        strings when given as strings.
        '''
        return _apply(self, values.items())


def _format(value: Any) -> str:
    if value is None:
        return '2pi/N'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ', '.join(_format(v) if not isinstance(v, LayerSpec) else str(v) for v in value)
    return str(value)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ('true', 'yes', '1'):
        return True
    if lowered in ('false', 'no', '0'):
        return False
    raise ValueError(f'not a boolean: {text!r}')


def _parse_beta(text: str) -> Optional[float]:
    if text.strip().lower() in ('2pi/n', 'none', ''):
        return None
    return float(text)


def _split(text: str) -> List[str]:
    return [part.strip() for part in text.split(',') if part.strip()]


def _parse_layer(text: str) -> LayerSpec:
    parts = text.split(':')
    mode = parts[0].strip()
    numbers = [int(p) for p in parts[1:]]
    if mode == 'subm' and len(numbers) == 2:
        return LayerSpec('subm', numbers[0], numbers[1])
    if mode == 'spconv' and len(numbers) in (2, 3):
        stride = numbers[1] if len(numbers) == 3 else 1
        return LayerSpec('spconv', numbers[0], numbers[-1], stride=stride)
    raise ValueError(f'bad layer {text!r}; expected subm:k:c_out or spconv:k[:stride]:c_out')


def _parser_for(default: Any, key: str) -> Callable[[str], Any]:
    if key == 'group.beta':
        return _parse_beta
    if key == 'backbone.layers':
        return lambda text: tuple(_parse_layer(p) for p in _split(text))
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        element = int if default and isinstance(default[0], int) else float
        return lambda text: tuple(element(p) for p in _split(text))
    return str


def _apply(config: PipelineConfig, items: Iterable[Tuple[str, Any]],
           source: str='<override>') -> PipelineConfig:
    sections: Dict[str, Dict[str, Any]] = {}
    for key, raw in items:
        section_name, dot, field_name = key.partition('.')
        section = getattr(config, section_name, None) if dot else None
        if section is None or not dataclasses.is_dataclass(section) or \
                field_name not in {f.name for f in dataclasses.fields(section)}:
            raise ConfigError(f'{source}: unknown key {key!r}')
        default = getattr(section, field_name)
        try:
            value = _parser_for(default, key)(raw) if isinstance(raw, str) else raw
        except ValueError as e:
            raise ConfigError(f'{source}: bad value for {key}: {e}') from e
        sections.setdefault(section_name, {})[field_name] = value

    replaced = {}
    for section_name, values in sections.items():
        try:
            replaced[section_name] = dataclasses.replace(getattr(config, section_name), **values)
        except (InvalidArgumentError, TypeError, ValueError) as e:
            raise ConfigError(f'{source}: invalid {section_name} settings: {e}') from e
    return dataclasses.replace(config, **replaced)


def parse_config(text: str, source: str='<string>') -> PipelineConfig:
    '''
    Parses config text on top of the defaults and validates the result.

    Raises:
        ConfigError: for malformed lines, unknown keys, bad values or
            inconsistent settings.
    '''
    items = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split('#', 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition('=')
        if not sep:
            raise ConfigError(f'{source}: line {line_number}: expected "key = value"')
        items.append((key.strip(), value.strip()))
    return _apply(PipelineConfig(), items, source).validate()


def load_config(path: Optional[str]=None) -> PipelineConfig:
    'Reads a config file, or returns the validated defaults when ``path`` is None.'
    if path is None:
        return PipelineConfig().validate()
    with open(path, encoding='utf-8') as f:
        config = parse_config(f.read(), source=str(path))
    logger.info('loaded config %s (sha256 %s)', path, config.sha256()[:12])
    return config


def resolved_beta(config: PipelineConfig) -> float:
    group = config.group
    return group.beta if group.beta is not None else 2 * math.pi / group.n_rotations
