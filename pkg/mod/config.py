"""YAML experiment configuration loaded into nested dataclasses.

Every section maps onto a dataclass from the module that owns it; unknown
keys and invalid values raise ConfigError. See CONFIG_SCHEMA.md.
"""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from mod.dynamics import DynamicsConfig, RandomizationRanges, SensorConfig
from mod.errors import ConfigError
from mod.estimator import EstimatorConfig
from mod.policies import RewardConfig, RolloutContext, SearchConfig
from mod.ravalue import RAValueConfig
from mod.safeguard import SafeguardConfig
from mod.world import WorldLayout, WorldSpec, empty_world, world_from_dict, load_world

logger = logging.getLogger(__name__)

SCENARIOS = ('randomized', 'agile_only', 'mass-shift', 'friction-shift', 'random_estimate')
SEED_LIMIT = 2 ** 64


@dataclass(frozen=True)
class EvaluationConfig:
    """Episode counts and settings of the evaluation and inspection commands."""

    episodes: int = 1000
    shift_step: int = 80
    mass_shift: Tuple[float, float] = (8.0, 0.0)
    friction_shift: Tuple[float, float] = (1.0, 0.3)
    trend_window: int = 50
    trace_episodes: int = 5
    validation_episodes: int = 10
    heatmap_masses: Tuple[float, ...] = (0.0, 4.0, 8.0, 12.0)
    heatmap_extent: float = 3.0
    heatmap_cells: int = 25
    probe_speed: float = 3.0
    lipschitz_budget: int = 3000
    lipschitz_gamma: Optional[float] = None
    lipschitz_probes: int = 64
    bound_slack: float = 1.25
    oracle_policy: str = 'agile'
    oracle_horizon: int = 160
    oracle_grid_x: Tuple[float, float, int] = (-1.0, 11.0, 61)
    oracle_grid_y: Tuple[float, float, int] = (-3.0, 3.0, 31)
    oracle_heading: float = 0.0
    oracle_speed: float = 0.0
    oracle_masses: Tuple[float, ...] = (0.0, 10.0)
    oracle_value_states: int = 200
    fusion_seeds: int = 10

    def __post_init__(self):
        if self.episodes < 1 or self.trace_episodes < 0 or self.trend_window < 3:
            raise ConfigError("episodes must be positive, trace_episodes non-negative, trend_window >= 3")
        if self.oracle_value_states < 1 or self.fusion_seeds < 1:
            raise ConfigError("oracle_value_states and fusion_seeds must be positive")
        if self.oracle_policy not in ('agile', 'goal_seeking'):
            raise ConfigError(f"Unknown oracle policy '{self.oracle_policy}'")
        if self.bound_slack < 1.0:
            raise ConfigError("bound_slack must be at least 1")


@dataclass(frozen=True)
class ExperimentConfig:
    world: Optional[WorldSpec] = None
    layout: WorldLayout = WorldLayout()
    dynamics: DynamicsConfig = DynamicsConfig()
    noise: SensorConfig = SensorConfig()
    randomization: RandomizationRanges = RandomizationRanges()
    reward: RewardConfig = RewardConfig()
    agile: SearchConfig = SearchConfig()
    recovery: SearchConfig = SearchConfig(generations=20, population=16, episodes_per_candidate=3)
    estimator: EstimatorConfig = EstimatorConfig()
    ravalue: RAValueConfig = RAValueConfig()
    safeguard: SafeguardConfig = SafeguardConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    seed: int = 0
    output_dir: str = 'runs/default'
    workers: int = 1

    def verification_world(self) -> WorldSpec:
        """The fixed world used by value iteration, oracles and heatmaps."""
        return self.world if self.world is not None else empty_world(self.layout)

    def context(self) -> RolloutContext:
        return RolloutContext(self.layout, self.dynamics, self.noise, self.randomization, self.reward,
                              self.estimator, self.seed)

    def to_dict(self) -> Dict[str, Any]:
        data = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, WorldSpec):
                data[f.name] = value.to_dict()
            elif dataclasses.is_dataclass(value):
                data[f.name] = dataclasses.asdict(value)
            else:
                data[f.name] = value
        return data

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form, excluding output location and worker count."""
        data = self.to_dict()
        data.pop('output_dir')
        data.pop('workers')
        canonical = json.dumps(data, sort_keys=True, separators=(',', ':'), default=list)
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def replace(self, **changes) -> 'ExperimentConfig':
        return dataclasses.replace(self, **changes)


SECTIONS = {
    'layout': WorldLayout,
    'dynamics': DynamicsConfig,
    'noise': SensorConfig,
    'randomization': RandomizationRanges,
    'reward': RewardConfig,
    'agile': SearchConfig,
    'recovery': SearchConfig,
    'estimator': EstimatorConfig,
    'ravalue': RAValueConfig,
    'safeguard': SafeguardConfig,
    'evaluation': EvaluationConfig,
}


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def build_section(cls, data: Optional[Dict[str, Any]], section: str, base=None):
    """Instantiate ``cls`` from a mapping, overriding ``base`` field by field."""
    if data is None:
        return base if base is not None else cls()
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}': {sorted(unknown)}")
    values = {k: _tupled(v) for k, v in data.items()}
    try:
        if base is not None:
            return dataclasses.replace(base, **values)
        return cls(**values)
    except ConfigError as e:
        raise ConfigError(f"Invalid '{section}' section: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{section}' section: {e}") from e


def config_from_dict(data: Dict[str, Any], base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Build an ExperimentConfig; ``world`` may be a mapping or a path relative to ``base_dir``.

    Raises:
        ConfigError: On unknown keys, invalid values or a missing world file
    """
    data = dict(data or {})
    allowed = set(SECTIONS) | {'world', 'seed', 'output_dir', 'workers'}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"Unknown top-level keys: {sorted(unknown)}")
    defaults = ExperimentConfig()
    kwargs: Dict[str, Any] = {}
    for name, cls in SECTIONS.items():
        kwargs[name] = build_section(cls, data.get(name), name, base=getattr(defaults, name))

    world = data.get('world')
    if isinstance(world, str):
        path = Path(world)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        kwargs['world'] = load_world(path)
    elif isinstance(world, dict):
        kwargs['world'] = world_from_dict(world)
    elif world is not None:
        raise ConfigError("'world' must be a mapping or a file path")

    try:
        kwargs['seed'] = int(data.get('seed', defaults.seed))
        kwargs['workers'] = int(data.get('workers', defaults.workers))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"seed and workers must be integers: {e}") from e
    _check_seed(kwargs['seed'])
    if kwargs['workers'] < 1:
        raise ConfigError("workers must be positive")
    kwargs['output_dir'] = str(data.get('output_dir', defaults.output_dir))
    return ExperimentConfig(**kwargs)


def _check_seed(seed: int) -> None:
    if not 0 <= seed < SEED_LIMIT:
        raise ConfigError(f"seed must be in [0, 2**64), got {seed}")


def load_config(path: Union[str, Path], seed: Optional[int] = None, output_dir: Optional[str] = None,
                workers: Optional[int] = None) -> ExperimentConfig:
    """Load a YAML config and apply command-line overrides."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse {path}: {e}") from e
    cfg = config_from_dict(data, base_dir=path.parent)
    changes = {}
    if seed is not None:
        changes['seed'] = int(seed)
        _check_seed(changes['seed'])
    if output_dir is not None:
        changes['output_dir'] = str(output_dir)
    if workers is not None:
        changes['workers'] = int(workers)
        if changes['workers'] < 1:
            raise ConfigError('workers must be positive')
    cfg = cfg.replace(**changes) if changes else cfg
    logger.info("Loaded config %s (hash %s, seed %d)", path, cfg.hash()[:12], cfg.seed)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """YAML text of the resolved config (world inlined)."""
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict(), default=list)), sort_keys=True)
