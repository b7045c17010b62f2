"""Configuration management for MedKGRec."""

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .errors import ConfigError

NORMS = ('L1', 'L2')
PENALTY_MODES = ('partner', 'plausibility', 'distance')
# beta used when none is configured; the partner and plausibility penalties lie in [0, 1]
PENALTY_SCALES = {'partner': 3.0, 'plausibility': 5.0, 'distance': 1.0}
TASKS = ('kg_medicine', 'kg_disease', 'pm_edge', 'pd_edge')


@dataclass
class EnergyConfig:
    """Bias and norm of the translation energy z(h, r, t)."""

    bias: float = 7.0
    norm: str = 'L1'

    def validate(self) -> 'EnergyConfig':
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        return self


@dataclass
class TrainConfig:
    """Every optimization hyperparameter of the joint objective."""

    dim_entity: int = 32
    dim_relation: int = 32
    bias: float = 7.0
    norm: str = 'L1'
    learning_rate: float = 0.01
    lr_schedule: str = 'constant'
    min_lr_fraction: float = 0.0001
    negatives_kg: int = 5
    negatives_edge: int = 5
    gamma: float = 1.0
    epochs: int = 200
    batch_size: int = 64
    workers: int = 1
    seed: int = 0
    task_weights: Dict[str, float] = field(default_factory=dict)
    sigmoid_triple_negatives: bool = False
    logsigmoid_edge_negatives: bool = False
    hinge_sweep: bool = True
    max_param_magnitude: float = 1e3
    progress: bool = True

    @property
    def energy(self) -> EnergyConfig:
        return EnergyConfig(bias=self.bias, norm=self.norm)

    def validate(self) -> 'TrainConfig':
        for name in ('dim_entity', 'dim_relation', 'negatives_kg', 'negatives_edge',
                     'batch_size', 'workers'):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.lr_schedule not in ('constant', 'linear'):
            raise ConfigError(f"lr_schedule must be 'constant' or 'linear', got {self.lr_schedule!r}")
        unknown = set(self.task_weights) - set(TASKS)
        if unknown:
            raise ConfigError(f"unknown task weights: {sorted(unknown)}")
        if any(w < 0 for w in self.task_weights.values()):
            raise ConfigError("task weights must be >= 0")
        self.energy.validate()
        return self


@dataclass
class RecommendConfig:
    """Scoring and query options of the recommender."""

    k: int = 3
    # None means: the default scale of the penalty mode (PENALTY_SCALES)
    beta: Optional[float] = None
    penalty_projection: bool = False
    penalty_mode: str = 'partner'
    recent_first: bool = False
    per_diagnosis: bool = False
    interaction_relations: List[str] = field(default_factory=lambda: ['interacts_with'])
    # None means: use the norm and bias the embeddings were trained with
    norm: Optional[str] = None
    bias: Optional[float] = None

    def validate(self) -> 'RecommendConfig':
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.penalty_mode not in PENALTY_MODES:
            raise ConfigError(f"penalty_mode must be one of {PENALTY_MODES}, got {self.penalty_mode!r}")
        if self.beta is not None and self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.norm is not None and self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.interaction_relations:
            raise ConfigError("interaction_relations must name at least one relation")
        return self

    @property
    def penalty_scale(self) -> float:
        return PENALTY_SCALES[self.penalty_mode] if self.beta is None else float(self.beta)

    def energy(self, trained: EnergyConfig) -> EnergyConfig:
        """Energy settings for penalties, falling back to the trained ones."""
        return EnergyConfig(
            bias=trained.bias if self.bias is None else self.bias,
            norm=trained.norm if self.norm is None else self.norm,
        ).validate()


@dataclass
class EvalConfig:
    """Evaluation protocol options."""

    hits_n: int = 10
    k: int = 3
    baseline_k: int = 3
    split: str = 'test'
    distance_beta: Optional[float] = None
    plausibility_beta: Optional[float] = None
    filter_known: bool = True
    significance_levels: List[float] = field(default_factory=lambda: [0.01, 0.05, 0.10])

    def validate(self) -> 'EvalConfig':
        if self.hits_n < 1 or self.k < 1 or self.baseline_k < 1:
            raise ConfigError("hits_n, k and baseline_k must be >= 1")
        if self.split not in ('valid', 'test'):
            raise ConfigError(f"split must be 'valid' or 'test', got {self.split!r}")
        return self


@dataclass
class SplitConfig:
    """Edge split ratios and seed."""

    train: float = 0.7
    valid: float = 0.1
    test: float = 0.2
    seed: int = 42

    @property
    def ratios(self) -> Tuple[float, float, float]:
        return (self.train, self.valid, self.test)


SECTION_TYPES = {
    'training': TrainConfig,
    'recommendation': RecommendConfig,
    'evaluation': EvalConfig,
    'split': SplitConfig,
}


class Config:
    """Configuration manager for MedKGRec."""

    def __init__(self, config_path: str = None):
        """
        Initialize configuration.

        Args:
            config_path: Path to an override file (YAML or flat key = value).
                The project defaults in config.yaml are always loaded first.
        """
        self.project_root = Path(__file__).parent.parent
        self.defaults_path = self.project_root / "config.yaml"
        self.config = self._load_yaml(self.defaults_path) if self.defaults_path.exists() else {}

        self.config_path = Path(config_path) if config_path else None
        if self.config_path is not None:
            self.merge(self._load_override(self.config_path))

    def _load_yaml(self, path: Path) -> Dict[str, Any]:
        """Load a YAML mapping."""
        try:
            with open(path, 'r') as f:
                loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML in {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"Configuration file {path} must contain a mapping")
        return loaded

    def _load_override(self, path: Path) -> Dict[str, Any]:
        """Load an override file, YAML or flat ``key = value``."""
        if not path.exists():
            raise ConfigError(f"Configuration file not found: {path}")
        if path.suffix in ('.yaml', '.yml'):
            return self._load_yaml(path)
        return self.parse_flat(path.read_text(encoding='utf-8'))

    def parse_flat(self, text: str) -> Dict[str, Any]:
        """
        Parse flat ``key = value`` lines into a nested mapping.

        Args:
            text: File contents; ``#`` lines and blank lines are ignored

        Returns:
            Nested mapping keyed by section
        """
        nested: Dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split('=', 1))
            section, name = self.resolve_key(key)
            try:
                parsed = yaml.safe_load(value) if value else None
            except yaml.YAMLError as e:
                raise ConfigError(f"line {lineno}: cannot parse value {value!r}") from e
            nested.setdefault(section, {})[name] = parsed
        return nested

    def resolve_key(self, key: str) -> Tuple[str, str]:
        """
        Resolve a flat key to (section, field).

        Args:
            key: Dotted ('training.gamma') or bare ('gamma') key

        Returns:
            Tuple of (section, field)
        """
        if '.' in key:
            section, name = key.split('.', 1)
            if section not in self.config and section not in SECTION_TYPES:
                raise ConfigError(f"unknown configuration section: {section!r}")
            return section, name

        owners = [section for section, cls in SECTION_TYPES.items()
                  if key in {f.name for f in fields(cls)}]
        owners += [section for section, values in self.config.items()
                   if section not in SECTION_TYPES and isinstance(values, dict) and key in values]
        if not owners:
            raise ConfigError(f"unknown configuration key: {key!r}")
        if len(owners) > 1:
            raise ConfigError(f"ambiguous key {key!r} (in {owners}); use section.{key}")
        return owners[0], key

    def merge(self, overrides: Dict[str, Any]):
        """Deep-merge overrides into the loaded configuration."""
        def _merge(base: Dict[str, Any], update: Dict[str, Any]):
            for key, value in update.items():
                if isinstance(value, dict) and isinstance(base.get(key), dict):
                    _merge(base[key], value)
                else:
                    base[key] = copy.deepcopy(value)
        _merge(self.config, overrides)

    def set(self, key: str, value: Any):
        """Set a value by dotted or bare key (used for CLI flag overrides)."""
        if value is None:
            return
        section, name = self.resolve_key(key)
        self.config.setdefault(section, {})[name] = value

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value using dot notation.

        Args:
            key: Configuration key (e.g., 'training.learning_rate')
            default: Default value if key not found

        Returns:
            Configuration value
        """
        keys = key.split('.')
        value = self.config

        for k in keys:
            if isinstance(value, dict):
                value = value.get(k)
                if value is None:
                    return default
            else:
                return default

        return value

    def section(self, name: str) -> Dict[str, Any]:
        """Copy of one configuration section."""
        return copy.deepcopy(self.config.get(name) or {})

    def _build(self, section: str):
        cls = SECTION_TYPES[section]
        known = {f.name for f in fields(cls)}
        values = self.section(section)
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
        try:
            return cls(**values).validate() if hasattr(cls, 'validate') else cls(**values)
        except TypeError as e:
            raise ConfigError(f"invalid section {section!r}: {e}") from e

    def train_config(self) -> TrainConfig:
        return self._build('training')

    def recommend_config(self) -> RecommendConfig:
        return self._build('recommendation')

    def eval_config(self) -> EvalConfig:
        return self._build('evaluation')

    def split_config(self) -> SplitConfig:
        return self._build('split')

    @property
    def log_level(self) -> str:
        return str(self.get('logging.level', 'INFO')).upper()

    def snapshot(self) -> Dict[str, Any]:
        """Plain-dict copy of the effective configuration."""
        return copy.deepcopy(self.config)


# Global config instance
_config = None


def get_config(config_path: str = None) -> Config:
    """
    Get global configuration instance.

    Args:
        config_path: Path to override file (only used on first call)

    Returns:
        Config instance
    """
    global _config
    if _config is None:
        _config = Config(config_path)
    return _config


def reset_config():
    """Drop the global instance so the next get_config() reloads."""
    global _config
    _config = None
