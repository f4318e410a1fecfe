import configparser
import enum
from typing import Annotated, Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator

from .search_space import PRESETS


class ConfigError(ValueError):
    """Configuration could not be parsed or validated; ``key`` names the culprit."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


def _csv(value):
    if isinstance(value, str):
        return tuple(item.strip() for item in value.split(",") if item.strip())
    return value


def _triples(value):
    if isinstance(value, str):
        return tuple(_csv(group) for group in value.split(";") if group.strip())
    return value


IntList = Annotated[Tuple[int, ...], BeforeValidator(_csv)]
DropoutTriples = Annotated[Tuple[Tuple[float, ...], ...], BeforeValidator(_triples)]


class DropoutSchedule(str, enum.Enum):
    LINEAR = "linear"
    CONSTANT = "constant"


class DropoutCells(str, enum.Enum):
    BOTH = "both"
    CAUSAL = "causal"
    REDUCTION = "reduction"


class DeltaMode(str, enum.Enum):
    CAUSAL = "causal"
    SYMMETRIC = "symmetric"


class DataSource(str, enum.Enum):
    SYNTHETIC = "synthetic"
    PATH = "path"


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class StageConfig(_Section):
    """One progressive search stage."""
    depth: int
    ops_kept: int
    warmup_epochs: int = 6
    joint_epochs: int = 9
    batch_size: int = 16
    dropout: float = 0.0

    @field_validator('depth')
    @classmethod
    def depth_fits_two_reductions(cls, v):
        if v < 3:
            raise ValueError('Super-network depth must be at least 3')
        return v

    @field_validator('warmup_epochs', 'joint_epochs')
    @classmethod
    def epochs_non_negative(cls, v):
        if v < 0:
            raise ValueError('Epoch counts cannot be negative')
        return v

    @field_validator('batch_size', 'ops_kept')
    @classmethod
    def positive(cls, v):
        if v < 1:
            raise ValueError('Must be positive')
        return v

    @field_validator('dropout')
    @classmethod
    def dropout_probability(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError('Dropout must be in [0, 1)')
        return v

    @property
    def epochs(self) -> int:
        return self.warmup_epochs + self.joint_epochs


class SearchConfig(_Section):
    space: str = "low_latency"
    channels: int = 8
    seeds: IntList = (1, 2, 3)
    dropout_settings: DropoutTriples = ((0.0, 0.0, 0.0), (0.0, 0.05, 0.10), (0.0, 0.10, 0.20))
    dropout_schedule: DropoutSchedule = DropoutSchedule.LINEAR
    dropout_cells: DropoutCells = DropoutCells.BOTH
    avg_pool_cap: int = 2
    latency_budget_ms: float = 430.0
    weight_lr: float = 0.025
    weight_lr_min: float = 0.001
    weight_momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    arch_lr: float = 3e-4
    arch_weight_decay: float = 1e-3
    second_order: bool = False

    @field_validator('space')
    @classmethod
    def known_space(cls, v):
        if v not in PRESETS:
            raise ValueError(f'Unknown space {v!r}; expected one of {sorted(PRESETS)}')
        return v

    @field_validator('second_order')
    @classmethod
    def first_order_only(cls, v):
        if v:
            raise ValueError('Only the first-order approximation is implemented')
        return v

    @field_validator('seeds')
    @classmethod
    def seeds_present(cls, v):
        if not v:
            raise ValueError('At least one seed is required')
        return v

    @field_validator('dropout_settings')
    @classmethod
    def dropout_in_range(cls, v):
        for triple in v:
            if any(not 0.0 <= p < 1.0 for p in triple):
                raise ValueError('Dropout values must be in [0, 1)')
        return v


class SyntheticTaskConfig(_Section):
    """Desk-scale streaming task: label at t is a quantized window statistic over [t-W, t+F]."""
    classes: int = 8
    past_window: int = 4
    future_window: int = 0
    utterances: int = 1000
    min_frames: int = 128
    max_frames: int = 128
    freq_bins: int = 40
    smoothing: int = 6
    noise: float = 0.1
    seed: int = 0

    @field_validator('past_window', 'future_window')
    @classmethod
    def window_non_negative(cls, v):
        if v < 0:
            raise ValueError('Windows cannot be negative')
        return v

    @field_validator('classes')
    @classmethod
    def at_least_two(cls, v):
        if v < 2:
            raise ValueError('At least 2 classes are required')
        return v

    @model_validator(mode='after')
    def lengths_consistent(self):
        if self.min_frames < 4 or self.max_frames < self.min_frames:
            raise ValueError('Need 4 <= min_frames <= max_frames')
        if self.utterances < 1:
            raise ValueError('utterances must be positive')
        return self


class DataConfig(_Section):
    source: DataSource = DataSource.SYNTHETIC
    path: Optional[str] = None
    holdout: float = 0.1
    delta_mode: DeltaMode = DeltaMode.CAUSAL
    max_length: int = 1024
    split_seed: int = 0
    synthetic: SyntheticTaskConfig = Field(default_factory=SyntheticTaskConfig)

    @model_validator(mode='after')
    def path_when_needed(self):
        if self.source == DataSource.PATH and not self.path:
            raise ValueError('data.path is required when data.source = path')
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError('holdout must be in [0, 1)')
        return self

    @property
    def classes(self) -> int:
        return self.synthetic.classes


class NetworkConfig(_Section):
    cells: int = 8
    channels: int = 12
    hidden: IntList = (128, 128)
    causal_stem: bool = False
    frame_period_ms: float = 10.0


class TrainConfig(_Section):
    epochs: int = 15
    batch_size: int = 16
    lr: float = 0.025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    seed: int = 0
    baseline_window: int = 8


class VerifyConfig(_Section):
    trials: int = 5
    margin_frames: int = 8
    tolerance: float = 0.0
    double_precision: bool = True
    seed: int = 0


DEFAULT_STAGES = (
    StageConfig(depth=4, ops_kept=8),
    StageConfig(depth=6, ops_kept=5),
    StageConfig(depth=8, ops_kept=3),
)


class ToolkitConfig(_Section):
    """Fully resolved configuration for every command."""
    search: SearchConfig = Field(default_factory=SearchConfig)
    stages: Tuple[StageConfig, ...] = DEFAULT_STAGES
    data: DataConfig = Field(default_factory=DataConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)

    @model_validator(mode='after')
    def stages_progressive(self):
        depths = [s.depth for s in self.stages]
        kept = [s.ops_kept for s in self.stages]
        if any(b <= a for a, b in zip(depths, depths[1:])):
            raise ValueError('stage depths must be strictly increasing')
        if any(b >= a for a, b in zip(kept, kept[1:])):
            raise ValueError('stage ops_kept must be strictly decreasing')
        n_ops = len(PRESETS[self.search.space].operations)
        if kept and kept[0] != n_ops:
            raise ValueError(f'stage 1 must search all {n_ops} ops of {self.search.space}, '
                             f'got ops_kept = {kept[0]}')
        if kept and kept[-1] < 2:
            raise ValueError('the final stage must keep at least 2 ops per edge')
        for triple in self.search.dropout_settings:
            if len(triple) != len(self.stages):
                raise ValueError('each dropout setting needs one value per stage')
        return self

    def stages_for(self, setting: Tuple[float, ...]) -> List[StageConfig]:
        """Stage list with the dropout of one configured setting filled in."""
        return [s.model_copy(update={"dropout": p}) for s, p in zip(self.stages, setting)]


# -- INI text <-> ToolkitConfig -------------------------------------------------

_SECTIONS = ("search", "data", "data.synthetic", "network", "train", "verify")


def _render(value: Any) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(_render(v) for v in value)
        return ", ".join(_render(v) for v in value)
    if value is None:
        return ""
    return str(value)


def dump_config(cfg: ToolkitConfig) -> str:
    """Render ``cfg`` as INI text that ``parse_config`` reads back unchanged."""
    parser = configparser.ConfigParser(interpolation=None)
    doc = cfg.model_dump()
    for name in ("search", "network", "train", "verify"):
        parser[name] = {k: _render(getattr(getattr(cfg, name), k)) for k in doc[name]}
    parser["data"] = {k: _render(getattr(cfg.data, k)) for k in doc["data"]
                      if k != "synthetic" and getattr(cfg.data, k) is not None}
    parser["data.synthetic"] = {k: _render(getattr(cfg.data.synthetic, k))
                                for k in doc["data"]["synthetic"]}
    for i, stage in enumerate(cfg.stages, start=1):
        parser[f"stage.{i}"] = {k: _render(v) for k, v in stage.model_dump().items()
                                if k != "dropout"}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)


def _error_key(err: ValidationError, prefix: str) -> str:
    first = err.errors()[0]
    loc = ".".join(str(p) for p in first.get("loc", ()))
    return f"{prefix}.{loc}" if loc else prefix


def parse_config(text: str, overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> ToolkitConfig:
    """Parse INI text; missing keys take defaults, unknown sections/keys are errors.

    ``overrides`` maps section -> {key: value} and wins over the text.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unreadable config: {e}") from None

    raw: Dict[str, Dict[str, Any]] = {}
    stages: Dict[int, Dict[str, Any]] = {}
    for section in parser.sections():
        values = dict(parser[section])
        if section.startswith("stage."):
            try:
                stages[int(section.split(".", 1)[1])] = values
            except ValueError:
                raise ConfigError("stage sections are named stage.1, stage.2, ...", section) from None
        elif section in _SECTIONS:
            raw[section] = values
        else:
            raise ConfigError("unknown section", section)
    for section, values in (overrides or {}).items():
        if section.startswith("stage."):
            stages.setdefault(int(section.split(".", 1)[1]), {}).update(values)
        else:
            raw.setdefault(section, {}).update(values)

    sections: Dict[str, Any] = {}
    models = {"search": SearchConfig, "network": NetworkConfig,
              "train": TrainConfig, "verify": VerifyConfig}
    for name, model in models.items():
        try:
            sections[name] = model.model_validate(raw.get(name, {}))
        except ValidationError as e:
            raise ConfigError(e.errors()[0]["msg"], _error_key(e, name)) from None
    try:
        synthetic = SyntheticTaskConfig.model_validate(raw.get("data.synthetic", {}))
        sections["data"] = DataConfig.model_validate({**raw.get("data", {}), "synthetic": synthetic})
    except ValidationError as e:
        raise ConfigError(e.errors()[0]["msg"], _error_key(e, "data")) from None

    if stages:
        if sorted(stages) != list(range(1, len(stages) + 1)):
            raise ConfigError("stage sections must be numbered 1..n without gaps", "stage")
        stage_list = []
        for i in sorted(stages):
            base = DEFAULT_STAGES[i - 1].model_dump() if i <= len(DEFAULT_STAGES) else {}
            try:
                stage_list.append(StageConfig.model_validate({**base, **stages[i]}))
            except ValidationError as e:
                raise ConfigError(e.errors()[0]["msg"], _error_key(e, f"stage.{i}")) from None
        sections["stages"] = tuple(stage_list)

    try:
        return ToolkitConfig(**sections)
    except ValidationError as e:
        raise ConfigError(e.errors()[0]["msg"], "search") from None


def load_config(path: Optional[str] = None,
                overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> ToolkitConfig:
    if path is None:
        return parse_config("", overrides)
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", str(path)) from None
    return parse_config(text, overrides)
