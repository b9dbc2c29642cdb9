"""Run configuration: typed sections loaded from YAML, unknown keys rejected."""

from dataclasses import asdict, dataclass, field, fields

import yaml

from .fusion import COMBINATIONS, INTERMEDIATE_COMBINATIONS
from .training import TrainConfig


class ConfigError(ValueError):
    """A configuration document that cannot be used as given."""


@dataclass
class ModelSection:
    latent_dim: int = 768
    layers: int = 4
    heads: int = 8
    ffn_width: int = None
    dropout: float = 0.1
    top_k: int = 64
    pooled_dim: int = 512
    radiology_hidden: int = 1024
    scorer_width: int = 128

    def __post_init__(self):
        if self.latent_dim % self.heads:
            raise ConfigError(f"model.latent_dim {self.latent_dim} not divisible by model.heads {self.heads}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("model.dropout must lie in [0, 1)")


@dataclass
class CVSection:
    mode: str = "plain"
    k: int = 9
    outer_k: int = 5
    inner_k: int = 5
    stratify: bool = False

    def __post_init__(self):
        if self.mode not in ("plain", "nested"):
            raise ConfigError(f"cv.mode must be plain or nested, got {self.mode!r}")
        if min(self.k, self.outer_k, self.inner_k) < 2:
            raise ConfigError("k must be ≥ 2")


@dataclass
class FusionSection:
    strategy: str = "intermediate"
    weight_agg: str = "median"
    score_agg: str = "median"
    modality_combination: str = "C+P+R(med)"
    aggregate_pooling: bool = False
    intermediate_modalities: str = "C+P+R"
    grid_intermediate: list = field(default_factory=lambda: ["C+P", "C+P+R"])

    def __post_init__(self):
        if self.strategy not in ("intermediate", "late"):
            raise ConfigError(f"fusion.strategy must be intermediate or late, got {self.strategy!r}")
        for key in ("weight_agg", "score_agg"):
            if getattr(self, key) not in ("median", "mean"):
                raise ConfigError(f"fusion.{key} must be median or mean")
        if self.modality_combination not in COMBINATIONS:
            raise ConfigError(f"fusion.modality_combination must be one of {', '.join(COMBINATIONS)}")
        for combo in [self.intermediate_modalities, *self.grid_intermediate]:
            if combo not in INTERMEDIATE_COMBINATIONS:
                raise ConfigError(f"unknown intermediate combination {combo!r}")


@dataclass
class DataSection:
    clinical: str = "clinical.csv"
    labels: str = "labels.csv"
    embeddings: str = "embeddings"
    schema: str = None


def _encoder_training():
    return TrainConfig(optimizer="adam", learning_rate=1e-4, weight_decay=0.0, max_epochs=300,
                       min_epochs_before_stop=0, patience=30)


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainConfig = field(default_factory=TrainConfig)
    encoder_training: TrainConfig = field(default_factory=_encoder_training)
    cv: CVSection = field(default_factory=CVSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    data: DataSection = field(default_factory=DataSection)

    @property
    def seed(self):
        return self.training.seed

    def with_seed(self, seed):
        doc = self.to_dict()
        doc["training"]["seed"] = int(seed)
        return RunConfig.from_dict(doc)

    def to_dict(self):
        return asdict(self)

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, doc):
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping of sections")
        kinds = {f.name: f for f in fields(cls)}
        sections = {}
        for name, body in doc.items():
            if name not in kinds:
                raise ConfigError(f"unknown config key: {name}")
            section_type = _section_type(name)
            body = body or {}
            if not isinstance(body, dict):
                raise ConfigError(f"config section {name} must be a mapping")
            known = {f.name for f in fields(section_type)}
            for key in body:
                if key not in known:
                    raise ConfigError(f"unknown config key: {name}.{key}")
            defaults = asdict(kinds[name].default_factory())
            defaults.update(body)
            try:
                sections[name] = section_type(**defaults)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name} section: {exc}") from None
        return cls(**sections)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                doc = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        return cls.from_dict(doc)


def _section_type(name):
    return {
        "model": ModelSection,
        "training": TrainConfig,
        "encoder_training": TrainConfig,
        "cv": CVSection,
        "fusion": FusionSection,
        "data": DataSection,
    }[name]
