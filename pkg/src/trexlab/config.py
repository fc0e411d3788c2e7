"""The run configuration document: one strict JSON tree per experiment."""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .analysis import AnalysisConfig
from .augment import AugmentConfig
from .checkpoint import canonical_json, config_hash
from .data import Dataset, SyntheticSpec, generate_synthetic, load_trxd
from .network import ModelConfig
from .objectives import LossConfig
from .optim import OptimConfig
from .probe import ProbeConfig


class ConfigError(ValueError):
    pass


class DatasetSource(BaseModel):
    """Either a .trxd path or a synthetic generator spec."""

    model_config = ConfigDict(extra="forbid")

    path: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None

    @model_validator(mode="after")
    def _one(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("give exactly one of 'path' or 'synthetic'")
        return self

    def load(self, base_dir: Optional[Path] = None) -> Dataset:
        if self.synthetic is not None:
            return generate_synthetic(self.synthetic)
        path = Path(self.path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return load_trxd(path)


def _synthetic(family: int) -> DatasetSource:
    return DatasetSource(synthetic=SyntheticSpec(family=family, name=f"synth-f{family}"))


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: DatasetSource = Field(default_factory=lambda: _synthetic(0))
    # Transfer tasks, each probed on frozen encoder features.
    transfer: List[DatasetSource] = Field(default_factory=lambda: [_synthetic(k) for k in (1, 2, 3)])


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    short_side: int = 32
    batch_size: int = 256
    probe: ProbeConfig = Field(default_factory=ProbeConfig)


class IOConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    output_dir: str = "runs"
    run_name: str = "run"
    seed: int = 0
    precision: Literal["float32", "float64"] = "float32"
    # In epochs; 0 writes only the final checkpoint.
    checkpoint_every: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.seed < 0 or self.checkpoint_every < 0:
            raise ValueError("seed and checkpoint_every must be non-negative")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataConfig = Field(default_factory=DataConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    objective: LossConfig = Field(default_factory=LossConfig)
    optimizer: OptimConfig = Field(default_factory=OptimConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    io: IOConfig = Field(default_factory=IOConfig)

    @model_validator(mode="after")
    def _check(self):
        obj = self.objective
        if obj.uses_memory and self.augment.n_global < 1:
            raise ValueError("objective.kind: memory objectives need at least one global crop")
        if obj.uses_memory and obj.classifier != "learned":
            raise ValueError("objective.classifier: prototype objectives have no class weights to freeze")
        return self

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def training_hash(self) -> str:
        """Digest of everything that shapes the training trajectory."""
        d = self.to_dict()
        d.pop("eval")
        for key in ("output_dir", "run_name", "checkpoint_every"):
            d["io"].pop(key)
        return config_hash(canonical_json(d)).hex()


def resolve(cfg: RunConfig, n_classes: int) -> RunConfig:
    """Materialise data-dependent defaults (memory size) and check class counts."""
    obj = cfg.objective
    if obj.classifier == "frozen_orthogonal":
        d_b = cfg.model.projector.bottleneck_dim if cfg.model.projector.n_layers else cfg.model.encoder.output_dim
        if n_classes > d_b:
            raise ConfigError(f"objective.classifier: {n_classes} orthogonal classes do not fit in d_b={d_b}")
    if obj.memory_size is None:
        obj = obj.model_copy(update={"memory_size": obj.capacity(n_classes)})
    return cfg.model_copy(update={"objective": obj})


def format_validation_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "\n".join(lines)


def parse_config(doc: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as err:
        raise ConfigError(format_validation_error(err)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    return parse_config(doc)


def recipe_dir() -> Path:
    return Path(__file__).parent / "recipes"


def list_recipes() -> List[str]:
    return sorted(p.stem for p in recipe_dir().glob("*.json"))


def load_recipe(name: str) -> RunConfig:
    return load_config(recipe_dir() / f"{name}.json")
