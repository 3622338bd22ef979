"""
Experiment configuration schema.

One JSON document describes a whole experiment: where the sessions come
from, the model hyperparameters, the unlearning run, evaluation and the
ablation sweep. Every model forbids unknown keys, so a typo fails before
any stage runs.
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from curriculum import DifficultyKind, Strategy
from gru_model import HyperParams
from unlearn_engine import Mode, UnlearnRunConfig

logger = logging.getLogger(__name__)


class SynthSpec(BaseModel):
    """Seeded first-order Markov session generator with Zipf item popularity."""

    model_config = ConfigDict(extra="forbid")

    n_sessions: int = Field(2000, ge=100)
    n_items: int = Field(200, ge=10)
    # higher sharpness concentrates each transition row on fewer successors
    sharpness: float = Field(10.0, gt=0)
    # preferred successors per item and the share of mass they hold
    n_successors: int = Field(4, ge=1)
    follow_prob: float = Field(0.8, ge=0, le=1)
    popularity_skew: float = Field(1.0, ge=0)
    min_len: int = Field(3, ge=2)
    mean_extra_len: float = Field(4.0, ge=0)
    max_len: int = Field(50, ge=2)
    seed: int = 0

    @model_validator(mode="after")
    def _check_lengths(self) -> "SynthSpec":
        if self.max_len < self.min_len:
            raise ValueError(f"max_len {self.max_len} is below min_len {self.min_len}")
        if self.n_successors >= self.n_items:
            raise ValueError(f"n_successors {self.n_successors} must be below n_items {self.n_items}")
        return self


class CorpusFormat(str, Enum):
    CORPUS = "corpus"
    SESSION_LINES = "session-lines"
    USER_ITEM_TIME = "user-item-time"


class DatasetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: Optional[str] = None
    format: CorpusFormat = CorpusFormat.CORPUS
    synth: Optional[SynthSpec] = None
    min_count: int = Field(5, ge=1)
    split_seed: int = 0
    unlearn_ratio: float = Field(0.1, ge=0, le=0.5)
    max_per_session: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _one_source(self) -> "DatasetSpec":
        if (self.path is None) == (self.synth is None):
            raise ValueError("Exactly one of dataset.path and dataset.synth must be given")
        return self


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta: float = Field(10.0, gt=0)
    recall_ks: List[int] = Field(default_factory=lambda: [10, 20])
    hit_ks: List[int] = Field(default_factory=lambda: [1, 5])
    exclude_prefix: bool = False
    # which checkpoint cmd_eval scores: the trained model or the unlearned one
    model: str = "app"

    @field_validator("recall_ks", "hit_ks")
    @classmethod
    def _positive_ks(cls, ks: List[int]) -> List[int]:
        if not ks or any(k < 1 for k in ks):
            raise ValueError(f"k values must be a non-empty list of positive integers, got {ks}")
        return ks

    @field_validator("model")
    @classmethod
    def _known_model(cls, model: str) -> str:
        if model not in ("rec", "app"):
            raise ValueError(f"eval.model must be 'rec' or 'app', got {model!r}")
        return model


CAU_VARIANTS = tuple(f"{kind.value}-{strategy.value}" for kind in DifficultyKind for strategy in Strategy)


class AblationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    modes: List[Mode] = Field(default_factory=lambda: list(Mode))
    # CAU runs, one per difficulty measure x schedule, e.g. "gradient-hard"
    cau_variants: List[str] = Field(default_factory=lambda: ["gradient-hard"])
    batch_sizes: List[int] = Field(default_factory=list)
    ratios: List[float] = Field(default_factory=list)

    @field_validator("cau_variants")
    @classmethod
    def _known_variants(cls, variants: List[str]) -> List[str]:
        unknown = [v for v in variants if v not in CAU_VARIANTS]
        if unknown:
            raise ValueError(f"Unknown CAU variants {unknown}; expected any of {list(CAU_VARIANTS)}")
        return variants

    @field_validator("batch_sizes")
    @classmethod
    def _positive_batches(cls, sizes: List[int]) -> List[int]:
        if any(b < 1 for b in sizes):
            raise ValueError(f"Batch sizes must be positive, got {sizes}")
        return sizes

    @field_validator("ratios")
    @classmethod
    def _valid_ratios(cls, ratios: List[float]) -> List[float]:
        if any(not 0 < r <= 0.5 for r in ratios):
            raise ValueError(f"Unlearn ratios must lie in (0, 0.5], got {ratios}")
        return ratios


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: DatasetSpec
    model: HyperParams = Field(default_factory=HyperParams)
    train_epochs: int = Field(20, ge=0)
    unlearn: UnlearnRunConfig = Field(default_factory=UnlearnRunConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    out_dir: str = "runs"
    seed: int = 0
    threads: int = Field(1, ge=1)

    def resolved_unlearn(self) -> UnlearnRunConfig:
        """The unlearning config with Retrain defaulting to the training epochs."""
        if self.unlearn.retrain_epochs is not None:
            return self.unlearn
        return self.unlearn.model_copy(update={"retrain_epochs": self.train_epochs})

    def with_overrides(self, seed: Optional[int] = None, threads: Optional[int] = None,
                       out_dir: Optional[str] = None) -> "ExperimentConfig":
        """Apply command-line overrides; a seed override reseeds every stage."""
        data = self.model_dump(mode="json")
        if seed is not None:
            data["seed"] = seed
            data["model"]["seed"] = seed
            data["unlearn"]["seed"] = seed
            data["unlearn"]["curriculum"]["seed"] = seed
            data["dataset"]["split_seed"] = seed
            if data["dataset"]["synth"] is not None:
                data["dataset"]["synth"]["seed"] = seed
        if threads is not None:
            data["threads"] = threads
        if out_dir is not None:
            data["out_dir"] = out_dir
        return ExperimentConfig.model_validate(data)


def load_config(path) -> ExperimentConfig:
    """
    Read and validate an experiment config.

    Raises:
        FileNotFoundError: If the file does not exist
        pydantic.ValidationError: If the document does not match the schema
    """
    text = Path(path).read_text()
    config = ExperimentConfig.model_validate_json(text)
    logger.debug(f"Loaded config {path}: {json.dumps(config.model_dump(mode='json'), sort_keys=True)}")
    return config
