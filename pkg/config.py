"""Configuration management for experiments."""
import json
import os
from typing import List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from errors import ConfigError

load_dotenv()

# Runtime defaults (overridable from .env)
DEFAULT_SEED = int(os.getenv("GASA_SEED", "0"))
DEFAULT_THREADS = int(os.getenv("GASA_THREADS", "1"))
DEFAULT_PRECISION = os.getenv("GASA_PRECISION", "single")

# Run records and experiment outputs
RUNS_DIR = os.getenv("GASA_RUNS_DIR", "runs")
OUTPUT_DIR = os.getenv("GASA_OUTPUT_DIR", "outputs")

KernelKind = Literal["learned", "rbf", "linear", "off"]


class ModelConfig(BaseModel):
    """Decoder hyperparameters. Toy-scale defaults; D=256, 8 heads is one config away."""

    dim: int = 64
    num_heads: int = 4
    num_queries: int = 10
    num_layers: int = 6
    ffn_mult: int = 4
    feature_dim: int = 32
    num_spatial_tokens: int = 8
    kernel_hidden: int = 32
    kernel_clamp: List[float] = Field(default_factory=lambda: [-10.0, 0.0])
    kernel_tolerance: float = 0.05
    beta_init: float = 1.0
    pe_frequencies: int = 10
    pe_scale: float = 10.0
    rbf_sigma: float = 2.0
    centroid_hidden: int = 32
    block_size: int = 4
    # ablation switches
    kernel: KernelKind = "learned"
    world_pe: bool = True
    spatial_tokens: bool = True
    query_bias: bool = False

    @model_validator(mode="after")
    def _check_heads(self):
        if self.dim % self.num_heads != 0:
            raise ValueError(f"dim {self.dim} is not divisible by num_heads {self.num_heads}")
        if self.num_spatial_tokens != 8:
            raise ValueError("num_spatial_tokens must be 8 (index 0 = no qualifier)")
        lo, hi = self.kernel_clamp
        if not lo < hi:
            raise ValueError(f"kernel_clamp {self.kernel_clamp} is not an increasing range")
        return self


class LossWeights(BaseModel):
    """Loss weights and per-term parameters."""

    lambda_focal: float = 2.0
    lambda_dice: float = 0.5
    lambda_align: float = 1.0
    lambda_contrastive: float = 0.3
    lambda_centroid: float = 0.5
    lambda_presence: float = 0.5
    focal_alpha: float = 0.75
    focal_gamma: float = 2.0
    align_alpha: float = 0.5
    align_tau: float = 2.0
    align_gamma: float = 2.0
    contrastive_margin: float = 0.5
    dice_epsilon: float = 1.0

    @field_validator(
        "lambda_focal", "lambda_dice", "lambda_align",
        "lambda_contrastive", "lambda_centroid", "lambda_presence",
    )
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("loss weights must be >= 0")
        return value


class SpatialConfig(BaseModel):
    """Spatial language thresholds."""

    near_threshold: float = 0.5
    on_top_threshold: float = 0.3
    depth_tie: float = 0.01
    augment_prob: float = 0.3
    multi_instance_only: bool = True
    relation_radius: float = 2.5
    reference_view: int = 0
    up_axis: int = 2
    min_confidence: float = 0.3
    duplicate_iou: float = 0.7


class SceneDefaults(BaseModel):
    """Rendering defaults for synthetic scenes."""

    num_views: int = 4
    width: int = 32
    height: int = 32
    feature_dim: int = 32
    focal: float = 40.0
    depth_noise: float = 0.02
    feature_noise: float = 0.1
    far_plane: float = 20.0


class DatasetSpec(BaseModel):
    """What `gen` writes: how many scenes, which fraction are twin fixtures."""

    num_scenes: int = 50
    twin_fraction: float = 0.2
    min_objects: int = 2
    max_objects: int = 5
    seed: int = DEFAULT_SEED
    scene: SceneDefaults = Field(default_factory=SceneDefaults)


class AblationFlags(BaseModel):
    gasa_kernel: KernelKind = "learned"
    world_pe: bool = True
    spatial_tokens: bool = True

    def apply(self, model: ModelConfig) -> ModelConfig:
        """Return a copy of `model` with these switches applied."""
        return model.model_copy(update={
            "kernel": self.gasa_kernel,
            "world_pe": self.world_pe,
            "spatial_tokens": self.spatial_tokens,
        })


class TrainConfig(BaseModel):
    """Optimizer, schedule and data handling for `train`."""

    epochs: int = 6
    batch_size: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    warmup_epochs: int = 2
    betas: List[float] = Field(default_factory=lambda: [0.9, 0.999])
    grad_clip: float = 1.0
    seed: int = DEFAULT_SEED
    eval_fraction: float = 0.2
    absent_query_prob: float = 0.1
    target_strategy: Literal["instance", "semantic_union"] = "instance"
    frozen: List[str] = Field(default_factory=list)
    ablation: AblationFlags = Field(default_factory=AblationFlags)

    @model_validator(mode="after")
    def _check_schedule(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.warmup_epochs > self.epochs and self.epochs > 0:
            raise ValueError(
                f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}"
            )
        return self


class EvalProtocol(BaseModel):
    """How `evaluate` samples objects and binarizes masks."""

    threshold: float = 0.5
    object_sampling: Literal["all", "random"] = "all"
    objects_per_scene: int = 5
    sampling_seeds: List[int] = Field(default_factory=lambda: [0])
    object_aware: bool = False


class ExperimentConfig(BaseModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    spatial: SpatialConfig = Field(default_factory=SpatialConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalProtocol = Field(default_factory=EvalProtocol)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Load an experiment config from a JSON file.

    Args:
        path: Path to the JSON file (defaults are used when None)

    Returns:
        Validated ExperimentConfig
    """
    if path is None:
        return ExperimentConfig()

    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")

    with open(path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"Invalid config {path}: {field}: {first['msg']}") from e


def validate_section(model_cls, data: dict):
    """Validate one config section, converting pydantic errors to ConfigError."""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or model_cls.__name__
        raise ConfigError(f"{model_cls.__name__}.{field}: {first['msg']}") from e
