from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import List, Literal, Optional

SHAPE_FAMILIES = ["disk", "ring", "cross", "blob", "square", "ellipse"]


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sigma: float = Field(0.01, gt=0)
    delta: float = Field(0.1, ge=0)
    beta: float = Field(0.1, ge=0)
    gamma: float = Field(1.0, ge=0)
    tau: float = Field(0.75, ge=0.01)
    weight_decay: float = Field(1e-4, ge=0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eta0: float = Field(1e-3, gt=0)
    epochs_corld: int = Field(20, ge=1)
    epochs_clf: int = Field(30, ge=1)
    eps_corld: float = Field(1e-4, ge=0)
    eps_clf: float = Field(1e-4, ge=0)
    batch_size: int = Field(16, ge=1)
    seed: int = Field(0, ge=0)
    steps: int = Field(6, ge=4, le=10)
    weights: LossWeights = Field(default_factory=LossWeights)
    candidate_set: Literal["all_others", "different_class_only"] = "all_others"
    fuse_source: Literal["projected", "latent"] = "projected"
    finetune_shape: bool = False
    template_mode: Literal["single", "multi"] = "multi"
    contrastive_on: bool = True
    template_in_input: bool = False
    out_dir: Optional[str] = None

    @model_validator(mode="after")
    def _contrastive_needs_pairs(self):
        if self.contrastive_on and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when contrastive_on")
        return self


class GenSpec(BaseModel):
    classes: int = Field(4, ge=2, le=len(SHAPE_FAMILIES))
    per_class: int = Field(50, ge=3)
    size: int = Field(32, ge=8)
    seed: int = Field(7, ge=0)
    deform_amplitude: float = Field(2.0, ge=0)
    noise_std: float = Field(0.02, ge=0)
    steps: int = Field(6, ge=4, le=10)

    @model_validator(mode="after")
    def _amplitude_passes_guard(self):
        if self.deform_amplitude / 2 ** self.steps >= 0.5:
            raise ValueError(
                f"deform_amplitude={self.deform_amplitude} violates the exp_map guard at steps={self.steps}"
            )
        return self


class ArchSpec(BaseModel):
    """Architecture descriptor of the CoRLD network"""
    version: int = 1
    in_channels: int = Field(1, ge=1)
    encoder_channels: List[int] = Field(default_factory=lambda: [16, 32, 64])
    decoder_channels: List[int] = Field(default_factory=lambda: [32, 16, 16])
    kernel_size: int = 3
    upsample_kernel: int = 4
    groups: int = Field(4, ge=1)
    projection_dim: int = Field(64, ge=1)
    leaky_slope: float = 0.1
    final_gain: float = Field(1e-3, ge=0)
    velocity_bound: float = Field(8.0, gt=0)

    @property
    def downsample(self) -> int:
        return 2 ** len(self.encoder_channels)

    @model_validator(mode="after")
    def _mirror(self):
        if len(self.decoder_channels) != len(self.encoder_channels):
            raise ValueError("decoder must mirror the encoder depth")
        for width in self.encoder_channels + self.decoder_channels + [self.projection_dim]:
            if width % self.groups:
                raise ValueError(f"channel width {width} not divisible by groups={self.groups}")
        return self


class ClassifierSpec(BaseModel):
    """Fusion descriptor of the boosted classifier"""
    version: int = 1
    num_classes: int = Field(ge=2)
    in_channels: int = Field(1, ge=1)
    use_image: bool = True
    use_shape: bool = True
    image_channels: List[int] = Field(default_factory=lambda: [16, 32, 64])
    shape_dim: int = Field(0, ge=0)
    hidden: List[int] = Field(default_factory=lambda: [64, 32])
    dropout: float = Field(0.1, ge=0, lt=1)
    groups: int = Field(4, ge=1)
    leaky_slope: float = 0.1
    fuse_source: Literal["projected", "latent"] = "projected"

    @property
    def image_dim(self) -> int:
        return self.image_channels[-1] if self.use_image else 0

    @model_validator(mode="after")
    def _has_features(self):
        if not (self.use_image or self.use_shape):
            raise ValueError("classifier needs image features, shape features or both")
        if self.use_shape and self.shape_dim < 1:
            raise ValueError("shape_dim must be set when use_shape")
        if len(self.hidden) != 2:
            raise ValueError("classifier head has exactly two hidden layers")
        return self


class EpochRecord(BaseModel):
    epoch: int
    lr: float
    shape_loss: float = 0.0
    csr_loss: float = 0.0
    total: float = 0.0
    clf_loss: float = 0.0
    val_metric: float = 0.0
    seconds: float = 0.0
    rss_mb: float = 0.0


class TrainReport(BaseModel):
    phase: Literal["corld", "clf"]
    epochs: List[EpochRecord] = Field(default_factory=list)
    best_val: List[float] = Field(default_factory=list)
    checkpoint_path: Optional[str] = None
    stopped_early: bool = False

    @property
    def seconds_per_epoch(self) -> float:
        if not self.epochs:
            return 0.0
        return sum(record.seconds for record in self.epochs) / len(self.epochs)


class MetricsReport(BaseModel):
    accuracy: float = Field(ge=0, le=1)
    precision: float = Field(ge=0, le=1)
    f1: float = Field(ge=0, le=1)
    sensitivity: float = Field(ge=0, le=1)
    specificity: float = Field(ge=0, le=1)
    auc: float = Field(ge=0, le=1)
    confusion: List[List[int]]
    classes: List[int]


class SweepRow(BaseModel):
    kind: str
    arm: str
    param: str
    metrics: MetricsReport
    seconds_per_epoch: float = 0.0
