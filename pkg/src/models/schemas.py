"""
Pydantic models for configuration, reports and checkpoint manifests.

This module contains the validated data models shared by the services and
the command-line interface of Impatient Networks.
"""

import math
from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class LayerType(str, Enum):
    """Backbone layer kinds."""
    CONV = "conv"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    MAXPOOL = "maxpool"
    FC = "fc"


class HeadKind(str, Enum):
    """Early-prediction head variants."""
    FC_ONLY = "fc_only"
    AVG = "avg"
    AVG4X4 = "avg4x4"


class SchemeKind(str, Enum):
    """Named weighting schemes plus the density-derived one."""
    STD = "std"
    EQ = "eq"
    LIN = "lin"
    POLY = "poly"
    ILIN = "ilin"
    IPOLY = "ipoly"
    NORM = "norm"
    DENSITY = "density"


class DensityKind(str, Enum):
    PIECEWISE = "piecewise"
    UNIFORM = "uniform"
    EXPONENTIAL = "exponential"
    POINT = "point"


class Criterion(str, Enum):
    """Cascade stopping criteria."""
    RATIO = "ratio"
    ENTROPY = "entropy"


class DataKind(str, Enum):
    SYNTHETIC = "synthetic"
    IDX = "idx"
    CSV = "csv"


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------


class LayerSpec(BaseModel):
    """One backbone layer."""
    type: LayerType = Field(..., description="Layer kind")
    out_channels: Optional[int] = Field(None, gt=0, description="Conv output channels")
    kernel_size: int = Field(3, gt=0, description="Conv kernel extent")
    padding: int = Field(1, ge=0, description="Conv zero padding")
    stride: int = Field(1, gt=0, description="Conv stride")
    size: int = Field(2, gt=0, description="Max-pool window and stride")
    out_features: Optional[int] = Field(None, gt=0, description="Fully-connected output width")

    @model_validator(mode="after")
    def check_required(self):
        if self.type == LayerType.CONV and self.out_channels is None:
            raise ValueError("conv layer requires out_channels")
        if self.type == LayerType.FC and self.out_features is None:
            raise ValueError("fc layer requires out_features")
        return self


class HeadSpec(BaseModel):
    """Early-prediction head attached after a backbone layer."""
    attach_point: int = Field(..., ge=0, description="Index of the backbone layer whose output feeds the head")
    kind: HeadKind = Field(HeadKind.AVG, description="Head variant")
    hidden_units: Optional[int] = Field(None, gt=0, description="Optional hidden FC width (multi-FC head)")


class ArchitectureConfig(BaseModel):
    """
    Backbone and head description.

    When `layers` is omitted the desk-scale backbone is generated from
    `channels` (one conv-BN-ReLU-maxpool block per entry). When `heads` is
    omitted one head of `head_kind` is attached after every block.
    """
    input_shape: Tuple[int, int, int] = Field((1, 16, 16), description="C, H, W of one example")
    num_classes: int = Field(10, ge=2, description="Number of classes")
    channels: List[int] = Field(default_factory=lambda: [8, 16, 32, 32], description="Generated block widths")
    batchnorm: bool = Field(True, description="Insert BatchNorm after every generated conv")
    head_kind: HeadKind = Field(HeadKind.AVG, description="Kind of generated heads")
    hidden_units: Optional[int] = Field(None, gt=0, description="Hidden FC width of generated heads")
    layers: Optional[List[LayerSpec]] = Field(None, description="Explicit backbone layers")
    heads: Optional[List[HeadSpec]] = Field(None, description="Explicit heads")

    @field_validator("input_shape")
    @classmethod
    def validate_input_shape(cls, v):
        if any(d <= 0 for d in v):
            raise ValueError("input_shape extents must be positive")
        return v

    def resolved_layers(self) -> List[LayerSpec]:
        if self.layers is not None:
            return list(self.layers)
        layers: List[LayerSpec] = []
        for width in self.channels:
            layers.append(LayerSpec(type=LayerType.CONV, out_channels=width, kernel_size=3, padding=1))
            if self.batchnorm:
                layers.append(LayerSpec(type=LayerType.BATCHNORM))
            layers.append(LayerSpec(type=LayerType.RELU))
            layers.append(LayerSpec(type=LayerType.MAXPOOL, size=2))
        return layers

    def resolved_heads(self) -> List[HeadSpec]:
        if self.heads is not None:
            return list(self.heads)
        layers = self.resolved_layers()
        ends = [i for i, spec in enumerate(layers) if spec.type == LayerType.MAXPOOL]
        if not ends or ends[-1] != len(layers) - 1:
            ends.append(len(layers) - 1)
        return [HeadSpec(attach_point=i, kind=self.head_kind, hidden_units=self.hidden_units) for i in ends]


# ---------------------------------------------------------------------------
# Budget / weighting
# ---------------------------------------------------------------------------


class DensityConfig(BaseModel):
    """Budget density as written in a run configuration."""
    kind: DensityKind = Field(..., description="Density family")
    breakpoints: Optional[List[float]] = Field(None, description="Piecewise breakpoints b_0 < ... < b_m")
    values: Optional[List[float]] = Field(None, description="Density value on each piece")
    low: Optional[float] = Field(None, description="Uniform support start")
    high: Optional[float] = Field(None, description="Uniform support end")
    rate: Optional[float] = Field(None, gt=0, description="Exponential rate")
    at: Optional[float] = Field(None, description="Point-mass location")


class WeightSchemeConfig(BaseModel):
    """Named weighting scheme or density-derived weights."""
    kind: SchemeKind = Field(SchemeKind.EQ, description="Scheme name")
    gamma: float = Field(2.0, description="Exponent of POLY / IPOLY")
    beta: float = Field(0.34, description="Width parameter of NORM")
    density: Optional[DensityConfig] = Field(None, description="Budget density (kind=density)")
    exits: Optional[List[float]] = Field(None, description="Exit times t_1 < ... < t_K (kind=density)")

    @model_validator(mode="after")
    def check_density(self):
        if self.kind == SchemeKind.DENSITY and (self.density is None or self.exits is None):
            raise ValueError("scheme 'density' requires 'density' and 'exits'")
        return self


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class TrainConfig(BaseModel):
    """Mini-batch SGD settings for the joint weighted objective."""
    epochs: int = Field(30, ge=1, description="Number of passes over the training split")
    batch_size: int = Field(32, ge=1, description="Mini-batch size")
    learning_rate: Optional[float] = Field(None, description="Step size; defaults depend on batchnorm")
    momentum: float = Field(0.9, ge=0.0, lt=1.0, description="SGD momentum")
    weight_decay: float = Field(5e-4, ge=0.0, description="L2 regularization coefficient")
    seed: int = Field(0, description="Seed for initialization and shuffling")
    scheme: WeightSchemeConfig = Field(default_factory=WeightSchemeConfig, description="Loss weighting")
    batchnorm: bool = Field(True, description="Backbone uses batch normalization")
    freeze_backbone: bool = Field(False, description="Train heads only (independent per-head training)")
    retries: int = Field(0, ge=0, description="Retries with halved learning rate after divergence")
    divergence_factor: float = Field(1e3, gt=1.0, description="Abort when loss exceeds this multiple of the initial loss")
    eval_batch_size: int = Field(256, ge=1, description="Batch size for validation passes")

    @model_validator(mode="after")
    def check_consistency(self):
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batchnorm and self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 when batchnorm is on")
        return self

    @property
    def effective_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 0.01 if self.batchnorm else 1e-4


class EpochRecord(BaseModel):
    """Training statistics of one epoch."""
    epoch: int = Field(..., ge=1)
    learning_rate: float = Field(...)
    total_loss: float = Field(..., description="Mean weighted joint loss over the epoch")
    head_losses: List[float] = Field(..., description="Mean cross-entropy per head")
    val_accuracy: List[float] = Field(..., description="Validation accuracy per head")

    @field_validator("val_accuracy")
    @classmethod
    def validate_accuracy(cls, v):
        if any(a < 0.0 or a > 1.0 for a in v):
            raise ValueError("accuracies must lie in [0, 1]")
        return v


class TrainLog(BaseModel):
    """Per-epoch training history."""
    num_heads: int = Field(..., ge=1)
    records: List[EpochRecord] = Field(default_factory=list)

    def final_accuracy(self) -> List[float]:
        if not self.records:
            return [0.0] * self.num_heads
        return list(self.records[-1].val_accuracy)

    def heads_below(self, factor: float, num_classes: int) -> List[int]:
        """Indices of heads whose final validation accuracy is below factor x chance."""
        chance = 1.0 / num_classes
        return [k for k, acc in enumerate(self.final_accuracy()) if acc < factor * chance]

    def columns(self) -> List[str]:
        return (
            ["epoch", "learning_rate", "total_loss"]
            + [f"loss_head_{k + 1}" for k in range(self.num_heads)]
            + [f"val_acc_head_{k + 1}" for k in range(self.num_heads)]
        )

    def rows(self) -> List[List[float]]:
        return [
            [r.epoch, r.learning_rate, r.total_loss, *r.head_losses, *r.val_accuracy]
            for r in self.records
        ]


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


class CostModel(BaseModel):
    """Cumulative per-head costs in multiply-accumulate operations."""
    prefix_costs: List[int] = Field(..., description="Backbone cost up to each head's attach point")
    head_costs: List[int] = Field(..., description="Cost of each head's own layers")
    t_b: List[int] = Field(..., description="Cost to head k when earlier heads are skipped")
    t_a: List[int] = Field(..., description="Cost to head k when every earlier head is computed")
    t_b_ms: Optional[List[float]] = Field(None, description="Measured median wall-clock, a-priori mode")
    t_a_ms: Optional[List[float]] = Field(None, description="Measured median wall-clock, anytime mode")

    @model_validator(mode="after")
    def check_schedule(self):
        k = len(self.t_b)
        if k < 1 or len(self.t_a) != k or len(self.head_costs) != k or len(self.prefix_costs) != k:
            raise ValueError("cost lists must be non-empty and of equal length")
        for seq in (self.t_b, self.t_a):
            if any(b <= a for a, b in zip(seq, seq[1:])):
                raise ValueError("costs must be strictly increasing")
        if any(a < b for a, b in zip(self.t_a, self.t_b)):
            raise ValueError("t_a must dominate t_b")
        return self

    @property
    def num_heads(self) -> int:
        return len(self.t_b)


class CascadePolicy(BaseModel):
    """Stopping rule for cascaded inference."""
    criterion: Criterion = Field(Criterion.RATIO, description="ratio: top1/top2; entropy: normalized entropy")
    threshold: float = Field(2.0, description="Stop when ratio >= threshold or entropy <= threshold")

    @model_validator(mode="after")
    def check_threshold(self):
        if math.isnan(self.threshold):
            raise ValueError("threshold must not be NaN")
        if self.criterion == Criterion.RATIO and self.threshold < 1.0:
            raise ValueError("ratio threshold must be >= 1")
        if self.criterion == Criterion.ENTROPY and self.threshold < 0.0:
            raise ValueError("entropy threshold must be >= 0")
        return self


class InferenceResult(BaseModel):
    """Outcome of one budgeted prediction."""
    predicted_class: int = Field(..., ge=0)
    head_index: int = Field(..., ge=1, description="1-based index of the head that produced the prediction")
    cost: int = Field(..., ge=0, description="Cost spent in MACs")
    probabilities: List[List[float]] = Field(..., description="Class probabilities of every head computed")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class ExpectedAccuracyReport(BaseModel):
    """Budget-weighted accuracy of an impatient network."""
    scheme: str = Field(..., description="Scheme name")
    head_accuracies: List[float] = Field(...)
    weights: List[float] = Field(...)
    expected_accuracy: float = Field(...)
    expected_cost_t_b: Optional[float] = Field(None, description="sum_k w_k t_B(k) in MACs")
    expected_cost_t_a: Optional[float] = Field(None, description="sum_k w_k t_A(k) in MACs")


class CurvePoint(BaseModel):
    cost_macs: float = Field(..., gt=0)
    cost_ms: Optional[float] = Field(None)
    accuracy: float = Field(..., ge=0.0, le=1.0)
    threshold_or_head: float = Field(..., description="Threshold (sweep) or 1-based head index")


class TimeAccuracyCurve(BaseModel):
    source: str = Field(..., description="per_head or cascade_sweep")
    criterion: Optional[Criterion] = Field(None)
    points: List[CurvePoint] = Field(default_factory=list)


class AnytimePoint(BaseModel):
    """Accuracy at one budget in a-priori and anytime mode."""
    budget: float = Field(..., description="Budget in MACs")
    head_a_priori: int = Field(..., ge=1)
    accuracy_a_priori: float = Field(..., ge=0.0, le=1.0)
    head_anytime: int = Field(..., ge=1)
    accuracy_anytime: float = Field(..., ge=0.0, le=1.0)
    agreement: Optional[float] = Field(
        None, ge=0.0, le=1.0,
        description="Share of checked examples where single-example inference matched the staged heads",
    )


class HeadKindResult(BaseModel):
    """Per-head validation accuracy obtained with one head variant."""
    head_kind: HeadKind = Field(...)
    val_accuracy: Optional[List[float]] = Field(None, description="None when the variant does not fit")
    error: Optional[str] = Field(None)


# ---------------------------------------------------------------------------
# Data and run configuration
# ---------------------------------------------------------------------------


class DataConfig(BaseModel):
    """Dataset source."""
    kind: DataKind = Field(DataKind.SYNTHETIC)
    train_images: Optional[str] = Field(None)
    train_labels: Optional[str] = Field(None)
    test_images: Optional[str] = Field(None)
    test_labels: Optional[str] = Field(None)
    train_csv: Optional[str] = Field(None)
    test_csv: Optional[str] = Field(None)
    image_shape: Optional[Tuple[int, int, int]] = Field(None, description="C, H, W of CSV rows")
    num_classes: int = Field(10, ge=2)
    n_per_class: int = Field(100, ge=1, description="Synthetic training examples per class")
    test_per_class: int = Field(50, ge=1, description="Synthetic test examples per class")
    image_size: int = Field(16, ge=8, description="Synthetic image side length")
    num_coarse: int = Field(5, ge=1, description="Synthetic coarse cue count")
    num_fine: int = Field(2, ge=1, description="Synthetic fine cue count")
    noise: float = Field(0.3, ge=0.0, description="Synthetic pixel noise level")
    val_fraction: float = Field(0.1, ge=0.0, lt=1.0, description="Stratified validation share of train data")
    normalize: bool = Field(True, description="Per-channel standardization with train statistics")


class EvaluationConfig(BaseModel):
    schemes: List[WeightSchemeConfig] = Field(
        default_factory=lambda: [
            WeightSchemeConfig(kind=k)
            for k in (SchemeKind.EQ, SchemeKind.LIN, SchemeKind.POLY,
                      SchemeKind.ILIN, SchemeKind.IPOLY, SchemeKind.NORM)
        ]
    )
    batch_size: int = Field(256, ge=1)
    measure_wall_clock: bool = Field(False, description="Add measured milliseconds to cost outputs")


class CascadeConfig(BaseModel):
    criteria: List[Criterion] = Field(default_factory=lambda: [Criterion.RATIO])
    ratio_thresholds: List[float] = Field(
        default_factory=lambda: [1.0, 1.1, 1.25, 1.5, 2.0, 3.0, 5.0, 10.0, 100.0, math.inf]
    )
    entropy_thresholds: List[float] = Field(
        default_factory=lambda: [0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0]
    )


class AnytimeConfig(BaseModel):
    budgets: Optional[List[float]] = Field(None, description="Explicit budgets; default spans every head")
    num_points: int = Field(20, ge=2)
    check_examples: int = Field(16, ge=0, description="Test examples re-run one at a time per budget")


class RunConfig(BaseModel):
    """Complete experiment description loaded from YAML."""
    data: DataConfig = Field(default_factory=DataConfig)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    cascade: CascadeConfig = Field(default_factory=CascadeConfig)
    anytime: AnytimeConfig = Field(default_factory=AnytimeConfig)
    output_dir: str = Field("runs/default")
    checkpoint: Optional[str] = Field(None, description="Defaults to <output_dir>/model.ckpt")

    @model_validator(mode="after")
    def sync_batchnorm(self):
        # generated backbones follow the training switch
        if self.architecture.layers is None:
            self.architecture.batchnorm = self.train.batchnorm
        return self

    def checkpoint_path(self) -> str:
        return self.checkpoint or f"{self.output_dir}/model.ckpt"


# ---------------------------------------------------------------------------
# Checkpoint manifest
# ---------------------------------------------------------------------------


class ManifestEntry(BaseModel):
    name: str = Field(..., description="Dotted parameter or buffer name")
    role: str = Field(..., description="param or buffer")
    shape: List[int] = Field(...)
    dtype: str = Field(..., description="Little-endian numpy dtype string")
    offset: int = Field(..., ge=0, description="Byte offset inside the data block")
    nbytes: int = Field(..., ge=0)


class NormalizationManifest(BaseModel):
    mean: List[float] = Field(..., description="Per-channel mean subtracted from inputs")
    std: List[float] = Field(..., description="Per-channel divisor")


class CheckpointManifest(BaseModel):
    format_version: int = Field(...)
    architecture: ArchitectureConfig = Field(...)
    entries: List[ManifestEntry] = Field(...)
    normalization: Optional[NormalizationManifest] = Field(None)
