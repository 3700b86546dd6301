"""Pydantic models for the PBE-UNet segmentation engine."""
import hashlib
import json
import math
from enum import Enum
from typing import Any, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_serializer, model_validator

from pbeunet.tensor import Tensor


class FusionMode(str, Enum):
    """How a stage combines its features with the predicted boundary."""
    BGFE = "bgfe"
    ADD = "add"
    MULTIPLY = "multiply"
    CONCAT = "concat"


class BgfeExpansion(str, Enum):
    """Depthwise stages used to widen the boundary into an attention map."""
    NONE = "none"
    DW3 = "dw3"
    DW3_DW5 = "dw3_dw5"


class BgfeStage(str, Enum):
    """Where boundary detection and enhancement sit in the U-Net."""
    DECODER = "decoder"
    ENCODER = "encoder"
    BOTH = "both"

    @property
    def in_encoder(self) -> bool:
        return self != BgfeStage.DECODER

    @property
    def in_decoder(self) -> bool:
        return self != BgfeStage.ENCODER


class BlockKind(str, Enum):
    """Parameterized building blocks."""
    CBR3X3 = "CBR3x3"
    CBR1X1 = "CBR1x1"
    DW3X3 = "DW3x3"
    DW5X5 = "DW5x5"
    DW_DILATED = "DWDilated"
    CONV1X1 = "Conv1x1"
    CONV3X3 = "Conv3x3"
    ECA = "ECA"
    ENCODER = "EncoderBlock"
    DECODER = "DecoderBlock"


CHANNEL_PRESERVING = {BlockKind.DW3X3, BlockKind.DW5X5, BlockKind.DW_DILATED, BlockKind.ECA}


class BlockSpec(BaseModel):
    """Shape and kind of one parameterized block."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: BlockKind
    in_ch: int = Field(..., ge=1)
    out_ch: int = Field(..., ge=1)
    dilation: int = Field(default=1, ge=1, description="Dilation rate (DWDilated only)")
    skip_ch: int = Field(default=0, ge=0, description="Skip channels concatenated by a DecoderBlock")

    @model_validator(mode="after")
    def _depthwise_keeps_channels(self) -> "BlockSpec":
        if self.kind in CHANNEL_PRESERVING and self.in_ch != self.out_ch:
            raise ValueError(f"{self.kind.value} requires in_ch == out_ch, got {self.in_ch} -> {self.out_ch}")
        return self


class PbeConfig(BaseModel):
    """Network configuration, including the ablation switches."""
    model_config = ConfigDict(extra="forbid")

    in_channels: int = Field(default=1, ge=1, description="1 for grayscale")
    base_channels: int = Field(default=16, ge=1)
    stages: Literal[4] = 4
    fusion_mode: FusionMode = FusionMode.BGFE
    enable_bd: bool = True
    enable_bgfe: bool = True
    enable_saam: bool = True
    saam_dilations: Tuple[int, int, int, int] = (1, 2, 3, 4)
    saam_reduction: float = Field(default=0.5, gt=0.0, le=1.0)
    bgfe_expansion: BgfeExpansion = BgfeExpansion.DW3_DW5
    bgfe_stage: BgfeStage = BgfeStage.DECODER

    @model_validator(mode="after")
    def _check_consistency(self) -> "PbeConfig":
        if self.enable_bgfe and not self.enable_bd:
            raise ValueError("enable_bgfe requires enable_bd (the enhancement consumes the boundary map)")
        if any(d < 1 for d in self.saam_dilations):
            raise ValueError(f"saam_dilations must be positive, got {self.saam_dilations}")
        if self.enable_saam:
            for channels in self.stage_channels():
                reduced = channels * self.saam_reduction
                if reduced != int(reduced) or int(reduced) % 4:
                    raise ValueError(
                        f"SAAM needs C*saam_reduction divisible by 4; stage with C={channels} gives {reduced}"
                    )
        return self

    def stage_channels(self) -> List[int]:
        """Encoder widths, shallow to deep."""
        return [self.base_channels * 2 ** k for k in range(self.stages)]

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** self.stages

    def saam_channels(self, channels: int) -> int:
        return int(channels * self.saam_reduction)


class TrainConfig(BaseModel):
    """Optimizer, schedule and loop settings."""
    model_config = ConfigDict(extra="forbid")

    lr0: float = Field(default=0.001, gt=0.0)
    weight_decay: float = Field(default=0.0001, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    power: float = Field(default=0.9, gt=0.0)
    epochs: int = Field(default=300, ge=1)
    batch_size: int = Field(default=8, ge=1)
    seed: int = Field(default=0, ge=0)
    eval_every: int = Field(default=1, ge=1, description="Validation period in epochs")
    max_iters: Optional[int] = Field(default=None, ge=1, description="Iteration budget overriding epochs")
    train_ratio: float = Field(default=0.8, gt=0.0, lt=1.0)


class LossWeights(BaseModel):
    """Weights of the multi-task objective."""
    model_config = ConfigDict(extra="forbid")

    lambda1: float = Field(default=0.5, ge=0.0, description="BCE weight inside the segmentation loss")
    lambda2: float = Field(default=0.7, ge=0.0, description="Boundary loss weight")
    smooth_eps: float = Field(default=1e-6, gt=0.0)
    clamp_eps: float = Field(default=1e-7, gt=0.0, lt=0.5)


class SynthConfig(BaseModel):
    """Synthetic ultrasound-like dataset settings."""
    model_config = ConfigDict(extra="forbid")

    count: int = Field(default=100, ge=1)
    # a 32 px image leaves a 2x2 bottleneck, enough for batch statistics of a single sample
    size: int = Field(default=256, ge=32)
    seed: int = Field(default=0, ge=0)
    blob_count_range: Tuple[int, int] = (1, 2)
    contrast: Tuple[float, float] = (0.1, 0.4)
    speckle_strength: float = Field(default=0.25, ge=0.0)
    blur_radius: int = Field(default=2, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthConfig":
        if self.size % 16:
            raise ValueError(f"size must be divisible by 16, got {self.size}")
        low, high = self.blob_count_range
        if not 1 <= low <= high:
            raise ValueError(f"blob_count_range must satisfy 1 <= low <= high, got {self.blob_count_range}")
        c_low, c_high = self.contrast
        if not 0.0 < c_low <= c_high <= 1.0:
            raise ValueError(f"contrast must satisfy 0 < low <= high <= 1, got {self.contrast}")
        return self


class RunConfig(BaseModel):
    """Complete JSON run document; unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")

    model: PbeConfig = Field(default_factory=PbeConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()


class ConfusionCounts(BaseModel):
    """Pixelwise confusion counts of one prediction/ground-truth pair."""
    tp: int = Field(..., ge=0)
    fp: int = Field(..., ge=0)
    tn: int = Field(..., ge=0)
    fn: int = Field(..., ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class MetricReport(BaseModel):
    """Metrics of one prediction/ground-truth pair."""
    sample_id: Optional[str] = None
    dice: float = Field(..., ge=0.0, le=1.0)
    iou: float = Field(..., ge=0.0, le=1.0)
    hd95: float = Field(..., ge=0.0, description="Pixels; +inf when exactly one boundary set is empty")
    recall: float = Field(..., ge=0.0, le=1.0)
    accuracy: float = Field(..., ge=0.0, le=1.0)
    counts: ConfusionCounts

    @property
    def hd95_defined(self) -> bool:
        return math.isfinite(self.hd95)

    @field_serializer("hd95")
    def _serialize_hd95(self, value: float) -> Optional[float]:
        # JSON has no infinity; an undefined distance is written as null.
        return value if math.isfinite(value) else None


class AggregateReport(BaseModel):
    """Per-image metric means over a set of samples."""
    count: int = Field(..., ge=0)
    dice: float
    iou: float
    hd95: Optional[float] = Field(None, description="Mean over samples with a defined HD95")
    recall: float
    accuracy: float
    hd95_undefined: int = Field(default=0, ge=0)


class Sample(BaseModel):
    """Paired image, mask and boundary target at a fixed resolution."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: str
    image: Tensor
    mask: Tensor
    boundary: Tensor

    @model_validator(mode="after")
    def _check_shapes(self) -> "Sample":
        shapes = {self.image.shape, self.mask.shape, self.boundary.shape}
        if len(shapes) != 1 or len(self.image.shape) != 4 or self.image.shape[:2] != (1, 1):
            raise ValueError(f"sample {self.id}: image/mask/boundary must share shape (1,1,H,W), got {shapes}")
        return self

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[2], self.image.shape[3]


class PbeOutput(BaseModel):
    """Forward result: mask logits/probabilities and per-stage boundary maps.

    Decoder maps come first, deep to shallow, followed by encoder maps,
    shallow to deep, when the boundary modules also sit in the encoder.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mask_logit_map: Tensor
    mask_prob: Tensor
    boundary_probs: List[Tensor] = Field(default_factory=list)


class HistoryRecord(BaseModel):
    """One optimizer step."""
    iter: int
    loss: float
    lr: float


class EvalRecord(BaseModel):
    """One validation pass."""
    epoch: int
    iter: int
    aggregate: AggregateReport


class TrainingResult(BaseModel):
    """Outcome of a training run."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    history: List[HistoryRecord] = Field(default_factory=list)
    evaluations: List[EvalRecord] = Field(default_factory=list)
    best_dice: Optional[float] = None
    best_iteration: Optional[int] = None
    iterations: int = 0
    params: Any = None


class GradcheckResult(BaseModel):
    """Finite-difference comparison for one operation."""
    name: str
    max_rel_error: float
    tolerance: float
    coordinates: int = Field(..., ge=0, description="Number of perturbed input coordinates")

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance
