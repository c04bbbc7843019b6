"""Request/response models for the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional, Union

from pydantic import BaseModel, Field

from ..backbone import BackboneConfig, preset_config


class BackboneSpec(BaseModel):
    """Either a named preset or explicit stage settings."""

    preset: Literal["baseline", "one_attn", "five_attns"] = "five_attns"
    stage_channels: Optional[tuple[int, int, int, int]] = None
    blocks_per_stage: Optional[tuple[int, int, int, int]] = None
    input_size: int = 64
    num_classes: int = 2

    def to_config(self) -> BackboneConfig:
        base = preset_config(self.preset, input_size=self.input_size,
                             num_classes=self.num_classes)
        if self.stage_channels is not None or self.blocks_per_stage is not None:
            base = BackboneConfig(
                stage_channels=self.stage_channels or base.stage_channels,
                blocks_per_stage=self.blocks_per_stage or base.blocks_per_stage,
                attn_plan=dict(base.attn_plan),
                input_size=self.input_size, num_classes=self.num_classes,
            )
        base.validate()
        return base


class GenerateDataRequest(BaseModel):
    kind: Literal["target", "medical", "natural"] = "target"
    n: int = Field(ge=1)
    out_dir: str
    seed: int = 0
    image_size: int = 64
    noise_sigma: float = 0.02


class GenerateDataResponse(BaseModel):
    out_dir: str
    kind: str
    n: int
    label_counts: dict[int, int]
    split_sizes: dict[str, int]


class TrainOptions(BaseModel):
    epochs: int = Field(default=2, ge=0)
    batch_size: int = Field(default=16, ge=1)
    lr: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_epochs: list[int] = Field(default_factory=list)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    flip_prob: float = 0.5
    jitter_prob: float = 0.5
    gray_prob: float = 0.5


class SupervisedTrainRequest(TrainOptions):
    stage: Literal["stl_n", "stl_m"]
    dataset: str
    out_checkpoint: str
    init_checkpoint: Optional[str] = None
    backbone: BackboneSpec = Field(default_factory=BackboneSpec)


class SslTrainRequest(TrainOptions):
    dataset: str
    out_checkpoint: str
    init_checkpoint: Optional[str] = None
    backbone: BackboneSpec = Field(default_factory=BackboneSpec)
    lr: float = 0.05
    tau: float = 0.07
    encoder_momentum: float = 0.999
    alpha1: float = 0.8
    alpha2: float = 0.8
    queue_capacity: int = 256
    queue_prefill: bool = True
    paper_literal_eq2: bool = False


class FinetuneRequest(TrainOptions):
    dataset: str
    out_checkpoint: str
    init_checkpoint: Optional[str] = None  # None trains from scratch
    backbone: BackboneSpec = Field(default_factory=BackboneSpec)
    lr: float = 0.05


class TrainResponse(BaseModel):
    checkpoint: str
    stage: str
    provenance: list[str]
    history: dict


class EvaluateRequest(BaseModel):
    checkpoint: str
    dataset: str
    split: Literal["train", "val", "test"] = "test"
    out_json: Optional[str] = None


class EvalResponse(BaseModel):
    accuracy: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int


class LeepRequest(BaseModel):
    csv: Optional[str] = None
    checkpoint: Optional[str] = None
    dataset: Optional[str] = None
    split: Literal["train", "val", "test"] = "train"
    out_json: Optional[str] = None


class LeepResponse(BaseModel):
    leep: float
    n: int
    num_source_classes: int
    num_target_classes: int


class ReportRequest(BaseModel):
    """Transfer-gain report from two evaluations (paths or inline metrics)."""

    no_pretrain: Union[str, EvalResponse]
    pretrained: Union[str, EvalResponse]
    out_json: Optional[str] = None


class ReportResponse(BaseModel):
    no_pretrain: EvalResponse
    pretrained: EvalResponse
    improvements: dict[str, float]


class HealthResponse(BaseModel):
    status: str
    version: str
