"""Residual backbones with configurable attention insertion.

Topology: stem conv (stride 2) -> 2x2 average pool -> four residual stages
(res2..res5, stride 2 from res3 on) -> global average pooling -> linear head.
Attention blocks are appended after the final residual block of the stages
named in ``attn_plan``. Three named presets cover the variants of interest:
no attention, a single block in res3, and the 2/2/1 plan over res3/res4/res5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionBlock
from .errors import ConfigError, DimensionError
from .nn import AvgPool2d, BatchNorm2d, Conv2d, Layer, Linear, ReLU
from .tensor import Parameter, Tensor, as_tensor

STAGE_NAMES = ("res2", "res3", "res4", "res5")

PRESET_ATTN_PLANS: dict[str, dict[str, int]] = {
    "baseline": {},
    "one_attn": {"res3": 1},
    "five_attns": {"res3": 2, "res4": 2, "res5": 1},
}

# stem stride 2, pool 2, and stride-2 entries to res3/res4/res5
TOTAL_DOWNSAMPLE = 32


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, int, int, int] = (2, 2, 2, 2)
    attn_plan: dict[str, int] = field(default_factory=dict)
    input_size: int = 64
    num_classes: int = 2
    in_channels: int = 1

    def validate(self) -> None:
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigError("four residual stages are required")
        if any(c < 1 for c in self.stage_channels) or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError("stage channels and block counts must be positive")
        for stage in self.attn_plan:
            if stage not in STAGE_NAMES:
                raise ConfigError(f"attn_plan names unknown stage {stage!r}")
        if any(n < 0 for n in self.attn_plan.values()):
            raise ConfigError("attention counts must be nonnegative")
        if self.input_size < TOTAL_DOWNSAMPLE or self.input_size % TOTAL_DOWNSAMPLE:
            raise ConfigError(
                f"input_size must be a positive multiple of {TOTAL_DOWNSAMPLE}"
            )
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")

    def to_dict(self) -> dict:
        return {
            "stage_channels": list(self.stage_channels),
            "blocks_per_stage": list(self.blocks_per_stage),
            "attn_plan": dict(self.attn_plan),
            "input_size": self.input_size,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        return BackboneConfig(
            stage_channels=tuple(d["stage_channels"]),
            blocks_per_stage=tuple(d["blocks_per_stage"]),
            attn_plan={str(k): int(v) for k, v in d["attn_plan"].items()},
            input_size=int(d["input_size"]),
            num_classes=int(d["num_classes"]),
            in_channels=int(d.get("in_channels", 1)),
        )


def preset_config(name: str, **overrides) -> BackboneConfig:
    """Named preset -> config; extra keyword fields override the defaults."""
    if name not in PRESET_ATTN_PLANS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESET_ATTN_PLANS)}")
    return BackboneConfig(attn_plan=dict(PRESET_ATTN_PLANS[name]), **overrides)


class ResidualBlock(Layer):
    """Two 3x3 convs with batch norm; projection shortcut when shape changes."""

    def __init__(self, name, in_ch, out_ch, stride, rng):
        self.conv1 = Conv2d(f"{name}.conv1", in_ch, out_ch, 3, stride=stride, rng=rng)
        self.bn1 = BatchNorm2d(f"{name}.bn1", out_ch)
        self.conv2 = Conv2d(f"{name}.conv2", out_ch, out_ch, 3, rng=rng)
        self.bn2 = BatchNorm2d(f"{name}.bn2", out_ch)
        # start each block near identity: residual branch gated shut
        self.bn2.gamma.data[...] = 0.0
        self.shortcut: list[Layer] = []
        if stride != 1 or in_ch != out_ch:
            self.shortcut = [
                Conv2d(f"{name}.proj", in_ch, out_ch, 1, stride=stride, padding=0, rng=rng),
                BatchNorm2d(f"{name}.proj_bn", out_ch),
            ]

    def parameters(self):
        ps = self.conv1.parameters() + self.bn1.parameters()
        ps += self.conv2.parameters() + self.bn2.parameters()
        for layer in self.shortcut:
            ps += layer.parameters()
        return ps

    def buffers(self):
        bufs = {}
        for layer in (self.bn1, self.bn2, *self.shortcut):
            bufs.update(layer.buffers())
        return bufs

    def forward(self, x, training=False):
        out = T.relu(self.bn1.forward(self.conv1.forward(x), training))
        out = self.bn2.forward(self.conv2.forward(out), training)
        identity = x
        for layer in self.shortcut:
            identity = layer.forward(identity, training)
        return T.relu(out + identity)


class Model:
    """An ordered stack of layers with a stable, unique parameter manifest."""

    def __init__(self, config: BackboneConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.provenance: list[str] = []
        rng = np.random.default_rng(seed)

        ch = config.stage_channels
        self.stem_conv = Conv2d("stem.conv", config.in_channels, ch[0], 3,
                                stride=2, bias=True, rng=rng)
        self.stem_bn = BatchNorm2d("stem.bn", ch[0])
        self.stem_pool = AvgPool2d(2)

        self.stages: list[list[Layer]] = []
        in_ch = ch[0]
        for si, stage in enumerate(STAGE_NAMES):
            blocks: list[Layer] = []
            stride = 1 if stage == "res2" else 2
            for bi in range(config.blocks_per_stage[si]):
                blocks.append(ResidualBlock(
                    f"{stage}.block{bi}", in_ch, ch[si], stride if bi == 0 else 1, rng))
                in_ch = ch[si]
            for ai in range(config.attn_plan.get(stage, 0)):
                blocks.append(AttentionBlock(f"{stage}.attn{ai}", ch[si], rng=rng))
            self.stages.append(blocks)

        self.head = Linear("head", ch[3], config.num_classes, rng=rng)

        self._params = self._collect_params()
        names = [p.name for p in self._params]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate parameter names in manifest")

    def _collect_params(self) -> list[Parameter]:
        ps = self.stem_conv.parameters() + self.stem_bn.parameters()
        for blocks in self.stages:
            for layer in blocks:
                ps += layer.parameters()
        ps += self.head.parameters()
        return ps

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def manifest(self) -> dict[str, Parameter]:
        return {p.name: p for p in self._params}

    def buffers(self) -> dict[str, np.ndarray]:
        bufs = dict(self.stem_bn.buffers())
        for blocks in self.stages:
            for layer in blocks:
                bufs.update(layer.buffers())
        return bufs

    def attention_blocks(self) -> list[AttentionBlock]:
        return [l for blocks in self.stages for l in blocks
                if isinstance(l, AttentionBlock)]

    def batchnorms(self) -> list[BatchNorm2d]:
        bns = [self.stem_bn]
        for blocks in self.stages:
            for layer in blocks:
                if isinstance(layer, ResidualBlock):
                    bns += [layer.bn1, layer.bn2]
                    bns += [s for s in layer.shortcut if isinstance(s, BatchNorm2d)]
        return bns

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params)

    def zero_grad(self) -> None:
        for p in self._params:
            p.zero_grad()

    def reset_head(self, num_classes: int, seed: int = 0) -> None:
        """Fresh classification head (used when transferring to a new task)."""
        rng = np.random.default_rng(seed)
        self.head = Linear("head", self.config.stage_channels[3], num_classes, rng=rng)
        self.config = BackboneConfig(
            stage_channels=self.config.stage_channels,
            blocks_per_stage=self.config.blocks_per_stage,
            attn_plan=dict(self.config.attn_plan),
            input_size=self.config.input_size,
            num_classes=num_classes,
            in_channels=self.config.in_channels,
        )
        self._params = self._collect_params()

    # -- forward ---------------------------------------------------------

    def _check_input(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 2:  # bare grayscale image
            x = T.reshape(x, x.shape + (1,))
        if x.ndim not in (3, 4):
            raise DimensionError(f"expected image tensor, got shape {x.shape}")
        spatial = x.shape[-3:-1]
        if spatial != (self.config.input_size, self.config.input_size):
            raise DimensionError(
                f"input spatial size {spatial} != configured {self.config.input_size}"
            )
        if x.shape[-1] != self.config.in_channels:
            raise DimensionError(
                f"input has {x.shape[-1]} channels, expected {self.config.in_channels}"
            )
        return x

    def forward_features(self, x, training: bool = False) -> Tensor:
        """Pooled feature vector: (c5,) for one image, (n,c5) for a batch."""
        x = self._check_input(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        out = T.relu(self.stem_bn.forward(self.stem_conv.forward(x), training))
        out = self.stem_pool.forward(out)
        for blocks in self.stages:
            for layer in blocks:
                out = layer.forward(out, training)
        feat = T.global_avg_pool(out)
        return T.reshape(feat, (feat.shape[1],)) if squeeze else feat

    def classify(self, x, training: bool = False) -> Tensor:
        """Logits over the configured classes."""
        return self.head.forward(self.forward_features(x, training), training)


def build_network(config: BackboneConfig, seed: int = 0) -> Model:
    """Construct a model with seeded, deterministic initialization."""
    return Model(config, seed=seed)


def forward_features(model: Model, image, training: bool = False) -> Tensor:
    return model.forward_features(image, training)


def classify(model: Model, image, training: bool = False) -> Tensor:
    return model.classify(image, training)
