"""Model assembly: the SISO/MISO/SIMO/MIMO architecture matrix.

Every model is a trait regressor built from ResNet18-shaped encoders (a
7x7 stem, four stages of two residual blocks, global average pooling)
with a width multiplier so desk-scale inputs train quickly. Mid fusion
gives each input modality its own encoder and concatenates pooled
features; depth first passes a 1-to-3-channel convolution acting as a
color-mapping layer. Early fusion stacks RGB and depth into a 4-channel
input for a single encoder and is kept as an experimental variant.

Deformable variants are produced by building the standard model and then
converting every convolution in place, so a deformable model at
initialization computes exactly what its standard twin does.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .autograd import Tensor
from .data import TRAIT_NAMES
from .deform import convert_conv_to_deformable, resolve_offset_groups
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, Linear, MaxPool2d, Module, Sequential

INPUT_KINDS = ("rgb", "depth")
CONV_KINDS = ("standard", "deformable")
FUSION_KINDS = ("mid", "early")
ENCODER_PRESETS = {"tiny": 4, "small": 8, "base": 16}

# Offset group counts: the paper's offset numbers, applied to the first
# convolution of each input stream and to every later one respectively.
# Layers whose channel count the group count does not divide fall back to
# the largest divisor below it.
OFFSET_GROUPS_INPUT = 3
OFFSET_GROUPS_REST = 8


@dataclass(frozen=True)
class ModelConfig:
    inputs: Tuple[str, ...] = ("rgb", "depth")
    outputs: Tuple[str, ...] = TRAIT_NAMES
    conv_kind: str = "standard"
    fusion: str = "mid"
    encoder: str = "small"
    head_hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        inputs = tuple(self.inputs)
        outputs = tuple(self.outputs)
        if not inputs or any(i not in INPUT_KINDS for i in inputs):
            raise ConfigError(
                f"inputs must be a non-empty subset of {INPUT_KINDS}, got {inputs}"
            )
        if len(set(inputs)) != len(inputs):
            raise ConfigError(f"duplicate inputs: {inputs}")
        if not outputs or any(o not in TRAIT_NAMES for o in outputs):
            raise ConfigError(
                f"outputs must be a non-empty subset of {TRAIT_NAMES}, got {outputs}"
            )
        if len(set(outputs)) != len(outputs):
            raise ConfigError(f"duplicate outputs: {outputs}")
        # Canonical ordering keeps hashes and checkpoints stable.
        object.__setattr__(
            self, "inputs", tuple(k for k in INPUT_KINDS if k in inputs)
        )
        object.__setattr__(
            self, "outputs", tuple(t for t in TRAIT_NAMES if t in outputs)
        )
        if self.conv_kind not in CONV_KINDS:
            raise ConfigError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.fusion == "early" and len(self.inputs) != 2:
            raise ConfigError("early fusion requires both rgb and depth inputs")
        if self.encoder not in ENCODER_PRESETS:
            raise ConfigError(
                f"encoder must be one of {sorted(ENCODER_PRESETS)}, got {self.encoder!r}"
            )
        if self.head_hidden < 1:
            raise ConfigError(f"head_hidden must be positive, got {self.head_hidden}")

    @property
    def width(self) -> int:
        return ENCODER_PRESETS[self.encoder]

    @property
    def family(self) -> str:
        multi_in = len(self.inputs) == 2
        multi_out = len(self.outputs) > 1
        return {
            (False, False): "SISO",
            (True, False): "MISO",
            (False, True): "SIMO",
            (True, True): "MIMO",
        }[(multi_in, multi_out)]

    def to_dict(self) -> dict:
        return {
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "conv_kind": self.conv_kind,
            "fusion": self.fusion,
            "encoder": self.encoder,
            "head_hidden": self.head_hidden,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {
            "inputs",
            "outputs",
            "conv_kind",
            "fusion",
            "encoder",
            "head_hidden",
            "seed",
        }
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown model config keys: {extra}")
        kwargs = dict(d)
        if "inputs" in kwargs:
            kwargs["inputs"] = tuple(kwargs["inputs"])
        if "outputs" in kwargs:
            kwargs["outputs"] = tuple(kwargs["outputs"])
        return cls(**kwargs)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


class BasicBlock(Module):
    """Two 3x3 convolutions with identity (or 1x1-projected) skip."""

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.downsample = Sequential(
                Conv2d(cin, cout, 1, stride, 0, bias=False, rng=rng),
                BatchNorm2d(cout),
            )
        else:
            self.downsample = None

    def forward(self, x: Tensor) -> Tensor:
        out = ops.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = self.downsample(x) if self.downsample is not None else x
        return ops.relu(ops.add(out, skip))


class ResNetEncoder(Module):
    """ResNet18-shaped encoder: stem, 4 stages x 2 blocks, global pool."""

    def __init__(self, in_channels: int, width: int, rng: np.random.Generator):
        super().__init__()
        w = width
        self.stem = Conv2d(in_channels, w, 7, 2, 3, bias=False, rng=rng)
        self.bn = BatchNorm2d(w)
        self.pool = MaxPool2d(3, 2, 1)
        self.layer1 = Sequential(BasicBlock(w, w, 1, rng), BasicBlock(w, w, 1, rng))
        self.layer2 = Sequential(BasicBlock(w, 2 * w, 2, rng), BasicBlock(2 * w, 2 * w, 1, rng))
        self.layer3 = Sequential(
            BasicBlock(2 * w, 4 * w, 2, rng), BasicBlock(4 * w, 4 * w, 1, rng)
        )
        self.layer4 = Sequential(
            BasicBlock(4 * w, 8 * w, 2, rng), BasicBlock(8 * w, 8 * w, 1, rng)
        )
        self.feature_dim = 8 * w

    def forward(self, x: Tensor) -> Tensor:
        h = self.pool(ops.relu(self.bn(self.stem(x))))
        h = self.layer4(self.layer3(self.layer2(self.layer1(h))))
        return ops.global_avg_pool(h)


class TraitRegressor(Module):
    """Configured regression model mapping (rgb, depth) to trait values."""

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self.config = config
        w = config.width
        if config.fusion == "early":
            self.encoder = ResNetEncoder(4, w, rng)
            feat = self.encoder.feature_dim
        else:
            feat = 0
            if "rgb" in config.inputs:
                self.rgb_encoder = ResNetEncoder(3, w, rng)
                feat += self.rgb_encoder.feature_dim
            if "depth" in config.inputs:
                self.depth_adapter = Conv2d(1, 3, 1, bias=True, rng=rng)
                self.depth_encoder = ResNetEncoder(3, w, rng)
                feat += self.depth_encoder.feature_dim
        self.fc1 = Linear(feat, config.head_hidden, rng=rng)
        self.fc2 = Linear(config.head_hidden, len(config.outputs), rng=rng)

    def _check_input(self, name: str, x, channels: int):
        if x is None:
            raise ConfigError(f"model was configured with {name!r} input but none was given")
        if x.ndim != 4 or x.shape[1] != channels:
            raise ShapeError(
                f"{name} input must be [N,{channels},H,W], got {tuple(x.shape)}"
            )

    def forward(self, rgb: Optional[Tensor] = None, depth: Optional[Tensor] = None) -> Tensor:
        cfg = self.config
        if "rgb" in cfg.inputs:
            self._check_input("rgb", rgb, 3)
        if "depth" in cfg.inputs:
            self._check_input("depth", depth, 1)
        if cfg.fusion == "early":
            feats = [self.encoder(ops.concat([rgb, depth], axis=1))]
        else:
            feats = []
            if "rgb" in cfg.inputs:
                feats.append(self.rgb_encoder(rgb))
            if "depth" in cfg.inputs:
                feats.append(self.depth_encoder(self.depth_adapter(depth)))
        h = feats[0] if len(feats) == 1 else ops.concat(feats, axis=1)
        h = ops.relu(h)
        h = ops.relu(self.fc1(h))
        return self.fc2(h)


def _input_layer_paths(model: TraitRegressor) -> set:
    """Dotted paths of the convolutions that consume raw model inputs."""
    cfg = model.config
    if cfg.fusion == "early":
        return {"encoder.stem"}
    paths = set()
    if "rgb" in cfg.inputs:
        paths.add("rgb_encoder.stem")
    if "depth" in cfg.inputs:
        paths.add("depth_adapter")
    return paths


def convert_model_to_deformable(model: TraitRegressor) -> TraitRegressor:
    """Swap every convolution for its deformable, function-preserving twin."""
    input_paths = _input_layer_paths(model)
    convs = [
        (name, mod)
        for name, mod in model.named_modules()
        if isinstance(mod, Conv2d)
    ]
    for name, conv in convs:
        requested = OFFSET_GROUPS_INPUT if name in input_paths else OFFSET_GROUPS_REST
        groups = resolve_offset_groups(conv.in_channels, requested)
        model.set_submodule(name, convert_conv_to_deformable(conv, groups))
    return model


def build_model(config: ModelConfig) -> TraitRegressor:
    """Seeded construction; deformable models start as exact twins of
    the standard build with the same seed."""
    rng = np.random.default_rng(config.seed)
    model = TraitRegressor(config, rng)
    if config.conv_kind == "deformable":
        convert_model_to_deformable(model)
    return model


def parameter_count(model: Module) -> int:
    return sum(p.size for p in model.parameters())


def enumerate_ablation(conv_kind: str, base: Optional[ModelConfig] = None) -> List[ModelConfig]:
    """The 18-model grid: 1 MIMO, 5 MISO, 2 SIMO, 10 SISO."""
    if conv_kind not in CONV_KINDS:
        raise ConfigError(f"conv_kind must be one of {CONV_KINDS}, got {conv_kind!r}")
    if base is None:
        base = ModelConfig()
    common = dict(
        conv_kind=conv_kind,
        fusion="mid",
        encoder=base.encoder,
        head_hidden=base.head_hidden,
        seed=base.seed,
    )
    configs = [ModelConfig(inputs=("rgb", "depth"), outputs=TRAIT_NAMES, **common)]
    for trait in TRAIT_NAMES:
        configs.append(ModelConfig(inputs=("rgb", "depth"), outputs=(trait,), **common))
    for kind in INPUT_KINDS:
        configs.append(ModelConfig(inputs=(kind,), outputs=TRAIT_NAMES, **common))
    for kind in INPUT_KINDS:
        for trait in TRAIT_NAMES:
            configs.append(ModelConfig(inputs=(kind,), outputs=(trait,), **common))
    return configs
