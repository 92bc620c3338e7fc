"""Heatmap network: frozen ResNet50 encoder, nearest-neighbour upsampling chain
with skip concatenation, and a 1x1 sigmoid head after each upsampling block."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn as nn
import torchvision

from .dataset import KeypointSchema, load_schema, save_schema

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
BACKBONE_STRIDE = 32
LEAKY_SLOPE = 0.01
# channels of the backbone activation at stride 16, 8, 4, 2 (head sizes 14, 28, 56, 112 at 224)
SKIP_CHANNELS = (1024, 512, 256, 64)
WEIGHTS_ENV = "KPFORGE_BACKBONE_WEIGHTS"


class ModelConfigError(ValueError):
    pass


class MissingPretrainedWeightsError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 224
    num_upsample_levels: int = 5
    base_filters: int = 256
    dropout_rate: float = 0.2
    num_channels: int = 1
    intermediate_supervision: bool = True
    backbone_frozen: bool = True

    def __post_init__(self):
        if self.input_size <= 0 or self.input_size % BACKBONE_STRIDE:
            raise ModelConfigError(f"input_size must be a positive multiple of {BACKBONE_STRIDE}, "
                                   f"got {self.input_size}")
        if not 1 <= self.num_upsample_levels <= 5:
            raise ModelConfigError(f"num_upsample_levels must be in [1, 5], got {self.num_upsample_levels}")
        b = self.base_filters
        if b < 2 ** self.num_upsample_levels or b & (b - 1):
            raise ModelConfigError(f"base_filters must be a power of two >= 2**levels, got {b}")
        if not 0 <= self.dropout_rate < 1:
            raise ModelConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_channels < 1:
            raise ModelConfigError(f"num_channels must be >= 1, got {self.num_channels}")

    @classmethod
    def for_variant(cls, variant: str, num_channels: int, input_size: int = 224, **kw) -> "ModelConfig":
        """``ihm224`` (5 levels), ``ihm56`` (3 levels) or ``hm`` (5 levels, final head only)."""
        presets = {
            "ihm224": dict(num_upsample_levels=5, intermediate_supervision=True),
            "ihm56": dict(num_upsample_levels=3, intermediate_supervision=True),
            "hm": dict(num_upsample_levels=5, intermediate_supervision=False),
        }
        if variant not in presets:
            raise ModelConfigError(f"unknown variant {variant!r}; expected one of {sorted(presets)}")
        return cls(input_size=input_size, num_channels=num_channels, **{**presets[variant], **kw})

    @property
    def filters(self) -> list[int]:
        return [self.base_filters >> k for k in range(self.num_upsample_levels)]

    @property
    def level_sizes(self) -> list[int]:
        """Spatial size of every upsampling block output, smallest first."""
        return [self.input_size // 16 * 2 ** k for k in range(self.num_upsample_levels)]

    @property
    def head_sizes(self) -> list[int]:
        return self.level_sizes if self.intermediate_supervision else self.level_sizes[-1:]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ModelConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**data)


def nearest_upsample(x: torch.Tensor) -> torch.Tensor:
    return nn.functional.interpolate(x, scale_factor=2, mode="nearest")


class UpsampleBlock(nn.Module):
    """2x nearest upsample, optional skip concat, then two conv-BN-LeakyReLU-dropout units."""

    def __init__(self, in_channels: int, skip_channels: int, filters: int, dropout: float):
        super().__init__()
        self.skip_channels = skip_channels
        layers = []
        c = in_channels + skip_channels
        for _ in range(2):
            layers += [nn.Conv2d(c, filters, 3, padding=1), nn.BatchNorm2d(filters),
                       nn.LeakyReLU(LEAKY_SLOPE), nn.Dropout(dropout)]
            c = filters
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, skip: torch.Tensor | None = None) -> torch.Tensor:
        x = nearest_upsample(x)
        if self.skip_channels:
            if skip is None:
                raise ValueError("this block expects a skip connection")
            if skip.shape[-2:] != x.shape[-2:]:
                raise ValueError(f"skip size {tuple(skip.shape[-2:])} does not match upsampled "
                                 f"size {tuple(x.shape[-2:])}")
            x = torch.cat([x, skip], dim=1)
        elif skip is not None:
            raise ValueError("this block takes no skip connection")
        return self.body(x)


def upsample_block(features: torch.Tensor, skip: torch.Tensor | None, filters: int,
                   dropout: float = 0.2) -> torch.Tensor:
    """Functional form with freshly initialised weights; mainly for shape checks."""
    block = UpsampleBlock(features.shape[1], 0 if skip is None else skip.shape[1], filters, dropout)
    block.eval()
    with torch.no_grad():
        return block(features, skip)


class ResNetEncoder(nn.Module):
    """ResNet50 trunk returning activations at strides 2, 4, 8, 16, 32."""

    def __init__(self, resnet: torchvision.models.ResNet, frozen: bool = True):
        super().__init__()
        self.stem = nn.Sequential(resnet.conv1, resnet.bn1, resnet.relu)
        self.maxpool = resnet.maxpool
        self.layer1, self.layer2 = resnet.layer1, resnet.layer2
        self.layer3, self.layer4 = resnet.layer3, resnet.layer4
        self.frozen = frozen
        if frozen:
            for p in self.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        # frozen layers keep their batch-norm statistics
        return super().train(mode and not self.frozen)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        s2 = self.stem(x)
        s4 = self.layer1(self.maxpool(s2))
        s8 = self.layer2(s4)
        s16 = self.layer3(s8)
        s32 = self.layer4(s16)
        return [s2, s4, s8, s16, s32]


class HeatmapNet(nn.Module):
    def __init__(self, config: ModelConfig, resnet: torchvision.models.ResNet):
        super().__init__()
        self.config = config
        self.backbone = ResNetEncoder(resnet, frozen=config.backbone_frozen)
        blocks, heads = [], []
        in_ch = 2048
        for k, filters in enumerate(config.filters):
            skip_ch = SKIP_CHANNELS[k] if k < len(SKIP_CHANNELS) else 0
            blocks.append(UpsampleBlock(in_ch, skip_ch, filters, config.dropout_rate))
            last = k == config.num_upsample_levels - 1
            if config.intermediate_supervision or last:
                heads.append(nn.Conv2d(filters, config.num_channels, 1, bias=True))
            in_ch = filters
        self.blocks = nn.ModuleList(blocks)
        self.heads = nn.ModuleList(heads)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        size = self.config.input_size
        if images.ndim != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != (size, size):
            raise ValueError(f"expected a (B, 3, {size}, {size}) batch, got {tuple(images.shape)}")
        feats = self.backbone(images)
        skips = feats[3::-1]  # stride 16, 8, 4, 2
        x = feats[4]
        outputs = []
        head_iter = iter(self.heads)
        for k, block in enumerate(self.blocks):
            x = block(x, skips[k] if k < len(skips) else None)
            if self.config.intermediate_supervision or k == len(self.blocks) - 1:
                outputs.append(torch.sigmoid(next(head_iter)(x)))
        return outputs


def load_resnet50(weights: str | Path | None = "imagenet",
                  allow_random_backbone: bool = False) -> torchvision.models.ResNet:
    """ResNet50 with ImageNet weights.

    ``weights`` is ``"imagenet"`` (torchvision cache/download, or the file named
    by $KPFORGE_BACKBONE_WEIGHTS), a path to a state dict, or None for random
    initialisation. Random weights, including the fallback when ImageNet
    weights cannot be obtained, require ``allow_random_backbone``.
    """
    resnet = torchvision.models.resnet50(weights=None)
    if weights == "imagenet" and os.environ.get(WEIGHTS_ENV):
        weights = os.environ[WEIGHTS_ENV]
    if weights is None:
        if not allow_random_backbone:
            raise MissingPretrainedWeightsError(
                "refusing to build a randomly initialised backbone; pass allow_random_backbone=True")
        return resnet
    if weights == "imagenet":
        try:
            state = torchvision.models.ResNet50_Weights.IMAGENET1K_V1.get_state_dict(progress=False)
        except Exception as exc:  # offline, proxy, corrupt cache
            if not allow_random_backbone:
                raise MissingPretrainedWeightsError(
                    f"could not obtain ImageNet ResNet50 weights ({exc}); set ${WEIGHTS_ENV} to a "
                    "local state dict or allow a random backbone") from exc
            warnings.warn(f"ImageNet weights unavailable ({exc}); using a random backbone")
            return resnet
    else:
        path = Path(weights)
        if not path.exists():
            raise MissingPretrainedWeightsError(f"backbone weights file not found: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
    resnet.load_state_dict(state)
    return resnet


def build_model(config: ModelConfig, backbone_weights: str | Path | None = "imagenet",
                allow_random_backbone: bool = False) -> HeatmapNet:
    return HeatmapNet(config, load_resnet50(backbone_weights, allow_random_backbone))


def forward(model: HeatmapNet, images: torch.Tensor, train_mode: bool = False) -> list[torch.Tensor]:
    model.train(train_mode)
    if train_mode:
        return model(images)
    with torch.no_grad():
        return model(images)


def preprocess(images, input_size: int) -> torch.Tensor:
    """BGR uint8 image(s) -> normalised (B, 3, S, S) float tensor."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    batch = []
    for img in images:
        if img.shape[:2] != (input_size, input_size):
            img = cv2.resize(img, (input_size, input_size), interpolation=cv2.INTER_AREA)
        rgb = img[:, :, ::-1].astype(np.float32) / 255.0
        batch.append((rgb - IMAGENET_MEAN) / IMAGENET_STD)
    arr = np.stack(batch).astype(np.float32).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


def parameter_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# checkpoints -------------------------------------------------------------

WEIGHTS_FILE = "weights.pt"


def save_checkpoint(model: HeatmapNet, schema: KeypointSchema, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / WEIGHTS_FILE)
    (directory / "config.json").write_text(json.dumps(model.config.to_dict(), indent=2) + "\n",
                                           encoding="utf-8")
    save_schema(schema, directory / "schema.json")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[HeatmapNet, KeypointSchema]:
    directory = Path(directory)
    for name in (WEIGHTS_FILE, "config.json", "schema.json"):
        if not (directory / name).exists():
            raise CheckpointError(f"checkpoint {directory} is missing {name}")
    config = ModelConfig.from_dict(json.loads((directory / "config.json").read_text(encoding="utf-8")))
    schema = load_schema(directory / "schema.json")
    if schema.num_channels != config.num_channels:
        raise CheckpointError(f"schema has {schema.num_channels} channels, config says "
                              f"{config.num_channels}")
    model = build_model(config, backbone_weights=None, allow_random_backbone=True)
    state = torch.load(directory / WEIGHTS_FILE, map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"weights in {directory} do not match config.json: {exc}") from exc
    model.eval()
    return model, schema
