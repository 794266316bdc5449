"""Lightweight prototypical network (LPN) embedding backbone.

The network is three stages of Feature Extraction Building Blocks (FEBB)
and Reduction Blocks (RB)::

    stage 1: FEBB -> RB -> FEBB -> RB
    stage 2: FEBB -> RB
    stage 3: FEBB -> RB

Each FEBB stacks three Targeted Learning Blocks (TLB). A TLB runs three
parallel branches (depthwise-separable, grouped with residual, dilated) and
sums them. Every stage output is globally average pooled and passed through a
three-layer dense head; the three head outputs are concatenated and projected
to the embedding.

Any ``nn.Module`` mapping ``(B, 3, H, W)`` images to ``(B, D)`` vectors and
exposing ``embedding_dim`` can stand in for the LPN (see
:func:`build_backbone`).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
from torch import nn

CONFIG_SCHEMA = "lpn-backbone-config"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Raised for an invalid backbone configuration."""


class ShapeError(ValueError):
    """Raised when a tensor does not match the shape a block was built for."""


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 100
    in_channels: int = 3
    stage_channel_widths: tuple[int, int, int] = (64, 128, 256)
    fc_hidden_dim: int = 1024
    stage_feature_dim: int = 512
    embedding_dim: int = 512
    groups_branch_b: int = 4
    dilation_branch_c: int = 2
    dropout_rate: float = 0.3
    init_scheme: str = "fan_in"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.stage_channel_widths)
        object.__setattr__(self, "stage_channel_widths", widths)
        if len(widths) != 3:
            raise ConfigError(f"stage_channel_widths needs 3 entries, got {len(widths)}")
        for name in ("input_size", "in_channels", "fc_hidden_dim", "stage_feature_dim",
                     "embedding_dim", "groups_branch_b"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if any(w < 1 for w in widths):
            raise ConfigError("stage channel widths must be positive")
        for w in widths:
            if w % self.groups_branch_b:
                raise ConfigError(
                    f"groups_branch_b={self.groups_branch_b} does not divide width {w}")
        if self.dilation_branch_c < 2:
            raise ConfigError("dilation_branch_c must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.init_scheme != "fan_in":
            raise ConfigError(f"unknown init_scheme {self.init_scheme!r}")
        if self.input_size < 2:
            raise ConfigError("input_size must be at least 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channel_widths"] = list(self.stage_channel_widths)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"schema", "version"}
        if unknown:
            raise ConfigError(f"unknown backbone config fields: {sorted(unknown)}")
        kwargs = {k: v for k, v in data.items() if k in known}
        if "stage_channel_widths" in kwargs:
            kwargs["stage_channel_widths"] = tuple(kwargs["stage_channel_widths"])
        return cls(**kwargs)

    def save(self, path) -> None:
        payload = {"schema": CONFIG_SCHEMA, "version": CONFIG_VERSION, **self.to_dict()}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BackboneConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
            raise ConfigError(f"{path}: not a backbone config")
        if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"{path}: unsupported config version {data.get('version')}")
        return cls.from_dict(data)


DEFAULT_CONFIG_PATH = Path(__file__).parent / "data" / "lpn_default.json"


def default_config() -> BackboneConfig:
    """The frozen default configuration shipped with the package."""
    return BackboneConfig.load(DEFAULT_CONFIG_PATH)


def _check_channels(x: torch.Tensor, expected: int, where: str) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise ShapeError(f"{where}: expected (B, {expected}, H, W) input, got {tuple(x.shape)}")


class BranchA(nn.Module):
    """3x3 depthwise conv, 1x1 pointwise mix, BN, ReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.depthwise = nn.Conv2d(in_channels, in_channels, 3, padding=1,
                                   groups=in_channels, bias=False)
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        return torch.relu(self.bn(self.pointwise(self.depthwise(x))))


class BranchB(nn.Module):
    """1x1 reduction, 3x3 grouped conv with a residual around it, BN, ReLU.

    The residual adds the reduced tensor (the grouped conv's own input) so the
    shapes always agree, including in the channel-changing first TLB of a FEBB.
    """

    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        if out_channels % groups:
            raise ConfigError(f"groups={groups} does not divide {out_channels} channels")
        self.reduce = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.grouped = nn.Conv2d(out_channels, out_channels, 3, padding=1,
                                 groups=groups, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def pre_activation(self, x):
        r = self.reduce(x)
        return self.grouped(r) + r

    def forward(self, x):
        return torch.relu(self.bn(self.pre_activation(x)))


class BranchC(nn.Module):
    """1x1 pointwise conv, 3x3 dilated conv, BN, ReLU."""

    def __init__(self, in_channels: int, out_channels: int, dilation: int):
        super().__init__()
        if dilation < 2:
            raise ConfigError("dilation must be >= 2")
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.dilated = nn.Conv2d(out_channels, out_channels, 3, padding=dilation,
                                 dilation=dilation, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        return torch.relu(self.bn(self.dilated(self.pointwise(x))))


class TLB(nn.Module):
    """Targeted Learning Block: sum of three shape-preserving branches."""

    def __init__(self, in_channels: int, out_channels: int, groups: int = 4, dilation: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.branch_a = BranchA(in_channels, out_channels)
        self.branch_b = BranchB(in_channels, out_channels, groups)
        self.branch_c = BranchC(in_channels, out_channels, dilation)

    def forward(self, x):
        _check_channels(x, self.in_channels, "TLB")
        return self.branch_a(x) + self.branch_b(x) + self.branch_c(x)


class FEBB(nn.Module):
    """Three TLBs; the output of the third is added to the input of the second."""

    def __init__(self, in_channels: int, out_channels: int, groups: int = 4, dilation: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.tlb1 = TLB(in_channels, out_channels, groups, dilation)
        self.tlb2 = TLB(out_channels, out_channels, groups, dilation)
        self.tlb3 = TLB(out_channels, out_channels, groups, dilation)
        if self.tlb2.in_channels != self.tlb3.out_channels:
            raise ConfigError("FEBB residual requires TLB2 input and TLB3 output to match")

    def forward(self, x):
        _check_channels(x, self.in_channels, "FEBB")
        h = self.tlb1(x)
        return self.tlb3(self.tlb2(h)) + h


class ReductionBlock(nn.Module):
    """Stride-2 3x3 conv, BN, ReLU. Output spatial size is ceil(H/2) x ceil(W/2)."""

    min_input_size = 2

    def __init__(self, in_channels: int, out_channels: int | None = None):
        super().__init__()
        out_channels = out_channels or in_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        _check_channels(x, self.in_channels, "ReductionBlock")
        if min(x.shape[-2:]) < self.min_input_size:
            raise ShapeError(f"ReductionBlock: spatial size {tuple(x.shape[-2:])} too small")
        return torch.relu(self.bn(self.conv(x)))


def reduced_size(size: int) -> int:
    """Spatial size after one ReductionBlock (k=3, s=2, p=1)."""
    return (size + 2 * 1 - 3) // 2 + 1


class EmbeddingHead(nn.Module):
    """Three dense layers applied to a pooled stage output."""

    def __init__(self, in_features: int, hidden: int, out_features: int, dropout: float):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(in_features, hidden), nn.ReLU(), nn.Dropout(dropout),
            nn.Linear(hidden, hidden), nn.ReLU(), nn.Dropout(dropout),
            nn.Linear(hidden, out_features),
        )

    def forward(self, x):
        return self.layers(x)


class LPN(nn.Module):
    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config = config or BackboneConfig()
        w1, w2, w3 = config.stage_channel_widths
        g, d = config.groups_branch_b, config.dilation_branch_c
        self.stages = nn.ModuleList([
            nn.Sequential(FEBB(config.in_channels, w1, g, d), ReductionBlock(w1),
                          FEBB(w1, w1, g, d), ReductionBlock(w1)),
            nn.Sequential(FEBB(w1, w2, g, d), ReductionBlock(w2)),
            nn.Sequential(FEBB(w2, w3, g, d), ReductionBlock(w3)),
        ])
        self.heads = nn.ModuleList([
            EmbeddingHead(w, config.fc_hidden_dim, config.stage_feature_dim, config.dropout_rate)
            for w in (w1, w2, w3)
        ])
        self.projection = nn.Linear(3 * config.stage_feature_dim, config.embedding_dim)
        self.reset_parameters()

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
                if m.bias is not None:
                    bound = 1 / math.sqrt(nn.init._calculate_fan_in_and_fan_out(m.weight)[0])
                    nn.init.uniform_(m.bias, -bound, bound)
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()

    def stage_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage head outputs, each ``(B, stage_feature_dim)``."""
        s = self.config.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (self.config.in_channels, s, s):
            raise ShapeError(
                f"LPN expects (B, {self.config.in_channels}, {s}, {s}) input, got {tuple(x.shape)}")
        feats = []
        for stage, head in zip(self.stages, self.heads):
            x = stage(x)
            feats.append(head(x.mean(dim=(-2, -1))))
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.projection(torch.cat(self.stage_features(x), dim=1))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def param_count(config: BackboneConfig | None = None) -> int:
    """Exact number of learnable scalars in an LPN built from ``config``."""
    with torch.device("meta"):
        model = LPN(config or default_config())
    return count_parameters(model)


def resnet18_param_count(num_classes: int = 1000) -> int:
    """Learnable parameters of the standard 18-layer residual network.

    Counted from the architecture definition: 7x7 stem, four stages of two
    basic blocks (64, 128, 256, 512 channels), 1x1 projection shortcuts where
    the shape changes, and the final classifier.
    """
    def bn(c):
        return 2 * c

    total = 7 * 7 * 3 * 64 + bn(64)
    in_c = 64
    for out_c, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
        for block in range(2):
            s = stride if block == 0 else 1
            total += 9 * in_c * out_c + bn(out_c) + 9 * out_c * out_c + bn(out_c)
            if s != 1 or in_c != out_c:
                total += in_c * out_c + bn(out_c)
            in_c = out_c
    return total + 512 * num_classes + num_classes


def receptive_field(kernel_size: int, dilation: int = 1) -> int:
    """Single-layer receptive field (taps span) of a dilated convolution."""
    return dilation * (kernel_size - 1) + 1


class TorchvisionEmbedding(nn.Module):
    """Reference torchvision architecture with its classifier removed."""

    def __init__(self, arch: str = "resnet18", dropout_rate: float = 0.3, input_size: int = 100):
        super().__init__()
        import torchvision

        constructors = {"resnet18": torchvision.models.resnet18,
                        "densenet169": torchvision.models.densenet169}
        if arch not in constructors:
            raise ConfigError(f"unknown reference architecture {arch!r}")
        net = constructors[arch](weights=None)
        if arch == "resnet18":
            dim = net.fc.in_features
            net.fc = nn.Identity()
        else:
            dim = net.classifier.in_features
            net.classifier = nn.Identity()
        self.arch = arch
        self.input_size = input_size
        self.net = net
        self.dropout = nn.Dropout(dropout_rate)
        self._dim = dim

    @property
    def embedding_dim(self) -> int:
        return self._dim

    def forward(self, x):
        return self.dropout(self.net(x))


def build_backbone(name: str = "lpn", config: dict | BackboneConfig | None = None) -> nn.Module:
    """Construct a registered backbone by name (``lpn``, ``resnet18``, ``densenet169``)."""
    if name == "lpn":
        if isinstance(config, dict):
            config = BackboneConfig.from_dict(config)
        return LPN(config or default_config())
    if name in ("resnet18", "densenet169"):
        return TorchvisionEmbedding(name, **(config or {}))
    raise ConfigError(f"unknown backbone {name!r}")


def backbone_spec(model: nn.Module) -> tuple[str, dict]:
    """Name and constructor config needed to rebuild ``model``."""
    if isinstance(model, LPN):
        return "lpn", model.config.to_dict()
    if isinstance(model, TorchvisionEmbedding):
        return model.arch, {"dropout_rate": model.dropout.p, "input_size": model.input_size}
    raise ConfigError(f"cannot describe backbone of type {type(model).__name__}")


def input_size_of(model: nn.Module) -> int:
    if isinstance(model, LPN):
        return model.config.input_size
    return getattr(model, "input_size", 100)
