"""Compact ResNet-18 encoder with projector and linear classifier heads."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .framing import WINDOW


@dataclass(frozen=True)
class EncoderConfig:
    """ResNet-18 layout with every channel count divided by four."""

    in_channels: int = 1
    input_size: int = WINDOW
    stem_channels: int = 16
    widths: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 2

    @property
    def representation_dim(self) -> int:
        return self.widths[-1]

    def shape_chain(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) after the stem and each stage."""
        size = self.input_size
        chain = [(self.stem_channels, size, size)]
        for stage, width in enumerate(self.widths):
            if stage > 0:
                size = math.ceil(size / 2)
            chain.append((width, size, size))
        return chain


@dataclass(frozen=True)
class ProjectorConfig:
    hidden_dim: int = 128
    out_dim: int = 128


@dataclass(frozen=True)
class ModelConfig:
    labels: tuple[str, ...]
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig | None = field(default_factory=ProjectorConfig)

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "encoder": asdict(self.encoder),
                "projector": asdict(self.projector) if self.projector else None}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = dict(d["encoder"])
        enc["widths"] = tuple(enc["widths"])
        proj = ProjectorConfig(**d["projector"]) if d.get("projector") else None
        return cls(tuple(d["labels"]), EncoderConfig(**enc), proj)

    def fingerprint(self) -> str:
        """Hash of the architecture (class names excluded, class count included)."""
        arch = {"encoder": asdict(self.encoder),
                "projector": asdict(self.projector) if self.projector else None,
                "num_classes": self.num_classes}
        return _hash(arch)

    def encoder_fingerprint(self) -> str:
        return _hash({"encoder": asdict(self.encoder)})


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class ResidualBlock(nn.Module):
    """y = ReLU(F(x) + shortcut(x)), F = conv-BN-ReLU-conv-BN."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, config.stem_channels, 3, 1, 1, bias=False),
            nn.BatchNorm2d(config.stem_channels),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = config.stem_channels
        for i, width in enumerate(config.widths):
            blocks = [ResidualBlock(in_ch, width, 1 if i == 0 else 2)]
            blocks += [ResidualBlock(width, width) for _ in range(config.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = width
        self.stages = nn.Sequential(*stages)
        chain = config.shape_chain()
        assert len(chain) == len(config.widths) + 1 and chain[-1][1] >= 1, chain
        assert sum(1 for _ in self.modules() if isinstance(_, ResidualBlock)) == \
            len(config.widths) * config.blocks_per_stage

    def forward(self, x):
        x = self.stages(self.stem(x))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


class Projector(nn.Module):
    """One-hidden-layer MLP; output rows have unit L2 norm."""

    def __init__(self, in_dim: int, config: ProjectorConfig):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, config.hidden_dim)
        self.fc2 = nn.Linear(config.hidden_dim, config.out_dim)

    def forward(self, r):
        return F.normalize(self.fc2(F.relu(self.fc1(r))), dim=1)


class SupConResNet(nn.Module):
    """Encoder + optional projector + linear classifier.

    The classifier reads the raw representation; the projector reads its
    L2-normalised copy.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config.encoder)
        dim = config.encoder.representation_dim
        self.projector = Projector(dim, config.projector) if config.projector else None
        self.classifier = nn.Linear(dim, config.num_classes)

    @property
    def labels(self) -> tuple[str, ...]:
        return self.config.labels

    def project(self, r):
        if self.projector is None:
            raise RuntimeError("model has no projector")
        return self.projector(F.normalize(r, dim=1))

    def forward(self, x):
        return self.classifier(self.encoder(x))


def init_weights(config: ModelConfig, seed: int = 0) -> SupConResNet:
    """Build a model with fan-in scaled random weights, deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    model = SupConResNet(config)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            nn.init.uniform_(m.weight, -bound, bound, generator=gen)
            nn.init.uniform_(m.bias, -bound, bound, generator=gen)
    return model


def as_input(frames) -> torch.Tensor:
    """(B, 29, 29) or (B, 1, 29, 29) binary array -> float32 tensor (B, 1, 29, 29)."""
    x = torch.as_tensor(np.asarray(frames) if not isinstance(frames, torch.Tensor) else frames)
    if x.dim() == 3:
        x = x.unsqueeze(1)
    if x.dim() != 4 or tuple(x.shape[1:]) != (1, WINDOW, WINDOW):
        raise ValueError(f"expected frames of shape (B, 29, 29), got {tuple(x.shape)}")
    return x.to(torch.float32)


def encoder_forward(model: SupConResNet, frames, mode: str = "eval") -> torch.Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.encoder.train(mode == "train")
    x = as_input(frames)
    if mode == "eval":
        with torch.no_grad():
            return model.encoder(x)
    return model.encoder(x)


def _check_rep(model: SupConResNet, r: torch.Tensor) -> torch.Tensor:
    r = torch.as_tensor(r, dtype=torch.float32)
    dim = model.config.encoder.representation_dim
    if r.dim() != 2 or r.shape[1] != dim:
        raise ValueError(f"expected representations of shape (B, {dim}), got {tuple(r.shape)}")
    return r


def projector_forward(model: SupConResNet, r) -> torch.Tensor:
    return model.project(_check_rep(model, r))


def classifier_forward(model: SupConResNet, r) -> torch.Tensor:
    return model.classifier(_check_rep(model, r))


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


@torch.no_grad()
def predict(model: SupConResNet, frames, batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode argmax classes and softmax scores."""
    model.eval()
    preds, probs = [], []
    frames = np.asarray(frames)
    for i in range(0, len(frames), batch_size):
        p = F.softmax(model(as_input(frames[i:i + batch_size])), dim=1)
        preds.append(p.argmax(1).numpy())
        probs.append(p.numpy())
    if not preds:
        return np.zeros(0, np.int64), np.zeros((0, model.config.num_classes), np.float32)
    return np.concatenate(preds), np.concatenate(probs)
