"""Training loops: SupCon encoder pretraining, linear head, and the CE baseline."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .framing import FrameSet
from .losses import cross_entropy_loss, supcon_loss
from .model import ModelConfig, SupConResNet, as_input, init_weights

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    lr: float = 0.05
    epochs: int = 150
    temperature: float = 0.07
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        if self.schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1 + math.cos(math.pi * epoch / self.epochs))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Parse ``key=value`` lines (``#`` comments allowed) over ``base`` defaults."""
        base = base or cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        changes = {}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {n}: unknown key {key!r}")
            kind = types[key]
            changes[key] = int(value) if kind in (int, "int") else \
                float(value) if kind in (float, "float") else value
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_file(cls, path, base: "TrainConfig | None" = None) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), base)


SUPCON_DEFAULTS = TrainConfig()
CLASSIFIER_DEFAULTS = TrainConfig(batch_size=256, lr=0.01, epochs=20)
CE_BASELINE_DEFAULTS = TrainConfig(batch_size=256, lr=0.001, epochs=150)
# Batch-size sweep for the SupCon stage: batch -> learning rate.
BATCH_PRESETS = {512: 0.05, 1024: 0.05, 2048: 0.1, 4096: 0.1}


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    stage: str
    epochs: list[EpochLog] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def record(self, epoch, loss, lr, seconds):
        self.epochs.append(EpochLog(epoch, float(loss), float(lr), float(seconds)))
        log.info("%s epoch %d loss=%.5f lr=%.5f (%.1fs)", self.stage, epoch, loss, lr, seconds)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_csv(self, sink=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr", "seconds"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.loss), repr(e.lr), f"{e.seconds:.3f}"])
        text = buf.getvalue()
        if isinstance(sink, (str, os.PathLike)):
            with open(sink, "w", encoding="utf-8") as fh:
                fh.write(text)
        elif sink is not None:
            sink.write(text)
        return text


def _optimizer(params, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = perm[i:i + batch_size]
        if len(idx) >= min_size:
            yield idx


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int):
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"{stage}: non-finite loss {loss.item()} at epoch {epoch}, step {step}")


def _require_frames(frames: FrameSet):
    if len(frames) == 0:
        raise ValueError("training set is empty")


def train_supcon_encoder(train: FrameSet, cfg: TrainConfig = SUPCON_DEFAULTS,
                         model: SupConResNet | None = None) -> tuple[SupConResNet, TrainLog]:
    """Train encoder + projector with the SupCon loss (mean over anchors).

    Tail batches of one frame are dropped.
    """
    _require_frames(train)
    torch.manual_seed(cfg.seed)
    if model is None:
        model = init_weights(ModelConfig(tuple(train.label_space)), cfg.seed)
    if model.projector is None:
        raise ValueError("SupCon training needs a model with a projector")
    params = list(model.encoder.parameters()) + list(model.projector.parameters())
    opt = _optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    labels = torch.as_tensor(train.labels)
    trace = TrainLog("supcon")
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        _set_lr(opt, lr)
        model.train()
        total, count = 0.0, 0
        for step, idx in enumerate(_batches(len(train), cfg.batch_size, rng, min_size=2)):
            x = as_input(train.matrices[idx])
            z = model.project(model.encoder(x))
            loss = supcon_loss(z, labels[idx], cfg.temperature, reduction="mean", check_norm=False)
            _check_finite(loss, "supcon", epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        trace.record(epoch + 1, total / max(count, 1), lr, time.perf_counter() - t0)
    model.eval()
    return model, trace


@torch.no_grad()
def extract_features(model: SupConResNet, frames: np.ndarray, batch_size: int = 1024) -> torch.Tensor:
    """Eval-mode encoder representations r."""
    model.encoder.eval()
    out = [model.encoder(as_input(frames[i:i + batch_size])) for i in range(0, len(frames), batch_size)]
    if not out:
        return torch.zeros(0, model.config.encoder.representation_dim)
    return torch.cat(out)


def train_linear_classifier(model: SupConResNet, train: FrameSet,
                            cfg: TrainConfig = CLASSIFIER_DEFAULTS) -> tuple[SupConResNet, TrainLog]:
    """Fit the linear head on frozen, eval-mode encoder features; the encoder is untouched."""
    _require_frames(train)
    if model.classifier.in_features != model.config.encoder.representation_dim:
        raise ValueError("classifier width does not match encoder representation")
    if model.config.num_classes != len(train.label_space):
        raise ValueError("classifier output width does not match the label space")
    torch.manual_seed(cfg.seed)
    for p in model.encoder.parameters():
        p.requires_grad_(False)
    try:
        feats = extract_features(model, train.matrices)
        labels = torch.as_tensor(train.labels)
        opt = _optimizer(model.classifier.parameters(), cfg)
        rng = np.random.default_rng(cfg.seed)
        trace = TrainLog("classifier")
        model.classifier.train()
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = cfg.lr_at(epoch)
            _set_lr(opt, lr)
            total = 0.0
            for step, idx in enumerate(_batches(len(train), cfg.batch_size, rng)):
                loss = cross_entropy_loss(model.classifier(feats[idx]), labels[idx])
                _check_finite(loss, "classifier", epoch, step)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            trace.record(epoch + 1, total / len(train), lr, time.perf_counter() - t0)
    finally:
        for p in model.encoder.parameters():
            p.requires_grad_(True)
    model.eval()
    return model, trace


def train_end_to_end(model: SupConResNet, train: FrameSet, cfg: TrainConfig,
                     stage: str = "ce") -> tuple[SupConResNet, TrainLog]:
    """Cross-entropy over encoder + classifier together (projector unused).

    Tail batches are kept, including a single leftover frame.
    """
    _require_frames(train)
    torch.manual_seed(cfg.seed)
    params = list(model.encoder.parameters()) + list(model.classifier.parameters())
    opt = _optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    labels = torch.as_tensor(train.labels)
    trace = TrainLog(stage)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        _set_lr(opt, lr)
        model.train()
        total = 0.0
        for step, idx in enumerate(_batches(len(train), cfg.batch_size, rng)):
            loss = cross_entropy_loss(model(as_input(train.matrices[idx])), labels[idx])
            _check_finite(loss, stage, epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        trace.record(epoch + 1, total / len(train), lr, time.perf_counter() - t0)
    model.eval()
    return model, trace


def train_ce_baseline(train: FrameSet, cfg: TrainConfig = CE_BASELINE_DEFAULTS,
                      model: SupConResNet | None = None) -> tuple[SupConResNet, TrainLog]:
    """End-to-end CE training of the same encoder with a linear head and no projector."""
    if model is None:
        model = init_weights(ModelConfig(tuple(train.label_space), projector=None), cfg.seed)
    return train_end_to_end(model, train, cfg, stage="ce")


def frozen_snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in module.named_parameters()}


def bitwise_equal(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
