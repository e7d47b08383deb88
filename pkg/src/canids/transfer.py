"""Freeze-then-unfreeze transfer of a pretrained encoder to a small target dataset."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn as nn

from .evaluate import EvalReport, average_reports, evaluate_model
from .framing import FrameSet, split_train_test
from .model import EncoderConfig, ModelConfig, SupConResNet, as_input, init_weights
from .train import CLASSIFIER_DEFAULTS, TrainConfig, TrainLog, train_end_to_end, train_linear_classifier

log = logging.getLogger(__name__)

MODES = ("random", "ce", "supcon")
MODE_NAMES = {"random": "Random", "ce": "CE ResNet", "supcon": "SupCon ResNet"}

HEAD_DEFAULTS = CLASSIFIER_DEFAULTS
FINETUNE_DEFAULTS = CLASSIFIER_DEFAULTS.replace(lr=CLASSIFIER_DEFAULTS.lr / 10)


class TransferError(ValueError):
    pass


@dataclass
class TransferResult:
    model: SupConResNet
    logs: list[TrainLog] = field(default_factory=list)


@torch.no_grad()
def reestimate_batchnorm(encoder: nn.Module, frames, batch_size: int = 256) -> None:
    """Replace BN running statistics with cumulative averages over ``frames``.

    Only buffers change; learnable parameters are left bit-identical.
    """
    bns = [m for m in encoder.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    encoder.train()
    try:
        for i in range(0, len(frames), batch_size):
            chunk = frames[i:i + batch_size]
            if len(chunk) > 1:
                encoder(as_input(chunk))
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom
        encoder.eval()


def target_model_from(source: SupConResNet, labels, seed: int = 0,
                      encoder: EncoderConfig | None = None) -> SupConResNet:
    """Fresh target model (new head sized to ``labels``) carrying ``source``'s encoder weights.

    ``encoder`` is the target architecture; by default the source's own.
    """
    cfg = ModelConfig(tuple(labels), encoder or source.config.encoder, projector=None)
    if cfg.encoder_fingerprint() != source.config.encoder_fingerprint():
        raise TransferError("source encoder architecture does not match the target model")
    model = init_weights(cfg, seed)
    model.encoder.load_state_dict(copy.deepcopy(source.encoder.state_dict()))
    return model


def transfer_finetune(source: SupConResNet, target_train: FrameSet,
                      cfg_head: TrainConfig = HEAD_DEFAULTS,
                      cfg_finetune: TrainConfig | None = None,
                      reestimate_bn: bool = True) -> TransferResult:
    """Stage 1: train a new head on the frozen source encoder (after re-estimating
    batch-norm statistics on target frames). Stage 2: unfreeze everything and
    fine-tune at ``cfg_finetune.lr`` (default a tenth of the head rate)."""
    if len(target_train) == 0:
        raise TransferError("target training set is empty")
    if cfg_finetune is None:
        cfg_finetune = cfg_head.replace(lr=cfg_head.lr / 10)
    model = target_model_from(source, target_train.label_space, seed=cfg_head.seed)
    if reestimate_bn:
        reestimate_batchnorm(model.encoder, target_train.matrices)
    model, head_log = train_linear_classifier(model, target_train, cfg_head)
    model, ft_log = train_end_to_end(model, target_train, cfg_finetune, stage="finetune")
    return TransferResult(model, [head_log, ft_log])


def train_from_scratch(target_train: FrameSet, cfg: TrainConfig) -> TransferResult:
    model = init_weights(ModelConfig(tuple(target_train.label_space), projector=None), cfg.seed)
    model, trace = train_end_to_end(model, target_train, cfg, stage="random")
    return TransferResult(model, [trace])


@dataclass
class TransferSettings:
    head: TrainConfig = HEAD_DEFAULTS
    finetune: TrainConfig = FINETUNE_DEFAULTS
    # Random-init baseline gets the same number of end-to-end epochs as both
    # transfer stages combined, at the head learning rate.
    scratch: TrainConfig | None = None

    def scratch_config(self) -> TrainConfig:
        if self.scratch is not None:
            return self.scratch
        return self.head.replace(epochs=self.head.epochs + self.finetune.epochs)

    def seeded(self, seed: int) -> "TransferSettings":
        return TransferSettings(self.head.replace(seed=seed), self.finetune.replace(seed=seed),
                                self.scratch_config().replace(seed=seed))


def run_mode(mode: str, target_train: FrameSet, pretrained: Mapping[str, SupConResNet],
             settings: TransferSettings) -> TransferResult:
    if mode == "random":
        return train_from_scratch(target_train, settings.scratch_config())
    if mode not in MODES:
        raise TransferError(f"unknown pretrained mode {mode!r}")
    if pretrained.get(mode) is None:
        raise TransferError(f"mode {mode!r} needs a pretrained checkpoint")
    return transfer_finetune(pretrained[mode], target_train, settings.head, settings.finetune)


def compare_transfer_modes(target_train: FrameSet, target_test: FrameSet,
                           pretrained: Mapping[str, SupConResNet | None],
                           modes=MODES, runs: int = 1, seed: int = 0,
                           settings: TransferSettings | None = None) -> dict[str, EvalReport]:
    """Train and evaluate every mode on a fixed split, ``runs`` seeds each.

    Returns mode display name -> averaged report.
    """
    if runs < 1:
        raise ValueError("runs must be at least 1")
    settings = settings or TransferSettings()
    for mode in modes:
        if mode != "random" and pretrained.get(mode) is None:
            raise TransferError(f"mode {mode!r} needs a pretrained checkpoint")
    out = {}
    for mode in modes:
        reports = []
        for k in range(runs):
            res = run_mode(mode, target_train, pretrained, settings.seeded(seed + k))
            rep = evaluate_model(res.model, target_test)
            rep.meta.update(mode=mode, seed=seed + k)
            reports.append(rep)
        out[MODE_NAMES[mode]] = average_reports(reports)
    return out


def transfer_protocol(target: FrameSet, pretrained: Mapping[str, SupConResNet | None],
                      modes=MODES, runs: int = 5, base_seed: int = 0, train_fraction: float = 0.7,
                      settings: TransferSettings | None = None) -> dict[str, EvalReport]:
    """Fresh split + train + evaluate per run for every mode; averages over runs."""
    per_mode: dict[str, list[EvalReport]] = {MODE_NAMES[m]: [] for m in modes}
    for k in range(runs):
        seed = base_seed + k
        train, test = split_train_test(target, train_fraction, seed)
        table = compare_transfer_modes(train, test, pretrained, modes, runs=1, seed=seed,
                                       settings=settings)
        for name, rep in table.items():
            per_mode[name].append(rep.runs[0])
    return {name: average_reports(reps) for name, reps in per_mode.items()}
