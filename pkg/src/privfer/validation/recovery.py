"""White-box recovery attack: an image-to-image model trained to invert the
anonymiser with an SSIM objective."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ..data_model import DatasetManifest, FaceRecord
from ..errors import ContractError, DomainError, TrainingError
from ..models import apply_image_model, seed_everything, to_tensor
from ..training import FitConfig
from .metrics import SSIM_WINDOW, ssim_torch

log = logging.getLogger(__name__)

RECOVERABLE = ("pp", "dpp")


@dataclass
class RecoveryModel:
    network: nn.Module
    source_variant: str

    def __post_init__(self):
        if self.source_variant not in RECOVERABLE:
            raise DomainError(f"recovery source must be one of {RECOVERABLE}, got {self.source_variant!r}")

    @property
    def output_variant(self) -> str:
        return self.source_variant + "_recovered"


def aligned_pairs(
    original: DatasetManifest, anonymized: DatasetManifest
) -> list[tuple[FaceRecord, FaceRecord]]:
    """(target original, source anonymised) record pairs matched on (video, frame, track)."""
    src = anonymized.by_face()
    pairs = []
    for rec in original.records:
        hit = src.get(rec.face_key)
        if hit is None:
            raise DomainError(f"no {anonymized.variant} crop for face {rec.face_key}")
        pairs.append((rec, hit))
    return pairs


def check_alignment(pairs) -> None:
    for tgt, src in pairs:
        if tgt.face_key != src.face_key:
            raise DomainError(f"misaligned pair {tgt.face_key} vs {src.face_key}")


def train_recovery(
    targets: np.ndarray,
    sources: np.ndarray,
    network: nn.Module,
    source_variant: str,
    config: FitConfig,
    history: list | None = None,
) -> RecoveryModel:
    """Fit ``network(source) ~ target`` by minimising ``1 - SSIM``.

    ``targets`` and ``sources`` are aligned uint8 arrays (N, H, W, 3); use
    :func:`aligned_pairs` / :func:`check_alignment` to build them from records.
    """
    targets, sources = np.asarray(targets), np.asarray(sources)
    if len(targets) == 0:
        raise DomainError("train_recovery needs at least one pair")
    if targets.shape != sources.shape:
        raise DomainError(f"misaligned pairs: targets {targets.shape} vs sources {sources.shape}")
    if min(targets.shape[1:3]) < SSIM_WINDOW:
        raise DomainError(f"crops must be at least {SSIM_WINDOW}px for the SSIM objective")
    model = RecoveryModel(network, source_variant)
    g = seed_everything(config.seed)
    y_all, x_all = to_tensor(targets), to_tensor(sources)
    opt = torch.optim.Adam(network.parameters(), lr=config.learning_rate)
    network.train()
    n = len(x_all)
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=g)
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = perm[i : i + config.batch_size]
            loss = (1.0 - ssim_torch(network(x_all[idx]), y_all[idx])).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"recovery loss diverged at epoch {epoch}, batch {i // config.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if history is not None:
            history.append({"epoch": epoch, "ssim_loss": total / n})
        log.debug("recovery[%s] epoch %d loss=%.5f", source_variant, epoch, total / n)
    network.eval()
    return model


def recover(model: RecoveryModel, images: np.ndarray, variant: str) -> tuple[np.ndarray, str]:
    """Apply the attack to crops of ``variant``; returns (crops, recovered variant tag)."""
    if variant != model.source_variant:
        raise ContractError(
            f"recovery model was trained on <original,{model.source_variant}> but got {variant!r} input"
        )
    return apply_image_model(model.network, images), model.output_variant
