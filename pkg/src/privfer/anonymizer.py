"""Training the anonymiser f_pp against a frozen identity embedder f_e.

Two phases: L1 reconstruction pre-training, then the weighted
triplet + BCE objective on knowledge-prior batches.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .batch_builder import bce_labels, n_triplets, triplet_views
from .errors import ContractError, DomainError, TrainingError
from .models import apply_image_model, is_frozen, seed_everything, to_tensor

log = logging.getLogger(__name__)

BCE_EPS = 1e-6


@dataclass
class TrainConfig:
    alpha: float = 0.01
    epochs: int = 400
    triplet_margin: float = 0.2
    learning_rate: float = 1e-3
    seed: int = 42
    batch_k: int = 5
    pretrain_epochs: int = 20
    pretrain_batch_size: int = 32

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.triplet_margin <= 0:
            raise DomainError(f"triplet_margin must be positive, got {self.triplet_margin}")
        if self.learning_rate < 0 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise DomainError("learning_rate and epoch counts must be non-negative")


def cosine_row(features: torch.Tensor) -> torch.Tensor:
    """Cosine of every face after the first with the extra face at index 0."""
    n_triplets(features.shape[0])
    return F.cosine_similarity(features[1:], features[:1].expand_as(features[1:]), dim=1, eps=1e-12)


def combined_loss(
    features: torch.Tensor,
    labels,
    alpha: float,
    margin: float = 0.2,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(alpha * l_tri + (1 - alpha) * l_bce, l_tri, l_bce)`` for one batch of embeddings.

    The triplet term uses cosine distance ``1 - cos``; BCE is taken on
    ``(1 + cos) / 2`` clipped to ``[BCE_EPS, 1 - BCE_EPS]``.
    """
    size = features.shape[0]
    n = n_triplets(size)
    labels = torch.as_tensor(np.asarray(labels), dtype=features.dtype)
    if labels.shape != (3 * n,):
        raise DomainError(f"labels must have length {3 * n}, got {tuple(labels.shape)}")

    a_idx, p_idx, n_idx = triplet_views(size)
    a, p, neg = features[a_idx], features[p_idx], features[n_idx]
    d_ap = 1.0 - F.cosine_similarity(a, p, dim=1, eps=1e-12)
    d_an = 1.0 - F.cosine_similarity(a, neg, dim=1, eps=1e-12)
    l_tri = F.relu(d_ap - d_an + margin).mean()

    prob = ((1.0 + cosine_row(features)) / 2.0).clamp(BCE_EPS, 1.0 - BCE_EPS)
    l_bce = -(labels * torch.log(prob) + (1.0 - labels) * torch.log1p(-prob)).mean()

    total = alpha * l_tri + (1.0 - alpha) * l_bce
    return total, l_tri, l_bce


def pretrain_reconstruction(
    model: nn.Module,
    crops: np.ndarray,
    config: TrainConfig,
    history: list | None = None,
) -> nn.Module:
    """Fit ``model`` to reproduce ``crops`` under mean absolute error."""
    crops = np.asarray(crops)
    if len(crops) == 0:
        raise DomainError("pretrain_reconstruction needs at least one crop")
    if config.pretrain_epochs == 0:
        return model
    g = seed_everything(config.seed)
    x_all = to_tensor(crops)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    model.train()
    bs = config.pretrain_batch_size
    for epoch in range(config.pretrain_epochs):
        perm = torch.randperm(len(x_all), generator=g)
        total, count = 0.0, 0
        for i in range(0, len(perm), bs):
            x = x_all[perm[i : i + bs]]
            loss = (model(x) - x).abs().mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"L1 pre-training diverged at epoch {epoch}, batch {i // bs}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(x)
            count += len(x)
        if history is not None:
            history.append({"epoch": epoch, "l1": total / count})
        log.debug("pretrain epoch %d l1=%.5f", epoch, total / count)
    return model


def train_fpp(
    loader: Iterable[np.ndarray],
    f_pp: nn.Module,
    f_e: nn.Module,
    config: TrainConfig,
    history: list | None = None,
) -> nn.Module:
    """Optimise ``f_pp`` so its outputs follow the knowledge-prior targets under ``f_e``.

    ``loader`` yields uint8 batches ``(3n+1, H, W, 3)`` in layout order and is
    iterated once per epoch (so it should be re-iterable, e.g. a list).
    """
    if not is_frozen(f_e):
        raise ContractError("f_e must be frozen before training f_pp")
    seed_everything(config.seed)
    f_e.eval()
    f_pp.train()
    opt = torch.optim.Adam(f_pp.parameters(), lr=config.learning_rate)
    step = 0
    for epoch in range(config.epochs):
        for b_idx, batch in enumerate(loader):
            x = to_tensor(batch)
            labels = bce_labels(n_triplets(len(x)))
            fea = f_e(f_pp(x))
            total, l_tri, l_bce = combined_loss(fea, labels, config.alpha, config.triplet_margin)
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b_idx}")
            opt.zero_grad()
            total.backward()
            opt.step()
            if history is not None:
                history.append({
                    "step": step, "l_tri": l_tri.item(), "l_bce": l_bce.item(), "total": total.item(),
                })
            step += 1
    f_pp.eval()
    return f_pp


def anonymize(f_pp: nn.Module, images: np.ndarray) -> np.ndarray:
    """Privacy-preserved version of each crop (same shape, uint8)."""
    return apply_image_model(f_pp, images)


def mean_identity_cosine(f_e: nn.Module, a: np.ndarray, b: np.ndarray) -> float:
    """Mean cosine between embeddings of paired images (NaN for empty input)."""
    if len(a) == 0:
        return math.nan
    with torch.no_grad():
        za, zb = f_e(to_tensor(a)), f_e(to_tensor(b))
    return float(F.cosine_similarity(za, zb, dim=1).mean())
