"""Small shared optimisation loop for the supervised stages."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .errors import DomainError, TrainingError
from .models import seed_everything

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 0 or self.learning_rate < 0 or self.batch_size < 1:
            raise DomainError(f"invalid fit config {self}")


def fit(
    params,
    n_samples: int,
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    config: FitConfig,
    history: list | None = None,
    name: str = "loss",
) -> None:
    """Adam over shuffled minibatches; ``loss_fn`` maps an index tensor to a scalar loss."""
    g = seed_everything(config.seed)
    params = [p for p in params]
    opt = torch.optim.Adam(params, lr=config.learning_rate) if params else None
    for epoch in range(config.epochs):
        perm = torch.randperm(n_samples, generator=g)
        total = 0.0
        for i in range(0, n_samples, config.batch_size):
            idx = perm[i : i + config.batch_size]
            loss = loss_fn(idx)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite {name} at epoch {epoch}, batch {i // config.batch_size}")
            if opt is not None:
                opt.zero_grad()
                loss.backward()
                opt.step()
            total += loss.item() * len(idx)
        mean = total / n_samples
        if history is not None:
            history.append({"epoch": epoch, name: mean})
        log.debug("epoch %d %s=%.5f", epoch, name, mean)


def check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise DomainError("labels must be a 1-D integer array")
    if len(labels) and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(f"label outside class set 0..{n_classes - 1}")
    return labels.astype(np.int64)


def augment(x: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    """Random horizontal flip, colour-channel permutation and gain per sample.

    ``x`` is (N, 3, H, W) or (N, 3, T, H, W) in [0, 1]. Expression lives in
    geometry, so these keep the label while hiding colour shortcuts.
    """
    n = len(x)
    shape = (n,) + (1,) * (x.dim() - 1)
    flip = (torch.rand(n, generator=g) < 0.5).view(shape)
    x = torch.where(flip, x.flip(-1), x)
    perm = torch.stack([torch.randperm(3, generator=g) for _ in range(n)])
    x = x[torch.arange(n)[:, None], perm]
    gain = 0.7 + 0.6 * torch.rand(shape, generator=g)
    return (x * gain).clamp(0.0, 1.0)


def fit_classifier(
    model: nn.Module,
    inputs: torch.Tensor,
    labels,
    config: FitConfig,
    history: list | None = None,
    augmented: bool = False,
) -> nn.Module:
    """Cross-entropy training of ``model`` on pre-converted float inputs."""
    y = torch.from_numpy(check_labels(labels, model.n_classes))
    if len(y) == 0:
        raise DomainError("cannot train a classifier on an empty dataset")
    model.train()
    ce = nn.CrossEntropyLoss()
    g = torch.Generator().manual_seed(config.seed + 1)

    def loss(idx):
        x = augment(inputs[idx], g) if augmented else inputs[idx]
        return ce(model(x), y[idx])

    fit(model.parameters(), len(y), loss, config, history, "ce")
    model.eval()
    return model


@torch.no_grad()
def predict(model: nn.Module, inputs: torch.Tensor, batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = [model(inputs[i : i + batch_size]).argmax(1) for i in range(0, len(inputs), batch_size)]
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)
